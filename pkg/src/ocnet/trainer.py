"""Training loops: offline training on a scene dataset and the online protocol.

One optimisation step draws ``pairs_per_step`` frame pairs, embeds all of
their crops in a single forward pass, averages the per-pair objective and
applies one optimiser update.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import objective
from .errors import ConfigError, NumericError
from .evalsuite import build_gallery, identification_error
from .gradnet import backward, forward
from .scenegen import PairBatch, check_input_dim, sample_frame_pair
from .seeding import child_seed, substream

log = logging.getLogger(__name__)

MODES = ("unsupervised", "supervised", "frozen")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "unsupervised"
    steps: int = 1500
    pairs_per_step: int = 4
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    eval_every: int = 0
    p_occ: float = 0.1

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.pairs_per_step < 1:
            raise ConfigError("pairs_per_step must be >= 1")
        if self.learning_rate < 0 or not np.isfinite(self.learning_rate):
            raise ConfigError("learning_rate must be a finite value >= 0")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0")
        return self


@dataclass
class TrainTrace:
    losses: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    wall_time: float = 0.0
    checksum: str = ""

    def to_csv(self):
        return "step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(self.losses))


# -- optimiser ------------------------------------------------------------------

def step_optimizer(params, grads, state, config):
    """In-place update of ``params``; ``state`` is a dict owned by the caller."""
    lr = config.learning_rate
    if config.optimizer == "sgd_momentum":
        v = state.setdefault("velocity", np.zeros_like(params))
        v *= 0.9
        v += grads
        params -= lr * v
        return params, state
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = state.setdefault("m", np.zeros_like(params))
    v = state.setdefault("v", np.zeros_like(params))
    state["t"] = t = state.get("t", 0) + 1
    m *= beta1
    m += (1 - beta1) * grads
    v *= beta2
    v += (1 - beta2) * grads * grads
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    params -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


# -- one gradient step ----------------------------------------------------------

def batch_loss(net, pairs, supervised=False):
    """Mean objective over ``pairs`` and its gradient in ``net.grads``."""
    blocks, bounds = [], []
    for pair in pairs:
        blocks += [pair.first.pixels, pair.second.pixels]
        bounds.append((len(pair.first), len(pair.second)))
    emb, acts = forward(net, np.concatenate(blocks))
    grad = np.zeros_like(emb)
    total, correct, mined = 0.0, 0, 0
    pos = 0
    for pair, (n, m) in zip(pairs, bounds):
        f1, f2 = emb[pos:pos + n], emb[pos + n:pos + n + m]
        if supervised:
            loss = objective.supervised_ocn_loss(f1, f2, pair.first.object_ids, pair.second.object_ids)
        else:
            loss = objective.ocn_loss(f1, f2, pair.first.object_ids, pair.second.object_ids)
        total += loss.value
        grad[pos:pos + n] += loss.grad_anchors
        grad[pos + n:pos + n + m] += loss.grad_positives
        for res in loss.mining:
            correct += int(res.is_correct.sum())
            mined += len(res.is_correct)
        pos += n + m
    k = len(pairs)
    backward(net, acts, grad / k)
    return total / k, (correct / mined if mined else float("nan"))


def fit(net, sample_pairs, config, evaluate=None, eval_steps=()):
    """Optimise ``net`` in place.

    ``sample_pairs(rng, k)`` returns ``k`` PairBatches; ``evaluate(net)`` is
    called after each step listed in ``eval_steps`` (1-based) and also when
    ``config.eval_every`` divides the step number.
    """
    config.validate()
    rng = substream(config.seed, "train")
    trace = TrainTrace()
    state = {}
    eval_steps = set(eval_steps)
    start = time.perf_counter()
    for step in range(config.steps):
        pairs = sample_pairs(rng, config.pairs_per_step)
        try:
            value, mine_acc = batch_loss(net, pairs, supervised=config.mode == "supervised")
        except NumericError as exc:
            raise NumericError(f"{exc} at step {step}", step=step) from exc
        if not np.isfinite(value) or not np.isfinite(net.grads).all():
            raise NumericError(f"non-finite loss at step {step}", step=step)
        trace.losses.append(value)
        if config.mode != "frozen" and config.learning_rate > 0:
            step_optimizer(net.params, net.grads, state, config)
            # keep parameters float32-representable so checkpoints reload exactly
            net.params[:] = net.params.astype(np.float32)
            net.touch()
        done = step + 1
        if evaluate is not None and (done in eval_steps or (config.eval_every and done % config.eval_every == 0)):
            snap = {"step": done, "mining_accuracy": mine_acc}
            snap.update(evaluate(net))
            trace.evals.append(snap)
        if done % 250 == 0:
            log.debug("step %d loss %.4f mining acc %.3f", done, value, mine_acc)
    trace.wall_time = time.perf_counter() - start
    trace.checksum = net.checksum()
    return trace


def train(dataset, net, config, evaluate=None):
    """Train on the dataset's training split; returns (trace, net)."""
    config.validate()
    check_input_dim(dataset, net)
    scenes = dataset.scene_ids("train")
    if not scenes:
        raise ConfigError("dataset has no training scenes")

    def sample_pairs(rng, k):
        chosen = rng.integers(0, len(scenes), size=k)
        return [sample_frame_pair(dataset, scenes[i], child_seed(rng), config.p_occ) for i in chosen]

    trace = fit(net, sample_pairs, config, evaluate)
    return trace, net


# -- online protocol ---------------------------------------------------------------

DEFAULT_PREFIXES = (0.025, 0.05, 0.1, 0.2, 0.4, 0.8)


@dataclass(frozen=True)
class OnlineProtocol:
    prefix_fractions: tuple = DEFAULT_PREFIXES
    eval_suffix_fraction: float = 0.2
    early_fraction: float = 0.05
    num_evals: int = 10

    def validate(self, num_frames):
        fr = list(self.prefix_fractions)
        if not fr:
            raise ConfigError("at least one prefix fraction is required")
        if any(not 0 < f <= 1 for f in fr) or any(b <= a for a, b in zip(fr, fr[1:])):
            raise ConfigError("prefix fractions must be increasing values in (0, 1]")
        if not 0 < self.eval_suffix_fraction < 1:
            raise ConfigError("eval_suffix_fraction must be in (0, 1)")
        suffix_start = num_frames - int(round(self.eval_suffix_fraction * num_frames))
        for f in fr:
            if self.prefix_length(f, num_frames) < 1:
                raise ConfigError(f"prefix fraction {f} selects no frames of {num_frames}")
        if self.prefix_length(fr[-1], num_frames) > suffix_start:
            raise ConfigError("largest training prefix overlaps the evaluation suffix")
        return self

    @staticmethod
    def prefix_length(fraction, num_frames):
        return int(np.floor(fraction * num_frames + 1e-9))

    def suffix(self, frames):
        return frames[len(frames) - int(round(self.eval_suffix_fraction * len(frames))):]


@dataclass
class OnlineResult:
    prefix_fractions: list
    errors: list  # error after the full training budget, per prefix
    best_early: list  # lowest error seen within the first early_fraction of steps
    best_full: list  # lowest error seen over the whole run
    baseline_error: float
    traces: list

    def rows(self, include_baseline=True):
        out = []
        for f, e in zip(self.prefix_fractions, self.errors):
            out.append((f, "ocn", e))
            if include_baseline:
                out.append((f, "baseline", self.baseline_error))
        return out


def _eval_schedule(steps, early_fraction, num_evals):
    early = max(1, int(round(early_fraction * steps)))
    points = {early, steps}
    if num_evals > 0:
        points.update(int(round(x)) for x in np.linspace(0, steps, num_evals + 1)[1:])
    return early, sorted(p for p in points if p >= 1)


def run_online(sequence, net_init, config, protocol=OnlineProtocol()):
    """Train a fresh copy of ``net_init`` on each prefix and score identification on the suffix.

    References are each object's first appearance in the sequence.  The
    frozen baseline is ``net_init`` itself, evaluated once.
    """
    config.validate()
    frames = sequence.frames
    protocol.validate(len(frames))
    eval_frames = protocol.suffix(frames)
    reference_frames = frames

    def evaluate(net):
        gallery = build_gallery(net, reference_frames)
        return {"error": identification_error(net, gallery, eval_frames)}

    baseline = evaluate(net_init)["error"]
    early, schedule = _eval_schedule(config.steps, protocol.early_fraction, protocol.num_evals)
    result = OnlineResult(list(protocol.prefix_fractions), [], [], [], baseline, [])
    for k, fraction in enumerate(protocol.prefix_fractions):
        prefix = frames[: protocol.prefix_length(fraction, len(frames))]
        net = net_init.copy()
        if config.mode == "frozen":
            err = baseline
            result.errors.append(err)
            result.best_early.append(err)
            result.best_full.append(err)
            result.traces.append(None)
            continue
        run_cfg = _with_seed(config, child_seed(substream(config.seed, "online", k)))
        trace = fit(net, _prefix_sampler(prefix), run_cfg, evaluate, schedule)
        errs = {s["step"]: s["error"] for s in trace.evals}
        result.errors.append(errs[config.steps])
        result.best_early.append(min(e for s, e in errs.items() if s <= early))
        result.best_full.append(min(errs.values()))
        result.traces.append(trace)
        log.info("prefix %.3f (%d frames): error %.4f", fraction, len(prefix), errs[config.steps])
    return result


def _with_seed(config, seed):
    return replace(config, seed=seed)


def _prefix_sampler(prefix):
    """Pairs of two random frames (distinct when possible) from ``prefix``.

    Sequence frames already carry their own occlusion, so no extra dropout.
    """

    def sample_pairs(rng, k):
        out = []
        for _ in range(k):
            if len(prefix) > 1:
                i, j = rng.choice(len(prefix), size=2, replace=False)
            else:
                i = j = 0
            out.append(PairBatch(prefix[i], prefix[j]))
        return out

    return sample_pairs
