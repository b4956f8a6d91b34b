"""Evaluation protocols for frozen embeddings.

* identification: nearest reference object in a gallery of first sightings
* attribute probes: softmax regression and 1-nearest-neighbour label transfer
* view-to-view correspondence: does the cross-view nearest neighbour share
  the anchor's identity / attributes
* a deterministic 2-D principal-direction projection for plotting
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateProbeError
from .gradnet import forward
from .objective import distance_matrix
from .scenegen import sample_frame_pair
from .seeding import substream

PROBE_STEPS = 2000
PROBE_LEARNING_RATES = (1e-1, 1e-2, 1e-3)


def embed(net, x, batch_size=4096):
    """Embed rows of ``x`` in chunks; pure with respect to ``net``."""
    x = np.asarray(x)
    out = [forward(net, x[i:i + batch_size].reshape(-1, net.dims[0]))[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, net.embed_dim))


def chance_rate(num_values):
    return 1.0 - 1.0 / num_values


# -- identification -----------------------------------------------------------

@dataclass
class ReferenceGallery:
    object_ids: np.ndarray
    embeddings: np.ndarray

    def __len__(self):
        return len(self.object_ids)


def build_gallery(net, frames):
    """One reference embedding per object, taken from its first appearance in ``frames``."""
    seen = {}
    for frame in frames:
        for row, oid in enumerate(frame.object_ids.tolist()):
            if oid not in seen:
                seen[oid] = frame.pixels[row]
    ids = np.array(sorted(seen), dtype=np.int64)
    if len(ids) == 0:
        return ReferenceGallery(ids, np.zeros((0, net.embed_dim)))
    return ReferenceGallery(ids, embed(net, np.stack([seen[i] for i in ids.tolist()])))


def assign_ids(gallery, embeddings):
    if len(gallery) == 0:
        raise ConfigError("identification needs a non-empty gallery")
    nearest = np.argmin(distance_matrix(embeddings, gallery.embeddings), axis=1)
    return gallery.object_ids[nearest]


def identification_error(net, gallery, eval_frames):
    """Fraction of object detections in ``eval_frames`` given the wrong gallery identity."""
    if len(gallery) == 0:
        raise ConfigError("identification needs a non-empty gallery")
    known = set(gallery.object_ids.tolist())
    wrong = total = 0
    for frame in eval_frames:
        if len(frame) == 0:
            continue
        missing = set(frame.object_ids.tolist()) - known
        if missing:
            raise ConfigError(f"objects {sorted(missing)} have no gallery reference")
        assigned = assign_ids(gallery, embed(net, frame.pixels))
        wrong += int(np.sum(assigned != frame.object_ids))
        total += len(frame)
    if total == 0:
        raise ConfigError("no object detections to evaluate")
    return wrong / total


# -- attribute probes -----------------------------------------------------------

@dataclass
class ProbeResult:
    attribute: str
    error_rate: float
    probe_kind: str
    chance_rate: float
    details: dict = field(default_factory=dict)


def _softmax_regression(x, y, num_classes, lr, steps):
    n, k = x.shape
    w = np.zeros((k, num_classes))
    b = np.zeros(num_classes)
    onehot = np.eye(num_classes)[y]
    for _ in range(steps):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        prob = np.exp(logits)
        prob /= prob.sum(axis=1, keepdims=True)
        g = (prob - onehot) / n
        w -= lr * (x.T @ g)
        b -= lr * g.sum(axis=0)
    return w, b


def linear_probe(train_x, train_y, eval_x, eval_y, attribute="category", num_classes=None,
                 val_x=None, val_y=None, steps=PROBE_STEPS, learning_rates=PROBE_LEARNING_RATES):
    """Softmax-regression probe; the learning rate with the lowest validation error is kept.

    Without an explicit validation set every fifth training sample is held out.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    if num_classes is None:
        num_classes = int(max(train_y.max(), np.max(eval_y))) + 1
    if val_x is None:
        hold = np.zeros(len(train_y), dtype=bool)
        hold[4::5] = True
        val_x, val_y = train_x[hold], train_y[hold]
        train_x, train_y = train_x[~hold], train_y[~hold]
    if len(np.unique(train_y)) < 2:
        raise DegenerateProbeError(f"training labels for {attribute!r} contain a single class")
    val_x = np.asarray(val_x, dtype=np.float64)
    val_y = np.asarray(val_y, dtype=np.int64)

    best = None
    for lr in learning_rates:
        w, b = _softmax_regression(train_x, train_y, num_classes, lr, steps)
        val_err = float(np.mean(np.argmax(val_x @ w + b, axis=1) != val_y)) if len(val_y) else 0.0
        if best is None or val_err < best[0]:
            best = (val_err, lr, w, b)
    val_err, lr, w, b = best
    pred = np.argmax(np.asarray(eval_x, dtype=np.float64) @ w + b, axis=1)
    error = float(np.mean(pred != np.asarray(eval_y)))
    return ProbeResult(attribute, error, "linear", chance_rate(num_classes),
                       {"learning_rate": lr, "val_error": val_err})


def nearest_neighbor_labels(train_x, train_y, eval_x, chunk=1024):
    train_x = np.asarray(train_x, dtype=np.float64)
    eval_x = np.asarray(eval_x, dtype=np.float64)
    if len(train_x) == 0:
        raise ConfigError("nearest-neighbour probe needs a non-empty reference set")
    sq_train = (train_x * train_x).sum(1)
    out = np.empty(len(eval_x), dtype=np.asarray(train_y).dtype)
    for i in range(0, len(eval_x), chunk):
        q = eval_x[i:i + chunk]
        # |q|^2 is constant per row and cannot change the argmin
        d = sq_train[None, :] - 2.0 * q @ train_x.T
        out[i:i + chunk] = np.asarray(train_y)[np.argmin(d, axis=1)]
    return out


def nn_probe(train_x, train_y, eval_x, eval_y, attribute="category", num_classes=None):
    """1-nearest-neighbour label transfer from the training embeddings."""
    if num_classes is None:
        num_classes = int(max(np.max(train_y), np.max(eval_y))) + 1
    pred = nearest_neighbor_labels(train_x, train_y, eval_x)
    error = float(np.mean(pred != np.asarray(eval_y)))
    return ProbeResult(attribute, error, "nearest_neighbor", chance_rate(num_classes))


# -- view-to-view correspondence --------------------------------------------------

@dataclass
class CorrespondenceResult:
    attribute_error: float
    object_matching_error: float
    per_attribute: dict
    anchors: int


def correspondence_eval(net, pairs):
    """Check the cross-view nearest neighbour of every anchor, in both directions.

    ``attribute_error`` counts neighbours whose (category, color) differs from
    the anchor's; ``object_matching_error`` counts neighbours that are a
    different object instance.
    """
    wrong_obj = wrong_attr = wrong_cat = wrong_col = total = 0
    for pair in pairs:
        fa, fb = embed(net, pair.first.pixels), embed(net, pair.second.pixels)
        dist = distance_matrix(fa, fb)
        for anchor, other, d in ((pair.first, pair.second, dist), (pair.second, pair.first, dist.T)):
            nn = np.argmin(d, axis=1)
            cat_bad = other.categories[nn] != anchor.categories
            col_bad = other.colors[nn] != anchor.colors
            wrong_obj += int(np.sum(other.object_ids[nn] != anchor.object_ids))
            wrong_attr += int(np.sum(cat_bad | col_bad))
            wrong_cat += int(np.sum(cat_bad))
            wrong_col += int(np.sum(col_bad))
            total += len(anchor)
    if total == 0:
        raise ConfigError("no anchors to evaluate")
    return CorrespondenceResult(
        attribute_error=wrong_attr / total,
        object_matching_error=wrong_obj / total,
        per_attribute={"category": wrong_cat / total, "color": wrong_col / total},
        anchors=total,
    )


# -- projection -------------------------------------------------------------------

def project_2d(embeddings, tol=1e-10):
    """Coordinates along the top-2 principal directions of the centred rows."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or len(x) < 3:
        raise ConfigError("project_2d needs at least 3 embeddings")
    centred = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    out = np.zeros((len(x), 2))
    scale = s[0] if len(s) else 0.0
    for k in range(min(2, len(s))):
        if s[k] <= tol * max(scale, 1.0):
            break
        direction = vt[k]
        lead = direction[np.flatnonzero(np.abs(direction) > tol)[0]]
        if lead < 0:
            direction = -direction
        out[:, k] = centred @ direction
    return out


# -- dataset-level drivers -------------------------------------------------------

PROBE_KINDS = ("linear", "nn")


def probe_dataset(net, dataset, attribute="category", kind="nn", eval_split="test", shuffle_rng=None):
    """Probe ``attribute`` from embeddings of the training split, scored on ``eval_split``.

    With ``shuffle_rng`` the labels are permuted across the whole dataset
    first, which should leave the probe at chance.
    """
    if kind not in PROBE_KINDS:
        raise ConfigError(f"probe must be one of {PROBE_KINDS}, got {kind!r}")
    labels, num_values = dataset.attribute_labels(attribute)
    if shuffle_rng is not None:
        labels = shuffle_rng.permutation(labels)
    train, evaluate = dataset.split_rows("train"), dataset.split_rows(eval_split)
    if len(train) == 0 or len(evaluate) == 0:
        raise ConfigError(f"probe needs non-empty train and {eval_split!r} splits")
    emb = embed(net, dataset.patches.reshape(len(dataset), -1))
    if kind == "nn":
        return nn_probe(emb[train], labels[train], emb[evaluate], labels[evaluate], attribute, num_values)
    val = dataset.split_rows("val")
    val_x, val_y = (emb[val], labels[val]) if len(val) else (None, None)
    return linear_probe(emb[train], labels[train], emb[evaluate], labels[evaluate], attribute, num_values,
                        val_x=val_x, val_y=val_y)


def match_dataset(net, dataset, split="test", seed=0, p_occ=0.0):
    """Correspondence over one frame pair per scene of ``split``."""
    rng = substream(seed, "eval", "match")
    scenes = dataset.scene_ids(split)
    seeds = rng.integers(0, 2**63 - 1, size=len(scenes))
    return correspondence_eval(net, [sample_frame_pair(dataset, s, int(k), p_occ) for s, k in zip(scenes, seeds)])
