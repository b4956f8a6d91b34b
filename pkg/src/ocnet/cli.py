"""Command-line entry point: ``ocnet {gen,train,online,probe,match,project,report}``.

Each command takes flat flags and an optional ``--config file.json`` whose
keys are the flag names with underscores; flags given on the command line
win over the file.  Paths (--out, --data, --checkpoint) are always flags.

Exit codes: 0 success, 2 usage, 3 validation, 4 I/O, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evalsuite, figures, gradnet, report, scenegen, trainer
from .errors import ConfigError, NumericError, ShapeError
from .seeding import substream

log = logging.getLogger("ocnet")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4, 5

MODE_NAMES = {"unsup": "unsupervised", "sup": "supervised", "frozen": "frozen"}

# defaults per command; the keys double as the accepted --config keys
DEFAULTS = {
    "gen": {
        "out": None, "seed": 0, "scenes": scenegen.GenConfig.num_scenes, "min_objects": 2, "max_objects": 20,
        "background_max": scenegen.GenConfig.background_max, "noise_max": scenegen.GenConfig.noise_sigma_max,
        "force": False,
    },
    "train": {
        "data": None, "out": None, "seed": 0, "mode": "unsup", "steps": 1500, "lr": 1e-3, "embed_dim": 16,
        "hidden": [256, 64], "pairs_per_step": 4, "optimizer": "adam", "p_occ": 0.1, "output_norm": False,
        "init": "random", "warmstart": None, "force": False,
    },
    "online": {
        "out": None, "seed": 0, "frames": 300, "objects": 20, "prefixes": list(trainer.DEFAULT_PREFIXES),
        "suffix": 0.2, "steps": 500, "lr": 1e-3, "mode": "unsup", "embed_dim": 16, "hidden": [256, 64],
        "pairs_per_step": 4, "p_occ": 0.1, "background_max": scenegen.GenConfig.background_max,
        "checkpoint": None, "baseline": False, "force": False,
    },
    "probe": {
        "checkpoint": None, "data": None, "out": None, "seed": 0, "attribute": "category", "probe": "nn",
        "eval_split": "test", "shuffle_labels": False, "label": None,
    },
    "match": {
        "checkpoint": None, "data": None, "out": None, "seed": 0, "split": "test", "p_occ": 0.0, "label": None,
    },
    "project": {
        "checkpoint": None, "data": None, "out": None, "seed": 0, "split": "test", "color_by": "category",
        "limit": 2000, "force": False,
    },
    "report": {"out": None},
}

# keys that only steer where files go; they never enter the config digest
NON_DIGEST = {"out", "force", "config", "command", "label"}


def _floats(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser():
    p = argparse.ArgumentParser(prog="ocnet", description="Object-contrastive embeddings on synthetic scenes.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def command(name, help_text, out_required=True):
        c = sub.add_parser(name, help=help_text, argument_default=S)
        c.add_argument("--config", help="JSON file with default values for the flags")
        c.add_argument("--out", required=out_required, help="output directory")
        return c

    c = command("gen", "generate a two-view scene dataset")
    c.add_argument("--seed", type=int)
    c.add_argument("--scenes", type=int)
    c.add_argument("--min-objects", type=int)
    c.add_argument("--max-objects", type=int)
    c.add_argument("--background-max", type=float)
    c.add_argument("--noise-max", type=float)
    c.add_argument("--force", action="store_true")

    c = command("train", "train an embedding network")
    c.add_argument("--data", required=True)
    c.add_argument("--seed", type=int)
    c.add_argument("--mode", choices=sorted(MODE_NAMES))
    c.add_argument("--steps", type=int)
    c.add_argument("--lr", type=float)
    c.add_argument("--embed-dim", type=int)
    c.add_argument("--hidden", type=_ints)
    c.add_argument("--pairs-per-step", type=int)
    c.add_argument("--optimizer", choices=["adam", "sgd_momentum"])
    c.add_argument("--p-occ", type=float)
    c.add_argument("--output-norm", action="store_true")
    c.add_argument("--init", choices=["random", "warmstart"])
    c.add_argument("--warmstart", help="checkpoint to start from when --init warmstart")
    c.add_argument("--force", action="store_true")

    c = command("online", "online identification on a synthetic sequence")
    c.add_argument("--seed", type=int)
    c.add_argument("--frames", type=int)
    c.add_argument("--objects", type=int)
    c.add_argument("--prefixes", type=_floats)
    c.add_argument("--suffix", type=float)
    c.add_argument("--steps", type=int)
    c.add_argument("--lr", type=float)
    c.add_argument("--mode", choices=sorted(MODE_NAMES))
    c.add_argument("--embed-dim", type=int)
    c.add_argument("--hidden", type=_ints)
    c.add_argument("--pairs-per-step", type=int)
    c.add_argument("--p-occ", type=float)
    c.add_argument("--background-max", type=float)
    c.add_argument("--checkpoint", help="start from this network instead of a random one")
    c.add_argument("--baseline", action="store_true", help="also write the frozen-baseline rows")
    c.add_argument("--force", action="store_true")

    c = command("probe", "attribute probe on frozen embeddings")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--seed", type=int)
    c.add_argument("--attribute")
    c.add_argument("--probe", choices=list(evalsuite.PROBE_KINDS))
    c.add_argument("--eval-split", choices=list(scenegen.SPLITS))
    c.add_argument("--shuffle-labels", action="store_true")
    c.add_argument("--label", help="mode name used in the report (default: from run.json)")

    c = command("match", "view-to-view correspondence errors")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--seed", type=int)
    c.add_argument("--split", choices=list(scenegen.SPLITS))
    c.add_argument("--p-occ", type=float)
    c.add_argument("--label")

    c = command("project", "2-D projection of embeddings")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--seed", type=int)
    c.add_argument("--split", choices=list(scenegen.SPLITS))
    c.add_argument("--color-by")
    c.add_argument("--limit", type=int)
    c.add_argument("--force", action="store_true")

    command("report", "summarise report.jsonl into summary.csv and summary.png")
    return p


def resolve(args):
    """Merge defaults, the optional config file and explicit flags, in that order."""
    given = vars(args).copy()
    name = given.pop("command")
    given.pop("verbose", None)
    defaults = DEFAULTS[name]
    merged = dict(defaults)
    path = given.pop("config", None)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        unknown = sorted(set(doc) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown keys in {path}: {unknown}")
        merged.update(doc)
    merged.update(given)
    return name, merged


def digest_of(cfg):
    return report.config_digest({k: v for k, v in cfg.items() if k not in NON_DIGEST})


def prepare_out(path, force, allow_existing=False):
    """Create the output directory, refusing a non-empty one unless ``force``."""
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise FileExistsError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not (force or allow_existing):
        raise FileExistsError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj):
    report.atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _mode_label(cfg):
    if cfg.get("label"):
        return cfg["label"]
    run = Path(cfg["checkpoint"]).with_name("run.json")
    if run.exists():
        return json.loads(run.read_text(encoding="utf-8")).get("mode", "model")
    return "model"


# -- commands ---------------------------------------------------------------------

def cmd_gen(cfg):
    config = scenegen.GenConfig(
        num_scenes=cfg["scenes"], min_objects=cfg["min_objects"], max_objects=cfg["max_objects"],
        background_max=cfg["background_max"], noise_sigma_max=cfg["noise_max"],
    ).validate()
    out = prepare_out(cfg["out"], cfg["force"])
    dataset = scenegen.generate_dataset(config, cfg["seed"])
    scenegen.write_dataset(dataset, out)
    log.info("wrote %d patches from %d scenes to %s", len(dataset), config.num_scenes, out)


def _train_config(cfg, mode_key="mode"):
    return trainer.TrainConfig(
        mode=MODE_NAMES[cfg[mode_key]], steps=cfg["steps"], pairs_per_step=cfg["pairs_per_step"],
        learning_rate=cfg["lr"], optimizer=cfg.get("optimizer", "adam"), seed=cfg["seed"], p_occ=cfg["p_occ"],
    ).validate()


def _make_net(cfg, patch_size):
    if cfg.get("init") == "warmstart":
        if not cfg.get("warmstart"):
            raise ConfigError("--init warmstart needs --warmstart PATH")
        dims = gradnet.default_dims(patch_size, cfg["embed_dim"], tuple(cfg["hidden"]))
        return gradnet.init(cfg["seed"], "warmstart", dims=dims, warmstart=cfg["warmstart"])
    if cfg["embed_dim"] < 1 or any(h < 1 for h in cfg["hidden"]):
        raise ConfigError("layer widths must be >= 1")
    dims = gradnet.default_dims(patch_size, cfg["embed_dim"], tuple(cfg["hidden"]))
    return gradnet.init(cfg["seed"], dims=dims, output_norm=cfg["output_norm"])


def cmd_train(cfg):
    tcfg = _train_config(cfg)
    dataset = scenegen.load_dataset(cfg["data"])
    net = _make_net(cfg, dataset.patch_size)
    scenegen.check_input_dim(dataset, net)
    out = prepare_out(cfg["out"], cfg["force"])
    trace, net = trainer.train(dataset, net, tcfg)
    gradnet.save(net, out / "model.bin")
    report.atomic_write_text(out / "trace.csv", trace.to_csv())
    _write_json(out / "run.json", {
        "mode": tcfg.mode, "seed": cfg["seed"], "config_digest": digest_of(cfg), "checksum": trace.checksum,
        "config": {k: v for k, v in cfg.items() if k not in NON_DIGEST}, "data_seed": dataset.seed,
    })
    log.info("trained %d steps in %.1fs, final loss %.4f", tcfg.steps, trace.wall_time, trace.losses[-1])


def cmd_online(cfg):
    protocol = trainer.OnlineProtocol(prefix_fractions=tuple(cfg["prefixes"]), eval_suffix_fraction=cfg["suffix"])
    protocol.validate(cfg["frames"])
    tcfg = trainer.TrainConfig(
        mode=MODE_NAMES[cfg["mode"]], steps=cfg["steps"], pairs_per_step=cfg["pairs_per_step"],
        learning_rate=cfg["lr"], seed=cfg["seed"], p_occ=cfg["p_occ"],
    ).validate()
    gen = scenegen.GenConfig(background_max=cfg["background_max"]).validate()
    if cfg["checkpoint"]:
        net = gradnet.load(cfg["checkpoint"])
    else:
        net = gradnet.init(cfg["seed"], dims=gradnet.default_dims(gen.patch_size, cfg["embed_dim"],
                                                                   tuple(cfg["hidden"])))
    out = prepare_out(cfg["out"], cfg["force"])
    sequence = scenegen.generate_sequence(gen, cfg["seed"], num_objects=cfg["objects"], num_frames=cfg["frames"])
    if sequence.frames[0].pixels.shape[1] != net.dims[0]:
        raise ShapeError(f"network expects inputs of size {net.dims[0]}")
    result = trainer.run_online(sequence, net, tcfg, protocol)
    rows = []
    for f, e, be, bf in zip(result.prefix_fractions, result.errors, result.best_early, result.best_full):
        rows += [(f, "ocn", e), (f, "ocn_best_early", be), (f, "ocn_best_full", bf)]
        if cfg["baseline"]:
            rows.append((f, "baseline", result.baseline_error))
    report.atomic_write_text(out / "online.csv", report.online_csv(rows))
    figures.online_curve(rows, out / "online.png")
    digest = digest_of(cfg)
    chance = evalsuite.chance_rate(cfg["objects"])
    records = [report.make_record("online", mode, err, digest, cfg["seed"], attribute=f"prefix_{f!r}", chance=chance)
               for f, mode, err in rows]
    report.upsert_records(out / "report.jsonl", records)
    log.info("online errors by prefix: %s (baseline %.4f)", result.errors, result.baseline_error)


def _report_dir(cfg):
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_summary(out):
    records = report.read_records(out / "report.jsonl")
    report.atomic_write_text(out / "summary.csv", report.summary_csv(records))
    return records


def cmd_probe(cfg):
    net = gradnet.load(cfg["checkpoint"])
    dataset = scenegen.load_dataset(cfg["data"])
    scenegen.check_input_dim(dataset, net)
    dataset.attribute_labels(cfg["attribute"])
    shuffle = substream(cfg["seed"], "eval", "shuffle") if cfg["shuffle_labels"] else None
    res = evalsuite.probe_dataset(net, dataset, cfg["attribute"], cfg["probe"], cfg["eval_split"], shuffle)
    protocol = f"probe_{cfg['probe']}" + ("_shuffled" if cfg["shuffle_labels"] else "")
    rec = report.make_record(protocol, _mode_label(cfg), res.error_rate, digest_of(cfg), cfg["seed"],
                             attribute=res.attribute, chance=res.chance_rate, eval_split=cfg["eval_split"])
    out = _report_dir(cfg)
    report.upsert_records(out / "report.jsonl", [rec])
    _write_summary(out)
    print(f"{protocol},{rec['mode']},{res.attribute},{res.error_rate!r},{res.chance_rate!r}")


def cmd_match(cfg):
    net = gradnet.load(cfg["checkpoint"])
    dataset = scenegen.load_dataset(cfg["data"])
    scenegen.check_input_dim(dataset, net)
    res = evalsuite.match_dataset(net, dataset, cfg["split"], cfg["seed"], cfg["p_occ"])
    digest, mode = digest_of(cfg), _mode_label(cfg)
    values = [("object", res.object_matching_error), ("attribute", res.attribute_error),
              ("category", res.per_attribute["category"]), ("color", res.per_attribute["color"])]
    records = [report.make_record("match", mode, v, digest, cfg["seed"], attribute=a, anchors=res.anchors)
               for a, v in values]
    out = _report_dir(cfg)
    report.upsert_records(out / "report.jsonl", records)
    _write_summary(out)
    for a, v in values:
        print(f"match,{mode},{a},{v!r}")


def cmd_project(cfg):
    net = gradnet.load(cfg["checkpoint"])
    dataset = scenegen.load_dataset(cfg["data"])
    scenegen.check_input_dim(dataset, net)
    labels, _ = dataset.attribute_labels(cfg["color_by"])
    rows = dataset.split_rows(cfg["split"])
    if cfg["limit"] < 3:
        raise ConfigError("--limit must be >= 3")
    if len(rows) > cfg["limit"]:
        rows = np.sort(substream(cfg["seed"], "eval", "project").choice(rows, cfg["limit"], replace=False))
    coords = evalsuite.project_2d(evalsuite.embed(net, dataset.patches[rows].reshape(len(rows), -1)))
    out = prepare_out(cfg["out"], cfg["force"], allow_existing=True)
    lines = ["index,object_id,label,x,y"]
    lines += [f"{i},{dataset.object_id[i]},{labels[i]},{x!r},{y!r}" for i, (x, y) in zip(rows.tolist(), coords)]
    report.atomic_write_text(out / "projection.csv", "\n".join(lines) + "\n")
    figures.projection_scatter(coords, labels[rows], out / "projection.png", title=f"coloured by {cfg['color_by']}")


def cmd_report(cfg):
    out = Path(cfg["out"])
    if not (out / "report.jsonl").exists():
        raise FileNotFoundError(f"no report.jsonl in {out}")
    records = _write_summary(out)
    if records:
        figures.error_bars(records, out / "summary.png")
    sys.stdout.write(report.summary_csv(records))


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "online": cmd_online, "probe": cmd_probe, "match": cmd_match,
            "project": cmd_project, "report": cmd_report}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        name, cfg = resolve(args)
        COMMANDS[name](cfg)
    except NumericError as exc:
        print(f"ocnet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"ocnet: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ShapeError, LookupError, ValueError, TypeError) as exc:
        print(f"ocnet: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
