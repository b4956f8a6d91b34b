"""Metric records, CSV summaries and atomic file output."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

SUMMARY_HEADER = "protocol,mode,attribute,error,chance"
RECORD_KEY = ("protocol", "mode", "attribute", "config_digest", "seed")


def config_digest(config):
    """Short stable hash of a JSON-serialisable configuration."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def atomic_write_text(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def make_record(protocol, mode, error, digest, seed, attribute=None, chance=None, **extra):
    rec = {"protocol": protocol, "mode": mode}
    if attribute is not None:
        rec["attribute"] = attribute
    rec["error"] = float(error)
    if chance is not None:
        rec["chance"] = float(chance)
    rec["config_digest"] = digest
    rec["seed"] = int(seed)
    rec.update(extra)
    return rec


def read_records(path):
    path = Path(path)
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def upsert_records(path, records):
    """Append ``records`` to a JSONL file, replacing earlier records with the same key.

    Re-running a command therefore leaves the file byte-identical.
    """
    existing = read_records(path)
    index = {tuple(r.get(k) for k in RECORD_KEY): i for i, r in enumerate(existing)}
    for rec in records:
        key = tuple(rec.get(k) for k in RECORD_KEY)
        if key in index:
            existing[index[key]] = rec
        else:
            index[key] = len(existing)
            existing.append(rec)
    atomic_write_text(path, "".join(json.dumps(r) + "\n" for r in existing))
    return existing


def _fmt(value):
    return "" if value is None else repr(float(value))


def summary_csv(records):
    lines = [SUMMARY_HEADER]
    for r in records:
        lines.append(",".join([r["protocol"], r["mode"], r.get("attribute", ""), _fmt(r["error"]), _fmt(r.get("chance"))]))
    return "\n".join(lines) + "\n"


def online_csv(rows):
    return "prefix_fraction,mode,error\n" + "".join(f"{f!r},{mode},{err!r}\n" for f, mode, err in rows)
