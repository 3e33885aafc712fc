"""Provenance records written next to every CLI output.

A record carries the full config echo, the seed, and sha256 digests of input
and output artifacts, enough to re-run a deterministic stage bit-identically.
Wall-clock fields live under "timing" and are excluded from any equality
comparison of records.
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

from . import __version__ as _version


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def build_record(subcommand, config, seed, inputs, outputs, timing=None) -> dict:
    return {
        "tool": "lacuneseg",
        "version": _version,
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "inputs": {str(k): sha256_file(k) for k in inputs if Path(k).is_file()},
        "outputs": {str(k): sha256_file(k) for k in outputs},
        "timing": timing or {"written_at": time.strftime("%Y-%m-%dT%H:%M:%S")},
    }


def write_record(path, record):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True, default=str))
