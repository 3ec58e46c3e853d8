"""Byte-stable JSON/CSV report emission and run manifests."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import sys
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SIG_DIGITS = 12


def _fmt(x: float) -> float | str:
    if math.isnan(x) or math.isinf(x):
        return str(x)
    return float(format(x, f".{SIG_DIGITS}g"))


def normalize(obj):
    """Convert numpy scalars/arrays and tuples to plain JSON values; round floats to 12 digits."""
    if isinstance(obj, dict):
        return {str(k): normalize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [normalize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return normalize(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _fmt(float(obj))
    return obj


def dumps_json(results) -> str:
    return json.dumps(normalize(results), sort_keys=True, indent=1) + "\n"


def dumps_csv(rows: Iterable[dict], columns: Sequence[str] | None = None) -> str:
    rows = list(rows)
    if columns is None:
        columns = sorted({k for r in rows for k in r})
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        cells = []
        for c in columns:
            v = r.get(c, "")
            if isinstance(v, (bool, np.bool_)):
                v = int(v)
            elif isinstance(v, (float, np.floating)):
                v = format(float(v), f".{SIG_DIGITS}g")
            cells.append(v)
        writer.writerow(cells)
    return buf.getvalue()


def emit_report(results, fmt: str, path, columns: Sequence[str] | None = None) -> Path:
    """Write ``results`` (a JSON-able object, or a list of row dicts for CSV)."""
    path = Path(path)
    if fmt == "json":
        text = dumps_json(results)
    elif fmt == "csv":
        text = dumps_csv(results, columns)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(normalize(config), sort_keys=True).encode()).hexdigest()


def write_manifest(out_dir, command: str, argv: Sequence[str], config: dict,
                   seed: int | None, files: Sequence[str]) -> Path:
    from . import __version__
    from ._backend import BACKEND
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "version": __version__,
        "backend": BACKEND,
        "python": sys.version.split()[0],
        "files": sorted(files),
    }
    return emit_report(manifest, "json", Path(out_dir) / f"{command}.manifest.json")
