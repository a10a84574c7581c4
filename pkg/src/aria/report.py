"""Deterministic report emission: JSON/CSV written atomically (temp file + rename)."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from aria import __version__


def jsonable(obj):
    """Recursively convert numpy scalars/arrays and non-finite floats (-> None) for JSON."""
    if isinstance(obj, Mapping):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def canonical_json(obj) -> str:
    return json.dumps(jsonable(obj), sort_keys=True, separators=(",", ":"))


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_file(path, chunk: int = 2**22) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while block := f.read(chunk):
            h.update(block)
    return h.hexdigest()


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(jsonable(obj), indent=2) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return repr(f) if math.isfinite(f) else "nan"
    return str(v)


def write_csv(path, rows: Iterable[Mapping], columns: Sequence[str]) -> int:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    n = 0
    for row in rows:
        w.writerow([_fmt(row.get(c, "")) for c in columns])
        n += 1
    atomic_write_text(path, buf.getvalue())
    return n


def metadata(**extra) -> dict:
    return {"tool": "aria", "version": __version__, **extra}


HOMOGENEITY_COLUMNS = ("method", "stage", "channel", "K", "z_mean", "pos", "sig", "n_queries", "normalization")
RESIDUAL_COLUMNS = (
    "method",
    "stage",
    "channel",
    "K",
    "z_mean_original",
    "pos_original",
    "sig_original",
    "z_mean_residual",
    "pos_residual",
    "sig_residual",
)
RELIABILITY_COLUMNS = ("method", "stage", "r1", "r2_5", "p", "kappa", "kappa_query_subsample", "precision")
ALIGNMENT_COLUMNS = ("method", "stage", "channel", "alpha_max", "max_feature", "max_dim", "alpha_reg", "reg_group")
STRATA_COLUMNS = ("method", "stage", "channel", "K", "label", "n", "z_mean", "pos", "sig")
