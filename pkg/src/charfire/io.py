"""CSV tables with JSON metadata sidecars.

Floats are written with ``repr`` so that a table read back reproduces the
written values exactly.  Every table ``name.csv`` gets ``name.csv.meta.json``
holding the software version, the config hash and any run details.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_rows(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def write_dicts(path, rows: Sequence[dict], header: Sequence[str] | None = None) -> Path:
    rows = list(rows)
    if header is None:
        if not rows:
            raise ValueError(f"{path}: no rows and no header")
        header = list(rows[0])
    return write_rows(path, header, ([r[h] for h in header] for r in rows))


def write_matrix(path, header: Sequence[str], M) -> Path:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return write_rows(path, header, M.tolist())


def read_rows(path) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        return header, [row for row in reader if row]


def read_dicts(path) -> list[dict]:
    header, rows = read_rows(path)
    return [dict(zip(header, r)) for r in rows]


def read_matrix(path) -> tuple[list[str], np.ndarray]:
    header, rows = read_rows(path)
    M = np.array(rows, dtype=float) if rows else np.empty((0, len(header)))
    return header, M


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    return v


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def write_metadata(path, config=None, **details) -> Path:
    """Write the sidecar for the table at ``path``."""
    meta = {"software": "charfire", "version": __version__}
    if config is not None:
        meta["config_hash"] = config.config_hash()
        meta["seed"] = config.seed
        meta["config"] = config.to_dict()
    meta.update(details)
    out = sidecar_path(path)
    out.write_text(json.dumps(_jsonable(meta), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def read_metadata(path) -> dict:
    p = sidecar_path(path)
    if not p.is_file():
        raise FileNotFoundError(f"missing metadata sidecar: {p}")
    return json.loads(p.read_text(encoding="utf-8"))
