"""CSV and JSON emission with deterministic formatting."""
import csv
import hashlib
import json
import logging
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


def fmt(x):
    """Shortest round-trip text for a number; complex values are not accepted."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    logger.info("wrote %s", path)
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [row for row in r]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, complex):
        return {"re": obj.real, "im": obj.imag}
    return obj


def write_json(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_jsonable(data), indent=2, sort_keys=True)
    path.write_text(text + "\n")
    logger.info("wrote %s", path)
    return path


def config_hash(raw):
    """SHA-256 of the canonical JSON form of a parsed config."""
    text = json.dumps(_jsonable(raw), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def field_rows(grid, values):
    """Rows ``t, x..., re, im`` for every node of a grid field."""
    pts = grid.points().reshape(-1, grid.n + 1)
    vals = np.asarray(values).reshape(-1)
    for p, v in zip(pts, vals):
        yield tuple(p) + (float(np.real(v)), float(np.imag(v)))


def field_header(n):
    return ["t"] + [f"x{k + 1}" for k in range(n)] + ["re", "im"]
