"""CSV and JSON helpers with bit-stable textual output."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return ""
    return repr(v)


def write_csv(path, columns: Sequence[str], series: Sequence[Sequence]) -> None:
    """Header row plus one row per index; ``None``/NaN become empty fields."""
    length = max((len(s) for s in series if s is not None), default=0)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in range(length):
            w.writerow([_fmt(s[r]) if s is not None else "" for s in series])


def read_csv(path) -> dict[str, list]:
    """Columns as lists of floats (``nan`` for empty fields)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    out = {h: [] for h in header}
    for row in body:
        for h, v in zip(header, row):
            out[h].append(float(v) if v != "" else math.nan)
    return out


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, Path):
        return str(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _clean(o):
    # non-finite floats are not valid JSON
    if isinstance(o, float) and not math.isfinite(o):
        return None if math.isnan(o) else ("inf" if o > 0 else "-inf")
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    return o


def json_dumps(obj) -> str:
    """Indented JSON; floats use Python's shortest round-trip repr."""
    return json.dumps(_clean(json.loads(json.dumps(obj, default=_default))), indent=2,
                      sort_keys=True) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(json_dumps(obj), encoding="utf-8")
