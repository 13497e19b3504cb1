"""Deterministic JSON/CSV writers.

All floats are emitted with 17 significant digits ('%.17g'), which
round-trips float64 exactly and keeps every artifact byte-identical across
runs. The stdlib json encoder writes shortest-round-trip floats instead,
hence the small emitter here.
"""

from __future__ import annotations

import json
import math

import numpy as np

from .errors import DataError


def format_float(x):
    x = float(x)
    if not math.isfinite(x):
        raise DataError("refusing to serialize a non-finite float")
    return format(x, ".17g")


def _emit(obj, pieces):
    if isinstance(obj, dict):
        pieces.append("{")
        for i, (key, value) in enumerate(obj.items()):
            if i:
                pieces.append(",")
            if not isinstance(key, str):
                raise DataError(f"JSON object keys must be strings, got {key!r}")
            pieces.append(json.dumps(key))
            pieces.append(":")
            _emit(value, pieces)
        pieces.append("}")
    elif isinstance(obj, (list, tuple)):
        pieces.append("[")
        for i, value in enumerate(obj):
            if i:
                pieces.append(",")
            _emit(value, pieces)
        pieces.append("]")
    elif isinstance(obj, bool) or isinstance(obj, np.bool_):
        pieces.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        pieces.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        pieces.append(format_float(obj))
    elif isinstance(obj, np.ndarray):
        _emit(obj.tolist(), pieces)
    elif obj is None:
        pieces.append("null")
    elif isinstance(obj, str):
        pieces.append(json.dumps(obj))
    else:
        raise DataError(f"cannot serialize value of type {type(obj).__name__}")


def dumps_json(obj):
    pieces = []
    _emit(obj, pieces)
    return "".join(pieces)


def dump_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_json(obj))
        fh.write("\n")


def load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_csv(path, header, rows):
    """Write rows of mixed str/int/float cells; floats use 17 sig digits."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            cells = []
            for cell in row:
                if isinstance(cell, bool) or isinstance(cell, np.bool_):
                    cells.append("true" if cell else "false")
                elif isinstance(cell, (float, np.floating)):
                    cells.append(format_float(cell))
                elif isinstance(cell, (int, np.integer)):
                    cells.append(str(int(cell)))
                else:
                    cells.append(str(cell))
            fh.write(",".join(cells) + "\n")
