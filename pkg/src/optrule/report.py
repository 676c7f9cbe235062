"""Versioned machine-readable run reports.

Reports are JSON with a stable field order, every real emitted with 17
significant digits, and non-finite reals as the bare tokens ``NaN``,
``Infinity`` and ``-Infinity`` (accepted back by the parser). Serialization
round-trips byte-identically, and files are written atomically.
"""

from __future__ import annotations

import json
import math
import os

import numpy as np

SCHEMA_VERSION = 1


def _emit(value, parts: list[str], indent: int) -> None:
    pad = "  " * indent
    if isinstance(value, np.bool_):
        value = bool(value)
    elif isinstance(value, np.integer):
        value = int(value)
    elif isinstance(value, np.floating):
        value = float(value)
    elif isinstance(value, np.ndarray):
        value = value.tolist()
    if value is None:
        parts.append("null")
    elif value is True:
        parts.append("true")
    elif value is False:
        parts.append("false")
    elif isinstance(value, int):
        parts.append(str(value))
    elif isinstance(value, float):
        if math.isnan(value):
            parts.append("NaN")
        elif math.isinf(value):
            parts.append("Infinity" if value > 0 else "-Infinity")
        else:
            parts.append(format(value, ".17g"))
    elif isinstance(value, str):
        parts.append(json.dumps(value))
    elif isinstance(value, dict):
        if not value:
            parts.append("{}")
            return
        parts.append("{\n")
        for i, (key, item) in enumerate(value.items()):
            if not isinstance(key, str):
                raise TypeError(f"report keys must be strings, got {key!r}")
            parts.append(f"{pad}  {json.dumps(key)}: ")
            _emit(item, parts, indent + 1)
            parts.append(",\n" if i < len(value) - 1 else "\n")
        parts.append(pad + "}")
    elif isinstance(value, (list, tuple)):
        if not value:
            parts.append("[]")
            return
        parts.append("[\n")
        for i, item in enumerate(value):
            parts.append(pad + "  ")
            _emit(item, parts, indent + 1)
            parts.append(",\n" if i < len(value) - 1 else "\n")
        parts.append(pad + "]")
    else:
        raise TypeError(f"cannot serialize {type(value).__name__} in a report")


def serialize_report(report: dict) -> str:
    """Render a report dict to its canonical text form."""
    parts: list[str] = []
    _emit(report, parts, 0)
    parts.append("\n")
    return "".join(parts)


def parse_report(text: str) -> dict:
    return json.loads(text)


def write_report(report: dict, path) -> None:
    """Atomic write: serialize to a temp file, then rename into place."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(serialize_report(report))
    os.replace(tmp, path)
