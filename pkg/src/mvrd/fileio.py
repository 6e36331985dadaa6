"""Line-delimited record files with bit-exact float round-trips.

Every dataset/teacher file in this package is UTF-8 text: one JSON header
line followed by one JSON record per line. Floats are serialized with 17
significant digits, which is enough to reproduce any IEEE-754 double exactly
on reload.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    """A data file does not match its declared format."""


def format_float(x: float) -> str:
    return format(float(x), ".17g")


def floats_json(values) -> str:
    """Serialize a 1-D array as a JSON number array at full precision."""
    return "[" + ",".join(format_float(v) for v in np.asarray(values).reshape(-1)) + "]"


def floats2d_json(rows) -> str:
    """Serialize a 2-D array as a JSON array of number arrays at full precision."""
    return "[" + ",".join(floats_json(row) for row in np.asarray(rows)) + "]"


def read_record_lines(path) -> tuple[dict, list[tuple[int, dict]]]:
    """Read header + records; returns (header, [(line_number, record), ...])."""
    path = Path(path)
    header: dict | None = None
    records: list[tuple[int, dict]] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: line {lineno}: invalid record ({exc})") from exc
            if not isinstance(obj, dict):
                raise FormatError(f"{path}: line {lineno}: record is not an object")
            if header is None:
                header = obj
            else:
                records.append((lineno, obj))
    if header is None:
        raise FormatError(f"{path}: missing header line")
    return header, records


def check_format_version(path, header: dict, expected: int = 1) -> None:
    version = header.get("format_version")
    if version != expected:
        raise FormatError(f"{path}: unsupported format_version {version!r} (expected {expected})")
