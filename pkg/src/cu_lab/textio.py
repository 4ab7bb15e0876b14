"""Line-delimited JSON container used for datasets and checkpoints.

Line 1 is a JSON header object; every further line is one JSON record.
Floats are written with Python's shortest round-trip repr, so loading a
saved file reproduces every array bit for bit.
"""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ParseError


def encode_array(a: np.ndarray) -> list[float]:
    return np.asarray(a, dtype=np.float64).reshape(-1).tolist()


def write_lines(path, header: dict, records) -> None:
    """Write to a temporary sibling and rename, so a crash never leaves a
    half-written file under the final name."""
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, allow_nan=False, separators=(",", ":")) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, allow_nan=False, separators=(",", ":")) + "\n")
    os.replace(tmp, path)


def read_lines(path) -> tuple[dict, Iterator[tuple[int, dict]]]:
    """Return the header and an iterator of ``(line_number, record)``."""
    path = Path(path)
    fh = open(path, encoding="utf-8")
    first = fh.readline()
    if not first:
        fh.close()
        raise ParseError(f"{path}: empty file, expected a header on line 1")
    try:
        header = json.loads(first)
    except json.JSONDecodeError as exc:
        fh.close()
        raise ParseError(f"{path}: line 1: malformed header ({exc.msg})") from None
    if not isinstance(header, dict):
        fh.close()
        raise ParseError(f"{path}: line 1: header must be a JSON object")

    def records():
        with fh:
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                if not line.endswith("\n"):
                    raise ParseError(f"{path}: line {lineno}: truncated record (no line terminator)")
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(f"{path}: line {lineno}: malformed record ({exc.msg})") from None
                if not isinstance(rec, dict):
                    raise ParseError(f"{path}: line {lineno}: record must be a JSON object")
                yield lineno, rec

    return header, records()
