"""Checkpoint files and CSV metric logs.

Checkpoint layout (all integers little-endian)::

    b"LOGN" | u32 version | u64 step | u64 header length | header JSON (UTF-8)
    then, for each entry of header["arrays"] in order:
    u64 element count | float64 data, row-major

The header carries everything that is not an array: architecture,
array names and shapes, optimiser kind and counters, RNG state, config.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

MAGIC = b"LOGN"
VERSION = 1
_PREFIX = struct.Struct("<4sIQQ")
_COUNT = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


@dataclass
class CheckpointData:
    step: int
    header: dict
    arrays: dict[str, np.ndarray]


def write_checkpoint(path, step: int, header: dict, arrays: dict[str, np.ndarray]) -> Path:
    header = dict(header)
    header["arrays"] = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_PREFIX.pack(MAGIC, VERSION, int(step), len(blob)))
    buf.write(blob)
    for v in arrays.values():
        a = np.ascontiguousarray(v, dtype="<f8")
        buf.write(_COUNT.pack(a.size))
        buf.write(a.tobytes(order="C"))
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


def read_checkpoint(path) -> CheckpointData:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    magic, version, step, hlen = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} is not supported (expected {VERSION})")
    pos = _PREFIX.size
    try:
        header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    pos += hlen
    arrays = {}
    for entry in header.get("arrays", []):
        if pos + _COUNT.size > len(raw):
            raise CheckpointError(f"{path}: truncated before array {entry['name']}")
        (count,) = _COUNT.unpack_from(raw, pos)
        pos += _COUNT.size
        shape = tuple(entry["shape"])
        if count != math.prod(shape) or pos + 8 * count > len(raw):
            raise CheckpointError(f"{path}: array {entry['name']} is corrupt")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return CheckpointData(step, header, arrays)


# -- metric logs --------------------------------------------------------------

def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if not math.isfinite(v):
        raise ValueError(f"refusing to log non-finite value {v}")
    return repr(v)


class CsvLog:
    """Append-only CSV with a fixed header, LF endings and repr() floats."""

    def __init__(self, path, columns, append: bool = False):
        self.path = Path(path)
        self.columns = list(columns)
        fresh = not (append and self.path.exists())
        self._fh = open(self.path, "w" if fresh else "a", newline="", encoding="utf-8")
        self._w = csv.writer(self._fh, lineterminator="\n")
        if fresh:
            self._w.writerow(self.columns)
            self._fh.flush()

    def write(self, row) -> None:
        if not isinstance(row, dict):
            row = {f.name: getattr(row, f.name) for f in fields(row)}
        self._w.writerow([_cell(row.get(c)) for c in self.columns])

    def flush(self) -> None:
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_csv(path) -> tuple[list[str], list[dict[str, float | None]]]:
    """Strict reader: every cell must be empty or a plain float literal."""
    text = Path(path).read_bytes().decode("utf-8")
    if "\r" in text:
        raise ValueError(f"{path}: CR line endings")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ValueError(f"{path}: missing header")
    header, out = rows[0], []
    for n, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise ValueError(f"{path}:{n}: expected {len(header)} cells, got {len(r)}")
        rec = {}
        for k, cell in zip(header, r):
            if cell == "":
                rec[k] = None
                continue
            if "," in cell or not math.isfinite(val := float(cell)):
                raise ValueError(f"{path}:{n}: bad number {cell!r}")
            rec[k] = val
        out.append(rec)
    return header, out


def truncate_csv(path, max_step: int) -> None:
    """Drop rows whose ``step`` exceeds ``max_step`` (used when resuming)."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").split("\n")
    head, body = lines[0], [ln for ln in lines[1:] if ln]
    keep = [ln for ln in body if int(ln.split(",", 1)[0]) <= max_step]
    path.write_text("\n".join([head, *keep]) + "\n", encoding="utf-8")
