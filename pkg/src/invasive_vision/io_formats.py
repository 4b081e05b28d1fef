"""Readers and writers for images, descriptors, load traces, configs and reports.

Readers reject malformed input instead of repairing it.  Each failure mode
has its own exception class so callers and tests can tell them apart.

Formats
-------
PGM
    Binary ``P5`` with ``maxval`` 255; ``#`` comments allowed in the header.
Descriptor CSV
    Header ``id,v0,...,v127`` then one row per descriptor.
Descriptor binary
    8-byte magic ``IVDESC\\0\\0``, 1 version byte (1), little-endian uint64
    record count, then per record an int64 id and 128 float64 values.
Load trace CSV
    Header ``time_ms,busy_pes``; integer rows with strictly increasing times.
Reports
    CSV with numbers written to 9 significant digits.
"""

from __future__ import annotations

import csv
import io
import struct
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import yaml

from .kdtree import DIM, DescriptorSet, Match
from .runtime import LoadTrace

DESC_MAGIC = b"IVDESC\x00\x00"
DESC_VERSION = 1
_DESC_HEADER = struct.Struct("<8sBQ")
_RECORD = np.dtype([("id", "<i8"), ("v", "<f8", (DIM,))])


class FormatError(ValueError):
    """Base class for malformed input."""


class TruncatedError(FormatError):
    pass


class BadMagicError(FormatError):
    pass


class MaxvalError(FormatError):
    pass


class HeaderError(FormatError):
    pass


class ComponentCountError(FormatError):
    pass


class NonFiniteError(FormatError):
    pass


class DuplicateIdError(FormatError):
    pass


class MonotonicityError(FormatError):
    pass


class NegativeCountError(FormatError):
    pass


def fmt(x: float) -> str:
    return f"{x:.9g}"


# ---------------------------------------------------------------- PGM


def _pgm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    i, n = 0, len(data)
    while len(tokens) < count:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i < n and data[i : i + 1] == b"#":
            while i < n and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        if i >= n:
            raise TruncatedError("PGM header ended early")
        start = i
        while i < n and not data[i : i + 1].isspace() and data[i : i + 1] != b"#":
            i += 1
        tokens.append(data[start:i])
    # exactly one whitespace byte separates the header from the raster
    if i >= n or not data[i : i + 1].isspace():
        raise TruncatedError("PGM header is not followed by pixel data")
    return tokens, i + 1


def read_pgm(data: bytes) -> np.ndarray:
    if data[:2] != b"P5":
        raise BadMagicError(f"expected P5 magic, got {data[:2]!r}")
    tokens, offset = _pgm_tokens(data, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError as exc:
        raise HeaderError(f"non-numeric PGM header field: {exc}") from None
    if width < 1 or height < 1:
        raise HeaderError(f"bad PGM size {width}x{height}")
    if maxval != 255:
        raise MaxvalError(f"only maxval 255 is supported, got {maxval}")
    raster = data[offset : offset + width * height]
    if len(raster) < width * height:
        raise TruncatedError(f"PGM raster has {len(raster)} of {width * height} bytes")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width).copy()


def write_pgm(img) -> bytes:
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError("PGM holds a single 2-D grayscale plane")
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError("PGM pixels must lie in [0, 255]")
    h, w = arr.shape
    return f"P5\n{w} {h}\n255\n".encode() + arr.astype(np.uint8).tobytes()


# ---------------------------------------------------------------- descriptors


def _validated(ids: Sequence[int], values: np.ndarray) -> DescriptorSet:
    if len(set(ids)) != len(ids):
        seen, dup = set(), None
        for i in ids:
            if i in seen:
                dup = i
                break
            seen.add(i)
        raise DuplicateIdError(f"duplicate descriptor id {dup}")
    if values.size and not np.all(np.isfinite(values)):
        raise NonFiniteError("descriptor values must be finite")
    return DescriptorSet(np.asarray(ids, dtype=np.int64), values.reshape(-1, DIM))


def read_descriptors(data: bytes, format: str = "csv") -> DescriptorSet:
    if format == "csv":
        return _read_descriptors_csv(data)
    if format == "binary":
        return _read_descriptors_bin(data)
    raise ValueError(f"unknown descriptor format {format!r}")


def _read_descriptors_csv(data: bytes) -> DescriptorSet:
    rows = [r for r in csv.reader(io.StringIO(data.decode("ascii"))) if r]
    if rows and rows[0] and rows[0][0].strip() == "id":
        if len(rows[0]) != DIM + 1:
            raise ComponentCountError(f"header names {len(rows[0]) - 1} components")
        rows = rows[1:]
    ids, values = [], []
    for lineno, row in enumerate(rows, start=2):
        if len(row) != DIM + 1:
            raise ComponentCountError(f"row {lineno}: {len(row) - 1} components, need {DIM}")
        try:
            ids.append(int(row[0]))
            values.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise FormatError(f"row {lineno}: {exc}") from None
    arr = np.array(values, dtype=np.float64).reshape(-1, DIM)
    return _validated(ids, arr)


def _read_descriptors_bin(data: bytes) -> DescriptorSet:
    if len(data) == 0:
        return DescriptorSet(np.zeros(0, np.int64), np.zeros((0, DIM)))
    if len(data) < _DESC_HEADER.size:
        raise TruncatedError("descriptor header is incomplete")
    magic, version, count = _DESC_HEADER.unpack_from(data)
    if magic != DESC_MAGIC:
        raise BadMagicError(f"bad descriptor magic {magic!r}")
    if version != DESC_VERSION:
        raise HeaderError(f"unsupported descriptor format version {version}")
    body = data[_DESC_HEADER.size :]
    if len(body) != count * _RECORD.itemsize:
        raise TruncatedError(
            f"expected {count} records ({count * _RECORD.itemsize} bytes), got {len(body)} bytes"
        )
    rec = np.frombuffer(body, dtype=_RECORD, count=count)
    return _validated(rec["id"].tolist(), rec["v"].astype(np.float64))


def write_descriptors(ds: DescriptorSet, format: str = "csv") -> bytes:
    if format == "csv":
        out = io.StringIO()
        out.write(",".join(["id"] + [f"v{i}" for i in range(DIM)]) + "\n")
        for i, row in zip(ds.ids.tolist(), ds.values.tolist()):
            out.write(str(i) + "," + ",".join(fmt(v) for v in row) + "\n")
        return out.getvalue().encode("ascii")
    if format == "binary":
        rec = np.empty(len(ds), dtype=_RECORD)
        rec["id"] = ds.ids
        rec["v"] = ds.values
        return _DESC_HEADER.pack(DESC_MAGIC, DESC_VERSION, len(ds)) + rec.tobytes()
    raise ValueError(f"unknown descriptor format {format!r}")


# ---------------------------------------------------------------- load traces


def read_load_trace(data: bytes, duration_ms: Optional[int] = None) -> LoadTrace:
    rows = [r for r in csv.reader(io.StringIO(data.decode("ascii"))) if r]
    if not rows or [c.strip() for c in rows[0]] != ["time_ms", "busy_pes"]:
        raise HeaderError("load trace must start with header 'time_ms,busy_pes'")
    entries = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise FormatError(f"row {lineno}: expected 2 fields")
        try:
            t, b = int(row[0]), int(row[1])
        except ValueError as exc:
            raise FormatError(f"row {lineno}: {exc}") from None
        if b < 0:
            raise NegativeCountError(f"row {lineno}: negative busy count {b}")
        if entries and t <= entries[-1][0]:
            raise MonotonicityError(f"row {lineno}: time {t} does not increase")
        entries.append((t, b))
    if not entries:
        raise FormatError("load trace has no entries")
    return LoadTrace(tuple(entries), duration_ms)


def write_load_trace(trace: LoadTrace) -> bytes:
    lines = ["time_ms,busy_pes"] + [f"{t},{b}" for t, b in trace.entries]
    return ("\n".join(lines) + "\n").encode("ascii")


# ---------------------------------------------------------------- config & reports


def read_config(data: bytes) -> dict:
    cfg = yaml.safe_load(data.decode("utf-8"))
    if cfg is None:
        return {}
    if not isinstance(cfg, Mapping):
        raise FormatError("config must be a mapping of keys to values")
    return dict(cfg)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    out = io.StringIO()
    out.write(",".join(header) + "\n")
    for row in rows:
        out.write(",".join(fmt(v) if isinstance(v, float) else str(v) for v in row) + "\n")
    return out.getvalue()


def corners_csv(frames: Iterable[tuple[int, Sequence]]) -> str:
    return csv_text(
        ("frame", "x", "y", "response"),
        ((f, c.x, c.y, float(c.response)) for f, cs in frames for c in cs),
    )


def matches_csv(matches: Iterable[Match]) -> str:
    return csv_text(
        ("query_id", "tree_id", "sq_distance"),
        ((m.query_id, m.tree_id, float(m.sq_distance)) for m in matches),
    )

