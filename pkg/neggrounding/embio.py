"""Embedding file codecs.

Binary blocks: magic ``EMB1``, u32 n, u32 d, then n*d little-endian float32
values row-major. A file may hold any number of blocks back to back. The
JSONL form carries one ``{"caption": ..., "embeddings": [[...], ...]}`` per
line.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, TextIO

import numpy as np

from .errors import FormatError

MAGIC = b"EMB1"
_HEADER = struct.Struct("<4sII")


def write_block(stream: BinaryIO, matrix) -> None:
    rows = np.asarray(matrix, dtype="<f4")
    if rows.ndim != 2:
        raise FormatError(f"EMB1 blocks hold 2-D matrices, got shape {rows.shape}")
    stream.write(_HEADER.pack(MAGIC, rows.shape[0], rows.shape[1]))
    stream.write(np.ascontiguousarray(rows).tobytes())


def read_block(stream: BinaryIO) -> np.ndarray | None:
    """Read one block, or None at a clean end of file."""
    header = stream.read(_HEADER.size)
    if not header:
        return None
    if len(header) < _HEADER.size:
        raise FormatError("truncated EMB1 header")
    magic, n, d = _HEADER.unpack(header)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    payload = stream.read(4 * n * d)
    if len(payload) != 4 * n * d:
        raise FormatError(f"truncated EMB1 payload: wanted {n}x{d} floats")
    return np.frombuffer(payload, dtype="<f4").reshape(n, d)


def iter_blocks(stream: BinaryIO) -> Iterator[np.ndarray]:
    while (block := read_block(stream)) is not None:
        yield block


def is_binary(path: str | Path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(4) == MAGIC


def iter_jsonl(lines: Iterable[str]) -> Iterator[tuple[str, np.ndarray]]:
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            caption = record["caption"]
            rows = np.asarray(record["embeddings"], dtype=np.float64)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise FormatError(f"line {lineno}: {e}") from e
        yield caption, rows


def write_jsonl(stream: TextIO, caption: str, payload: dict) -> None:
    stream.write(json.dumps({"caption": caption, **payload}) + "\n")
