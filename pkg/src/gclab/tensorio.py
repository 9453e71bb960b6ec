"""Plain-text tensor files.

Line 1 is ``tensor v1 <rank> <d0> ... <dk>``; the rest is whitespace-separated
decimal floats in row-major order.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import TensorFormatError
from .tensor import Tensor

MAGIC = ("tensor", "v1")


def format_tensor(t: Tensor, per_line: int = 8) -> str:
    dims = " ".join(str(d) for d in t.shape)
    lines = [f"tensor v1 {t.ndim} {dims}".rstrip()]
    flat = t.data.reshape(-1)
    for start in range(0, flat.size, per_line):
        lines.append(" ".join(format(float(v), ".17g") for v in flat[start:start + per_line]))
    return "\n".join(lines) + "\n"


def parse_tensor(text: str) -> Tensor:
    lines = text.splitlines()
    if not lines:
        raise TensorFormatError("empty input", line=1)
    head = lines[0].split()
    if tuple(head[:2]) != MAGIC:
        raise TensorFormatError(f"expected header 'tensor v1', got {lines[0][:40]!r}", line=1)
    try:
        rank = int(head[2])
        dims = [int(d) for d in head[3:]]
    except (IndexError, ValueError):
        raise TensorFormatError("malformed rank or dimensions", line=1) from None
    if len(dims) != rank or any(d <= 0 for d in dims):
        raise TensorFormatError(f"header declares rank {rank} but dims {dims}", line=1)
    values: list[float] = []
    for lineno, line in enumerate(lines[1:], start=2):
        for tok in line.split():
            try:
                values.append(float(tok))
            except ValueError:
                raise TensorFormatError(f"bad number {tok!r}", line=lineno) from None
    expected = int(np.prod(dims, dtype=np.int64)) if dims else 1
    if len(values) != expected:
        raise TensorFormatError(f"expected {expected} values, found {len(values)}", line=len(lines))
    return Tensor(np.array(values, dtype=np.float64).reshape(dims))


def read_tensor(path: str | os.PathLike) -> Tensor:
    with open(path, encoding="utf-8") as fh:
        return parse_tensor(fh.read())


def write_tensor(t: Tensor, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_tensor(t))
