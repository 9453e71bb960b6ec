"""Attention degeneracy statistics and heatmap export.

The distance between two position vectors is ``(1 - cos(u, v)) / 2``.
``avg_dist`` averages it over all ordered pairs, the diagonal included.
Zero vectors are handled totally: two zero vectors have cosine 1, and a
zero vector against a nonzero one has cosine 0.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import blocks, rng
from .blocks import PROBES, BlockParams, BlockSpec, ProbeTrace
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor, rng_tensor


def _pow2_normalise(rows: np.ndarray) -> np.ndarray:
    # exact power-of-two rescale per row so squared norms neither under- nor overflow
    if rows.shape[-1] == 0:
        return rows
    peak = np.abs(rows).max(axis=-1, keepdims=True)
    _, exp = np.frexp(np.where(peak == 0.0, 1.0, peak))
    return np.ldexp(rows, -exp)


def cosine_distance(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ShapeError(f"length mismatch: {u.size} vs {v.size}")
    u, v = _pow2_normalise(u), _pow2_normalise(v)
    nu, nv = float(u @ u), float(v @ v)
    if nu == 0.0 and nv == 0.0:
        cos = 1.0
    elif nu == 0.0 or nv == 0.0:
        cos = 0.0
    else:
        # sqrt(nu * nv) keeps dist(v, v) exactly 0
        cos = min(1.0, max(-1.0, float(u @ v) / np.sqrt(nu * nv)))
    return (1.0 - cos) / 2.0


def cosine_matrix(vectors) -> np.ndarray:
    """Pairwise cosine over the rows of ``vectors`` ([Np, d]) from one Gram matrix."""
    v = _pow2_normalise(np.asarray(vectors, dtype=np.float64))
    gram = v @ v.T
    sq = np.diag(gram).copy()
    zero = sq == 0.0
    safe = np.where(zero, 1.0, sq)
    cos = gram / np.sqrt(np.outer(safe, safe))
    cos[zero, :] = 0.0
    cos[:, zero] = 0.0
    cos[np.ix_(zero, zero)] = 1.0
    return np.clip(cos, -1.0, 1.0)


def avg_dist(vectors) -> float:
    """Mean cosine distance over all Np^2 ordered pairs of rows."""
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    if v.shape[0] == 0:
        raise ContractError("avg_dist needs at least one vector")
    return float(((1.0 - cosine_matrix(v)) / 2.0).mean())


# -- probe statistics --------------------------------------------------------

@dataclass
class StatsRow:
    block: str
    variant: str
    probe: str
    avg_dist: float | None  # None: probe undefined for this block

    @property
    def absent(self) -> bool:
        return self.avg_dist is None


@dataclass
class StatsReport:
    rows: list[StatsRow]
    np: int
    c: int
    seed: int
    meta: dict = field(default_factory=dict)

    def value(self, probe: str) -> float | None:
        for row in self.rows:
            if row.probe == probe:
                return row.avg_dist
        raise KeyError(probe)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["block", "variant", "probe", "avg_dist", "np", "c", "seed"])
        for row in self.rows:
            val = "absent" if row.absent else format(row.avg_dist, ".12g")
            writer.writerow([row.block, row.variant, row.probe, val, self.np, self.c, self.seed])
        return buf.getvalue()


def probe_vectors(trace: ProbeTrace, probe: str, sample: int = 0) -> np.ndarray | None:
    """Per-position vectors ([Np, d]) for one sample of a trace, or None if absent."""
    value = trace.get(probe)
    if value is None:
        return None
    if probe == "att":
        return value.rows(sample)
    if probe == "prod":
        return value[sample]
    # [N, d, Np] captures: the position is the last axis
    return value[sample].T


def probe_stats(spec: BlockSpec, seed: int, input: Tensor | None = None,
                dims: Sequence[int] | None = None, probes: Sequence[str] = PROBES,
                params: BlockParams | None = None) -> StatsReport:
    """One forward pass and avg_dist of every requested probe.

    Without ``input`` a standard-normal tensor of ``dims`` (default
    [1, C, 6, 6]) is drawn from ``seed``. Parameters default to
    ``build_block(spec, seed)``. For batches the per-sample values are averaged.
    """
    for p in probes:
        if p not in PROBES:
            raise ConfigError(f"unknown probe {p!r}")
    if params is None:
        params = blocks.build_block(spec, seed)
    if input is None:
        dims = tuple(dims) if dims is not None else (1, spec.channels, 6, 6)
        input = rng_tensor(rng.derive_seed(seed, "input"), dims, "normal")
    _, trace = blocks.forward(params, input)
    n = input.shape[0]
    rows = []
    for probe in probes:
        per_sample = [probe_vectors(trace, probe, s) for s in range(n)]
        if per_sample[0] is None:
            value = None
        else:
            value = float(np.mean([avg_dist(v) for v in per_sample]))
        rows.append(StatsRow(spec.kind, spec.variant or "-", probe, value))
    npos = input.shape[2] * input.shape[3]
    return StatsReport(rows, npos, spec.channels, seed)


# -- heatmaps ----------------------------------------------------------------

def _to_gray(grid: np.ndarray) -> np.ndarray:
    lo, hi = grid.min(), grid.max()
    if hi == lo:
        return np.zeros(grid.shape, dtype=np.int64)
    return np.rint((grid - lo) / (hi - lo) * 255.0).astype(np.int64)


def export_heatmap(values, dims: tuple[int, int], path: str | os.PathLike) -> tuple[Path, Path]:
    """Write one attention row as ``<path>.csv`` (raw) and ``<path>.pgm`` (P2, 0-255).

    A constant map becomes all zeros in the PGM.
    """
    h, w = dims
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size != h * w:
        raise ShapeError(f"map has {values.size} values, expected {h}x{w}={h * w}")
    grid = values.reshape(h, w)
    base = Path(path)
    if base.suffix in (".csv", ".pgm"):
        base = base.with_suffix("")
    csv_path, pgm_path = base.with_suffix(".csv"), base.with_suffix(".pgm")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        for row in grid:
            fh.write(",".join(format(float(v), ".17g") for v in row) + "\n")
    gray = _to_gray(grid)
    with open(pgm_path, "w", encoding="ascii", newline="") as fh:
        fh.write(f"P2\n{w} {h}\n255\n")
        for row in gray:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")
    return csv_path, pgm_path


def read_heatmap_csv(path: str | os.PathLike) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        return np.array([[float(v) for v in line.split(",")] for line in fh if line.strip()])


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, encoding="ascii") as fh:
        tokens = fh.read().split()
    if tokens[0] != "P2":
        raise ValueError(f"not a P2 PGM: {tokens[0]!r}")
    w, h = int(tokens[1]), int(tokens[2])
    return np.array([int(t) for t in tokens[4:4 + w * h]]).reshape(h, w)
