"""Counter-based SplitMix64 generator.

Element ``k`` of the stream for ``seed`` is ``mix64(key + (k + 1) * GAMMA)``
where ``key = mix64(seed ^ SEED_SALT)`` and ``mix64`` is the SplitMix64
finalizer::

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

All arithmetic is modulo 2**64, so the raw integer stream is identical on
every platform. Uniform doubles take the top 53 bits (``(u >> 11) * 2**-53``).
Normals use Box-Muller on consecutive pairs ``(u[2i], u[2i+1])`` and keep the
cosine branch only.
"""

from __future__ import annotations

import zlib
from typing import Sequence

import numpy as np

from .errors import ShapeError

GAMMA = np.uint64(0x9E3779B97F4A7C15)
SEED_SALT = 0x5851F42D4C957F2D
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def mix64(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def _key(seed: int) -> np.uint64:
    return mix64(np.uint64((int(seed) ^ SEED_SALT) & _MASK))[()]


def raw_stream(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """``n`` raw 64-bit outputs starting at counter ``offset``."""
    counters = np.arange(offset + 1, offset + n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return mix64(_key(seed) + counters * GAMMA)


def uniform01(seed: int, n: int) -> np.ndarray:
    return (raw_stream(seed, n) >> np.uint64(11)).astype(np.float64) * 2.0**-53


def derive_seed(seed: int, *keys: int | str) -> int:
    """Child seed for a named or indexed sub-stream."""
    state = int(seed) & _MASK
    for k in keys:
        if isinstance(k, str):
            k = zlib.crc32(k.encode("utf-8"))
        state = int(mix64(np.uint64((state * 0x100000001B3 + int(k) + 1) & _MASK)))
    return state


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if any(d <= 0 for d in shape):
        raise ShapeError(f"all dimensions must be positive, got {shape}")
    return shape


def sample(seed: int, shape: Sequence[int], dist: str = "uniform", **kw) -> np.ndarray:
    """Raw float64 array for ``dist`` in {uniform, normal, kaiming}.

    ``uniform`` takes ``a``/``b`` (default 0, 1); ``normal`` takes
    ``mu``/``sigma`` (default 0, 1); ``kaiming`` takes ``fan_in`` and draws
    from U(-sqrt(6/fan_in), sqrt(6/fan_in)).
    """
    shape = _check_shape(shape)
    n = int(np.prod(shape, dtype=np.int64))
    if dist == "uniform":
        a, b = float(kw.get("a", 0.0)), float(kw.get("b", 1.0))
        out = a + (b - a) * uniform01(seed, n)
    elif dist == "normal":
        mu, sigma = float(kw.get("mu", 0.0)), float(kw.get("sigma", 1.0))
        u = uniform01(seed, 2 * n)
        radius = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        out = mu + sigma * radius * np.cos(2.0 * np.pi * u[1::2])
    elif dist == "kaiming":
        fan_in = kw.get("fan_in")
        if fan_in is None or fan_in <= 0:
            raise ShapeError(f"kaiming requires fan_in > 0, got {fan_in}")
        bound = np.sqrt(6.0 / fan_in)
        out = -bound + 2.0 * bound * uniform01(seed, n)
    else:
        raise ValueError(f"unknown distribution {dist!r}")
    return out.reshape(shape)
