"""Differentiable operations over :class:`~gclab.tensor.Tensor`.

Broadcasting is deliberately narrow: two operands broadcast when they have
the same rank and every axis either matches or is 1 in one of them. A
lower-rank operand is padded with trailing size-1 axes first, and 0-d
scalars broadcast against anything. That covers a ``C x 1 x 1`` context
against a ``C x H x W`` map and nothing more exotic.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, apply, as_tensor


# -- broadcasting helpers ----------------------------------------------------

def _padded(shape: tuple[int, ...], rank: int) -> tuple[int, ...]:
    return tuple(shape) + (1,) * (rank - len(shape))


def broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    rank = max(len(a), len(b))
    pa, pb = _padded(a, rank), _padded(b, rank)
    out = []
    for da, db in zip(pa, pb):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"shapes {a} and {b} are not broadcast-compatible")
        out.append(max(da, db))
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    padded = _padded(shape, g.ndim)
    axes = tuple(i for i, (dg, ds) in enumerate(zip(g.shape, padded)) if ds == 1 and dg != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(op, fn, a: Tensor, b: Tensor, vjp) -> Tensor:
    rank = max(a.ndim, b.ndim)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def forward(x, y):
        return fn(x.reshape(_padded(sa, rank)), y.reshape(_padded(sb, rank)))

    def backward(g, x, y, out):
        ga, gb = vjp(g, x.reshape(_padded(sa, rank)), y.reshape(_padded(sb, rank)))
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    return apply(op, forward, backward, a, b)


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _binary("add", np.add, a, b, lambda g, x, y: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _binary("sub", np.subtract, a, b, lambda g, x, y: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _binary("mul", np.multiply, a, b, lambda g, x, y: (g * y, g * x))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return apply("scale", lambda a: a * c, lambda g, a, out: (g * c,), x)


def relu(x: Tensor) -> Tensor:
    return apply("relu", lambda a: np.maximum(a, 0.0), lambda g, a, out: (g * (a > 0),), x)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    return apply("sigmoid", _sigmoid, lambda g, a, out: (g * out * (1.0 - out),), x)


_ELEMENTWISE = {"relu": relu, "sigmoid": sigmoid, "add": add, "mul": mul, "scale_by_scalar": scale}


def elementwise(kind: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*args)


# -- shape ops ---------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    try:
        np.empty(src).reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} to {shape}") from None
    return apply("reshape", lambda a: a.reshape(shape), lambda g, a, out: (g.reshape(src),), x)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return apply("transpose", lambda a: np.transpose(a, axes),
                 lambda g, a, out: (np.transpose(g, inverse),), x)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def backward(g, a, out):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return apply("sum", lambda a: np.sum(a, axis=axis, keepdims=keepdims), backward, x)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[i] for i in ax]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for rank-2 operands, or rank-3 batches (a rank-2 side is shared)."""
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise ShapeError(f"matmul expects rank 2 or 3 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul batch sizes differ: {a.shape} @ {b.shape}")

    def backward(g, x, y, out):
        ga = g @ np.swapaxes(y, -1, -2)
        gb = np.swapaxes(x, -1, -2) @ g
        if x.ndim == 2 and ga.ndim == 3:
            ga = ga.sum(axis=0)
        if y.ndim == 2 and gb.ndim == 3:
            gb = gb.sum(axis=0)
        return ga, gb

    return apply("matmul", np.matmul, backward, a, b)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")

    def forward(a):
        e = np.exp(a - a.max(axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True)

    def backward(g, a, s):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return apply("softmax", forward, backward, x)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with the biased variance, then apply ``gamma``/``beta``."""
    d = x.shape[-1] if x.ndim else 0
    if d < 1:
        raise ShapeError("layer_norm needs a non-empty last axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"gamma/beta must have shape ({d},), got {gamma.shape}, {beta.shape}")

    def stats(a):
        mu = a.mean(axis=-1, keepdims=True)
        var = ((a - mu) ** 2).mean(axis=-1, keepdims=True)
        rstd = 1.0 / np.sqrt(var + eps)
        return (a - mu) * rstd, rstd

    def forward(a, gm, bt):
        xhat, _ = stats(a)
        return xhat * gm + bt

    def backward(g, a, gm, bt, out):
        xhat, rstd = stats(a)
        lead = tuple(range(a.ndim - 1))
        dxhat = g * gm
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return apply("layer_norm", forward, backward, x, gamma, beta)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation, layout NCHW / OIHW."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIHW weight, got {x.shape}, {w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, weight expects {wcin}")
    if stride < 1 or pad < 0:
        raise ShapeError("conv2d needs stride >= 1 and pad >= 0")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ShapeError("conv2d kernel larger than padded input")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    hp, wp = h + 2 * pad, wd + 2 * pad
    cache: dict = {}

    def im2col(a):
        # rows are output positions, columns (i, j, c) in channels-last order
        if cache.get("a") is a:
            return cache["cols"]
        src = a.transpose(0, 2, 3, 1)
        if pad:
            padded = np.zeros((n, hp, wp, cin))
            padded[:, pad:pad + h, pad:pad + wd] = src
            src = padded
        cols = np.empty((n, ho, wo, kh, kw, cin))
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j] = src[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
        cols = cols.reshape(n * ho * wo, kh * kw * cin)
        cache["a"], cache["cols"] = a, cols
        return cols

    def forward(a, k, *b):
        out = im2col(a) @ k.transpose(0, 2, 3, 1).reshape(cout, -1).T
        if b:
            out = out + b[0]
        return out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def backward(g, a, k, *rest):
        b = rest[:-1]
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = (g2.T @ im2col(a)).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        gcols = (g2 @ k.transpose(0, 2, 3, 1).reshape(cout, -1)).reshape(n, ho, wo, kh, kw, cin)
        gxp = np.zeros((n, hp, wp, cin))
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, :, i, j]
        gx = gxp[:, pad:pad + h, pad:pad + wd].transpose(0, 3, 1, 2)
        if b:
            return gx, gw, g2.sum(axis=0)
        return gx, gw

    inputs = (x, w) if bias is None else (x, w, bias)
    return apply("conv2d", forward, backward, *inputs)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-position channel map: ``x`` is [N, Cin, P], ``w`` is [Cout, Cin].

    This is exactly a 1x1 convolution on the flattened positions.
    """
    y = matmul(w, x)
    if b is not None:
        y = add(y, reshape(b, (1, b.shape[0], 1)))
    return y


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean softmax cross-entropy of [N, K] logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects [N, K] logits and N labels, got {logits.shape}")
    rows = np.arange(labels.shape[0])

    def log_probs(a):
        shifted = a - a.max(axis=1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def forward(a):
        return np.array(-log_probs(a)[rows, labels].mean())

    def backward(g, a, out):
        p = np.exp(log_probs(a))
        p[rows, labels] -= 1.0
        return (g * p / labels.shape[0],)

    return apply("cross_entropy", forward, backward, logits)
