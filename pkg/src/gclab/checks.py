"""Verification suites shared by the command line and the acceptance tests.

Each suite returns :class:`CheckResult` rows: a measured value, the bound it
must stay under, and whether it did.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import analysis, blocks, ops, rng
from .blocks import BlockSpec
from .gradcheck import grad_check
from .tensor import Tensor, rng_tensor


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value < self.tol)


def worst(results: list[CheckResult]) -> CheckResult:
    """The result furthest from its bound (relative to tol)."""
    return max(results, key=lambda r: (not r.passed, r.value / r.tol))


# -- gradients -----------------------------------------------------------------

OpCase = tuple[list[int], Callable[[Tensor, int], Tensor]]

OP_CASES: dict[str, OpCase] = {
    "matmul": ([3, 4], lambda x, s: ops.matmul(x, rng_tensor(s, [4, 2], "normal"))),
    "matmul_batched": ([2, 3, 4], lambda x, s: ops.matmul(rng_tensor(s, [5, 3], "normal"), x)),
    "softmax": ([3, 5], lambda x, s: ops.softmax(x, -1)),
    "softmax_axis0": ([3, 5], lambda x, s: ops.softmax(x, 0)),
    "layer_norm": ([4, 6], lambda x, s: ops.layer_norm(
        x, rng_tensor(s, [6], "normal"), rng_tensor(s + 1, [6], "normal"))),
    "conv2d": ([1, 2, 5, 5], lambda x, s: ops.conv2d(
        x, rng_tensor(s, [3, 2, 3, 3], "normal"), rng_tensor(s + 1, [3], "normal"), 2, 1)),
    "relu": ([4, 5], lambda x, s: ops.relu(x)),
    "sigmoid": ([4, 5], lambda x, s: ops.sigmoid(x)),
    "add_broadcast": ([3, 2, 2], lambda x, s: ops.add(x, ops.mean(x, axis=(1, 2), keepdims=True))),
    "mul_broadcast": ([3, 2, 2], lambda x, s: ops.mul(x, rng_tensor(s, [3, 1, 1], "normal"))),
    "scale": ([3, 3], lambda x, s: ops.scale(x, -1.7)),
    "transpose_reshape": ([2, 3, 4], lambda x, s: ops.reshape(ops.transpose(x, (2, 0, 1)), (4, 6))),
    "cross_entropy": ([5, 4], lambda x, s: ops.cross_entropy(x, [0, 3, 1, 1, 2])),
}

# One spec per block family, sized so every bottleneck has >= 4 hidden units
# (LayerNorm over two units is sign-only and has vanishing gradients).
BLOCK_CASES: dict[str, BlockSpec] = {
    "nl/gaussian": BlockSpec("nl", 8, variant="gaussian"),
    "nl/e-gaussian": BlockSpec("nl", 8, variant="e-gaussian"),
    "nl/dot": BlockSpec("nl", 8, variant="dot"),
    "nl/concat": BlockSpec("nl", 8, variant="concat"),
    "snl/pre": BlockSpec("snl", 8, snl_form="pre_distributive"),
    "snl/post": BlockSpec("snl", 8),
    "gc": blocks.gc_spec(8, r=2),
    "se": blocks.se_spec(8, r=2),
    "framework/avg+add": BlockSpec("framework", 8, bottleneck_ratio=2, pooling="avg"),
    "framework/att+scale": BlockSpec("framework", 8, bottleneck_ratio=2, fusion="scale",
                                     transform="bottleneck_sigmoid"),
    "framework/att+linear": BlockSpec("framework", 8, transform="single_linear"),
}

# Biases that shift every softmax logit equally have an identically zero
# gradient; a relative check there compares rounding noise with itself.
_SHIFT_ONLY = "key.bias"


def _weighted_sum(y: Tensor, seed: int) -> Tensor:
    w = rng_tensor(rng.derive_seed(seed, "w"), y.shape, "normal")
    return ops.sum(ops.mul(y, w))


def op_gradient_error(name: str, seed: int) -> float:
    shape, fn = OP_CASES[name]
    x = rng_tensor(seed, shape, "normal")

    def f(t):
        y = fn(t, seed + 100)
        return y if y.size == 1 else _weighted_sum(y, seed)

    return grad_check(f, x)


def block_gradient_error(spec: BlockSpec, seed: int, dims=(1, 8, 2, 3)) -> float:
    """Worst relative error over the input and every parameter tensor."""
    p = blocks.random_params(spec, seed)
    x = rng_tensor(rng.derive_seed(seed, "x"), dims, "normal")
    errs = [grad_check(lambda t: _weighted_sum(blocks.forward(p, t)[0], seed), x)]
    shift_only = spec.kind != "nl" or spec.variant in ("gaussian", "e-gaussian")
    for name in p:
        if name == _SHIFT_ONLY and shift_only:
            continue
        f = lambda t, name=name: _weighted_sum(blocks.forward(p.with_tensors(**{name: t}), x)[0], seed)
        errs.append(grad_check(f, p[name]))
    return max(errs)


def gradient_suite(seeds: int = 10, tol: float = 1e-5, which: str = "all") -> list[CheckResult]:
    out = []
    if which in ("all", "ops"):
        for name in OP_CASES:
            err = max(op_gradient_error(name, s) for s in range(seeds))
            out.append(CheckResult(f"op:{name}", err, tol))
    if which in ("all", "blocks"):
        for name, spec in BLOCK_CASES.items():
            err = max(block_gradient_error(spec, s) for s in range(seeds))
            out.append(CheckResult(f"block:{name}", err, tol))
    return out


# -- equivalences --------------------------------------------------------------

def snl_distributive(trials: int = 100, seed: int = 0, tol: float = 1e-10) -> CheckResult:
    """Max |pre - post| over random channel counts 4..32 and sizes 2..8."""
    worst_diff = 0.0
    for t in range(trials):
        u = rng.uniform01(rng.derive_seed(seed, "snl-config", t), 3)
        c = 4 + int(u[0] * 29)
        h, w = 2 + int(u[1] * 7), 2 + int(u[2] * 7)
        spec = BlockSpec("snl", c)
        p = blocks.random_params(spec, rng.derive_seed(seed, "snl-params", t))
        x = rng_tensor(rng.derive_seed(seed, "snl-x", t), (1, c, h, w), "normal")
        pre, _ = blocks.snl_forward(p, x, "pre_distributive")
        post, _ = blocks.snl_forward(p, x, "post_distributive")
        worst_diff = max(worst_diff, float(np.max(np.abs(pre.data - post.data))))
    return CheckResult("snl-distributive", worst_diff, tol)


def framework_subsumption(kind: str, seeds: int = 20, tol: float = 1e-12,
                          channels: int = 16, r: int = 4) -> CheckResult:
    spec = blocks.gc_spec(channels, r) if kind == "gc" else blocks.se_spec(channels, r)
    fw = blocks.framework_equivalent(spec)
    worst_diff = 0.0
    for s in range(seeds):
        p = blocks.random_params(spec, s)
        x = rng_tensor(rng.derive_seed(s, "x"), (2, channels, 4, 3), "normal")
        direct, _ = blocks.forward(p, x)
        via, _ = blocks.framework_forward(p.retarget(fw), x)
        worst_diff = max(worst_diff, float(np.max(np.abs(direct.data - via.data))))
    return CheckResult(f"{kind}-framework", worst_diff, tol)


EQUIV_CHECKS = ("snl-distributive", "gc-framework", "se-framework")


def run_equivalence(check: str, seed: int = 0) -> list[CheckResult]:
    if check == "all":
        return [r for c in EQUIV_CHECKS for r in run_equivalence(c, seed)]
    if check == "snl-distributive":
        return [snl_distributive(seed=seed)]
    if check in ("gc-framework", "se-framework"):
        return [framework_subsumption(check.split("-")[0])]
    raise ValueError(f"unknown check {check!r}")


# -- degeneracy ----------------------------------------------------------------

def degeneracy(seeds: int = 5, tol: float = 1e-12) -> list[CheckResult]:
    """avg_dist of att and output: zero for global blocks on any input, and
    for embedded-Gaussian nl on constant-position input."""
    out = []
    for kind, spec in (("snl", BlockSpec("snl", 8)), ("gc", blocks.gc_spec(8, r=2))):
        for probe in ("att", "output"):
            vals = []
            for s in range(seeds):
                p = blocks.random_params(spec, s)
                vals.append(analysis.probe_stats(spec, s, params=p, probes=(probe,)).value(probe))
            out.append(CheckResult(f"{kind}:{probe}", max(abs(v) for v in vals), tol))
    spec = BlockSpec("nl", 8)
    for probe in ("att", "output"):
        vals = []
        for s in range(seeds):
            v = rng.sample(rng.derive_seed(s, "const"), (8,), "normal")
            x = Tensor(np.broadcast_to(v[None, :, None, None], (1, 8, 6, 6)).copy())
            p = blocks.random_params(spec, s)
            vals.append(analysis.probe_stats(spec, s, input=x, params=p, probes=(probe,)).value(probe))
        out.append(CheckResult(f"nl/e-gaussian-const:{probe}", max(abs(v) for v in vals), tol))
    return out
