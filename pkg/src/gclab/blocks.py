"""Context blocks: non-local (four pairwise functions), simplified non-local,
the pooling/transform/fusion framework, global context and squeeze-excitation.

Every forward takes an NCHW tensor and returns ``(z, trace)`` where ``trace``
captures the analysis probes. Positions are flattened row-major over (H, W)
and attention matrices are indexed ``[query, key]``.

Parameter names are shared across kinds so one :class:`BlockParams` can be
fed to two different forward paths:

=================  ==============  =========================================
name               shape           used by
=================  ==============  =========================================
query.weight/bias  [h, C] / [h]    nl e-gaussian, dot
query.weight/bias  [1, 2C] / [1]   nl concat
key.weight/bias    [h, C] / [h]    nl e-gaussian, dot
key.weight/bias    [1, C] / [1]    snl, gc, framework pooling=att
value.weight/bias  [h, C] / [h]    nl (all variants)
value.weight/bias  [C, C] / [C]    snl, framework transform=single_linear
out.weight/bias    [C, h] / [C]    nl (W_z)
v1.weight/bias     [C/r, C]        gc, se, framework bottleneck transforms
ln.gamma/beta      [C/r]           gc, framework bottleneck_ln_relu
v2.weight/bias     [C, C/r]        gc, se, framework bottleneck transforms
=================  ==============  =========================================
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterator

import numpy as np

from . import ops
from . import rng
from .errors import ConfigError, ConstructionError, ShapeError
from .tensor import Tensor

KINDS = ("nl", "snl", "gc", "se", "framework")
NL_VARIANTS = ("gaussian", "e-gaussian", "dot", "concat")
POOLINGS = ("att", "avg")
FUSIONS = ("add", "scale")
TRANSFORMS = ("bottleneck_ln_relu", "bottleneck_sigmoid", "single_linear", "none")
SNL_FORMS = ("pre_distributive", "post_distributive")
PROBES = ("input", "key", "query", "prod", "att", "output")

LN_EPS = 1e-5


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    channels: int
    variant: str | None = None
    hidden_ratio: int = 2
    bottleneck_ratio: int = 16
    pooling: str = "att"
    fusion: str = "add"
    transform: str = "bottleneck_ln_relu"
    snl_form: str = "post_distributive"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown block kind {self.kind!r}")
        if self.channels < 1:
            raise ConstructionError(f"channels must be positive, got {self.channels}")
        if self.kind == "nl":
            if self.variant is None:
                object.__setattr__(self, "variant", "e-gaussian")
            if self.variant not in NL_VARIANTS:
                raise ConfigError(f"unknown non-local variant {self.variant!r}")
            if self.hidden_ratio < 1 or self.channels % self.hidden_ratio:
                raise ConstructionError(
                    f"channels {self.channels} not divisible by hidden_ratio {self.hidden_ratio}")
        elif self.variant is not None:
            raise ConfigError(f"variant only applies to nl blocks, got {self.variant!r} for {self.kind}")
        if self.snl_form not in SNL_FORMS:
            raise ConfigError(f"unknown snl_form {self.snl_form!r}")
        if self.kind == "framework":
            if self.pooling not in POOLINGS:
                raise ConfigError(f"unknown pooling {self.pooling!r}")
            if self.fusion not in FUSIONS:
                raise ConfigError(f"unknown fusion {self.fusion!r}")
            if self.transform not in TRANSFORMS:
                raise ConfigError(f"unknown transform {self.transform!r}")
            if self.fusion == "scale" and self.transform != "bottleneck_sigmoid":
                raise ConfigError("scale fusion needs the sigmoid-terminated bottleneck transform")
            if self.fusion == "add" and self.transform == "bottleneck_sigmoid":
                raise ConfigError("bottleneck_sigmoid is only paired with scale fusion")
        if self.has_bottleneck:
            r = self.bottleneck_ratio
            if r < 1 or self.channels < r or self.channels % r:
                raise ConstructionError(
                    f"bottleneck needs channels divisible by r with C/r >= 1, got C={self.channels}, r={r}")

    @property
    def has_bottleneck(self) -> bool:
        if self.kind in ("gc", "se"):
            return True
        return self.kind == "framework" and self.transform.startswith("bottleneck")

    @property
    def hidden(self) -> int:
        """Inner width: C/hidden_ratio for nl, C/r for bottlenecks."""
        if self.kind == "nl":
            return self.channels // self.hidden_ratio
        return self.channels // self.bottleneck_ratio

    @property
    def is_global(self) -> bool:
        return self.kind != "nl"

    # -- JSON ----------------------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, obj: dict) -> "BlockSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown BlockSpec keys: {sorted(unknown)}")
        if "kind" not in obj or "channels" not in obj:
            raise ConfigError("BlockSpec requires 'kind' and 'channels'")
        return cls(**obj)

    @classmethod
    def from_json(cls, text: str) -> "BlockSpec":
        return cls.from_dict(json.loads(text))


def gc_spec(channels: int, r: int = 16) -> BlockSpec:
    return BlockSpec("gc", channels, bottleneck_ratio=r)


def se_spec(channels: int, r: int = 16) -> BlockSpec:
    return BlockSpec("se", channels, bottleneck_ratio=r)


def param_shapes(spec: BlockSpec) -> dict[str, tuple[int, ...]]:
    c, h = spec.channels, spec.hidden
    shapes: dict[str, tuple[int, ...]] = {}

    def lin(name, cout, cin):
        shapes[f"{name}.weight"] = (cout, cin)
        shapes[f"{name}.bias"] = (cout,)

    def bottleneck(with_ln):
        lin("v1", h, c)
        if with_ln:
            shapes["ln.gamma"] = (h,)
            shapes["ln.beta"] = (h,)
        lin("v2", c, h)

    if spec.kind == "nl":
        if spec.variant in ("e-gaussian", "dot"):
            lin("query", h, c)
            lin("key", h, c)
        elif spec.variant == "concat":
            lin("query", 1, 2 * c)
        lin("value", h, c)
        lin("out", c, h)
    elif spec.kind == "snl":
        lin("key", 1, c)
        lin("value", c, c)
    elif spec.kind == "gc":
        lin("key", 1, c)
        bottleneck(True)
    elif spec.kind == "se":
        bottleneck(False)
    else:
        if spec.pooling == "att":
            lin("key", 1, c)
        if spec.transform == "bottleneck_ln_relu":
            bottleneck(True)
        elif spec.transform == "bottleneck_sigmoid":
            bottleneck(False)
        elif spec.transform == "single_linear":
            lin("value", c, c)
    return shapes


def _zero_init(spec: BlockSpec, name: str) -> bool:
    # output projection of an LN bottleneck starts at zero -> identity block
    ln_bottleneck = spec.kind == "gc" or (
        spec.kind == "framework" and spec.transform == "bottleneck_ln_relu")
    return ln_bottleneck and name.startswith("v2.")


@dataclass
class BlockParams:
    spec: BlockSpec
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def num_params(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def with_tensors(self, **updates: Tensor) -> "BlockParams":
        missing = set(updates) - set(self.tensors)
        if missing:
            raise KeyError(f"no such parameters: {sorted(missing)}")
        merged = dict(self.tensors)
        merged.update(updates)
        return BlockParams(self.spec, merged)

    def retarget(self, spec: BlockSpec) -> "BlockParams":
        """Same tensors under another spec; shapes must line up exactly."""
        want = param_shapes(spec)
        have = {k: v.shape for k, v in self.tensors.items()}
        if want != have:
            raise ShapeError(f"parameters do not fit {spec}: want {want}, have {have}")
        return BlockParams(spec, dict(self.tensors))


def build_block(spec: BlockSpec, seed: int) -> BlockParams:
    """Kaiming-uniform weights, zero biases, LN gamma=1/beta=0; gc ``v2`` is zero."""
    tensors = {}
    for name, shape in param_shapes(spec).items():
        if name == "ln.gamma":
            arr = np.ones(shape)
        elif name.endswith(".bias") or name == "ln.beta" or _zero_init(spec, name):
            arr = np.zeros(shape)
        else:
            arr = rng.sample(rng.derive_seed(seed, name), shape, "kaiming", fan_in=shape[1])
        tensors[name] = Tensor(arr, name=name)
    return BlockParams(spec, tensors)


def random_params(spec: BlockSpec, seed: int, scale: float = 1.0) -> BlockParams:
    """Every tensor (biases and LN affine included) drawn at random.

    Unlike :func:`build_block` nothing is zero, so equivalence and gradient
    checks exercise every term.
    """
    tensors = {}
    for name, shape in param_shapes(spec).items():
        fan_in = shape[1] if len(shape) == 2 else shape[0]
        arr = scale * rng.sample(rng.derive_seed(seed, "random", name), shape, "kaiming", fan_in=fan_in)
        if name == "ln.gamma":
            arr = 1.0 + arr
        tensors[name] = Tensor(arr, name=name)
    return BlockParams(spec, tensors)


# -- traces ------------------------------------------------------------------

@dataclass
class AttentionMap:
    """Attention weights, batched.

    ``weights`` is [N, Np, Np] (query-major) for per-query maps or [N, Np]
    for a global map. ``is_global`` is also set on a per-query view that was
    produced by replicating a global map.
    """

    weights: np.ndarray
    is_global: bool

    @property
    def per_query(self) -> bool:
        return self.weights.ndim == 3

    @property
    def num_positions(self) -> int:
        return self.weights.shape[-1]

    def rows(self, sample: int = 0) -> np.ndarray:
        """[Np, Np] matrix for one sample; global maps are replicated per query."""
        w = self.weights[sample]
        if w.ndim == 1:
            return np.tile(w, (w.shape[0], 1))
        return w

    def expanded(self) -> "AttentionMap":
        if self.per_query:
            return self
        n, npos = self.weights.shape
        return AttentionMap(np.repeat(self.weights[:, None, :], npos, axis=1), True)


@dataclass
class ProbeTrace:
    """Captures per position.

    ``input`` and ``output`` are [N, C, Np]; ``key``/``query`` are
    [N, d, Np]; ``prod`` is [N, Np, Np]. Missing probes stay None.
    """

    input: np.ndarray | None = None
    key: np.ndarray | None = None
    query: np.ndarray | None = None
    prod: np.ndarray | None = None
    att: AttentionMap | None = None
    output: np.ndarray | None = None

    def get(self, probe: str):
        if probe not in PROBES:
            raise ConfigError(f"unknown probe {probe!r}")
        return getattr(self, probe)


# -- helpers -----------------------------------------------------------------

def _check_input(spec: BlockSpec, x: Tensor) -> tuple[int, int, int, int]:
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW input, got shape {x.shape}")
    if x.shape[1] != spec.channels:
        raise ShapeError(f"block expects {spec.channels} channels, input has {x.shape[1]}")
    return x.shape


def _flat(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return ops.reshape(x, (n, c, h * w))


def _lin(p: BlockParams, name: str, x: Tensor) -> Tensor:
    return ops.linear(x, p[f"{name}.weight"], p[f"{name}.bias"])


def _dense(p: BlockParams, name: str, v: Tensor) -> Tensor:
    # v: [N, Cin] -> [N, Cout]
    w = p[f"{name}.weight"]
    return ops.add(ops.matmul(v, ops.transpose(w, (1, 0))),
                   ops.reshape(p[f"{name}.bias"], (1, w.shape[0])))


def _global_attention(p: BlockParams, xf: Tensor) -> tuple[Tensor, Tensor]:
    """Logits [N, 1, Np] from the key projection and their softmax over positions."""
    logits = _lin(p, "key", xf)
    return logits, ops.softmax(logits, axis=-1)


def _pool(xf: Tensor, alpha: Tensor) -> Tensor:
    # [N, C, Np] @ [N, Np, 1] -> [N, C, 1]
    return ops.matmul(xf, ops.transpose(alpha, (0, 2, 1)))


# -- non-local ---------------------------------------------------------------

def nl_forward(params: BlockParams, x: Tensor, variant: str | None = None):
    spec = params.spec
    variant = variant or spec.variant
    if variant not in NL_VARIANTS:
        raise ConfigError(f"unknown non-local variant {variant!r}")
    n, c, h, w = _check_input(spec, x)
    npos = h * w
    xf = _flat(x)
    trace = ProbeTrace(input=xf.data)

    if variant == "gaussian":
        scores = ops.matmul(ops.transpose(xf, (0, 2, 1)), xf)
        omega = ops.softmax(scores, axis=-1)
    elif variant in ("e-gaussian", "dot"):
        q = _lin(params, "query", xf)
        k = _lin(params, "key", xf)
        trace.query, trace.key = q.data, k.data
        scores = ops.matmul(ops.transpose(q, (0, 2, 1)), k)
        if variant == "e-gaussian":
            omega = ops.softmax(scores, axis=-1)
        else:
            omega = ops.scale(scores, 1.0 / npos)
    else:
        # W_q [x_i, x_j] splits into a query half and a key half
        wq = params["query.weight"]
        wq_i = ops.reshape(ops.matmul(wq, _select_half(c, first=True)), (1, c))
        wq_j = ops.reshape(ops.matmul(wq, _select_half(c, first=False)), (1, c))
        u = ops.matmul(wq_i, xf)  # [N, 1, Np]
        v = ops.matmul(wq_j, xf)
        trace.query, trace.key = u.data, v.data
        scores = ops.add(ops.add(ops.transpose(u, (0, 2, 1)), v),
                         ops.reshape(params["query.bias"], (1, 1, 1)))
        omega = ops.scale(ops.relu(scores), 1.0 / npos)

    trace.prod = scores.data
    trace.att = AttentionMap(omega.data, is_global=False)
    val = _lin(params, "value", xf)  # [N, h, Np]
    # y[:, :, i] = sum_j omega[i, j] * val[:, :, j]
    y = ops.matmul(val, ops.transpose(omega, (0, 2, 1)))
    out = _lin(params, "out", y)
    trace.output = out.data
    z = ops.add(x, ops.reshape(out, (n, c, h, w)))
    return z, trace


def _select_half(c: int, first: bool) -> Tensor:
    sel = np.zeros((2 * c, c))
    sel[(0 if first else c) + np.arange(c), np.arange(c)] = 1.0
    return Tensor(sel)


# -- simplified non-local ----------------------------------------------------

def snl_forward(params: BlockParams, x: Tensor, form: str | None = None):
    spec = params.spec
    form = form or spec.snl_form
    if form not in SNL_FORMS:
        raise ConfigError(f"unknown snl form {form!r}")
    n, c, h, w = _check_input(spec, x)
    xf = _flat(x)
    logits, alpha = _global_attention(params, xf)
    if form == "pre_distributive":
        # sum_j alpha_j (W_v x_j)
        context = _pool(_lin(params, "value", xf), alpha)
    else:
        # W_v sum_j alpha_j x_j
        context = _lin(params, "value", _pool(xf, alpha))
    trace = ProbeTrace(input=xf.data, key=logits.data,
                       att=AttentionMap(alpha.data[:, 0, :], is_global=True),
                       output=np.broadcast_to(context.data, (n, c, h * w)).copy())
    z = ops.add(x, ops.reshape(context, (n, c, 1, 1)))
    return z, trace


# -- global context and squeeze-excitation, written out directly --------------

def gc_forward(params: BlockParams, x: Tensor):
    """z = x + W_v2 ReLU(LN(W_v1 sum_j softmax(W_k x)_j x_j))."""
    spec = params.spec
    n, c, h, w = _check_input(spec, x)
    xf = _flat(x)
    logits = ops.add(ops.matmul(params["key.weight"], xf), ops.reshape(params["key.bias"], (1, 1, 1)))
    alpha = ops.softmax(logits, axis=-1)
    pooled = ops.reshape(ops.matmul(xf, ops.transpose(alpha, (0, 2, 1))), (n, c))
    hidden = ops.add(ops.matmul(pooled, ops.transpose(params["v1.weight"], (1, 0))),
                     ops.reshape(params["v1.bias"], (1, spec.hidden)))
    hidden = ops.relu(ops.layer_norm(hidden, params["ln.gamma"], params["ln.beta"], LN_EPS))
    delta = ops.add(ops.matmul(hidden, ops.transpose(params["v2.weight"], (1, 0))),
                    ops.reshape(params["v2.bias"], (1, c)))
    z = ops.add(x, ops.reshape(delta, (n, c, 1, 1)))
    trace = ProbeTrace(input=xf.data, key=logits.data,
                       att=AttentionMap(alpha.data[:, 0, :], is_global=True),
                       output=np.repeat(delta.data[:, :, None], h * w, axis=2))
    return z, trace


def se_forward(params: BlockParams, x: Tensor):
    """z = x * sigmoid(W_2 ReLU(W_1 avgpool(x))), per channel."""
    spec = params.spec
    n, c, h, w = _check_input(spec, x)
    squeezed = ops.mean(x, axis=(2, 3))  # [N, C]
    hidden = ops.relu(ops.add(ops.matmul(squeezed, ops.transpose(params["v1.weight"], (1, 0))),
                              ops.reshape(params["v1.bias"], (1, spec.hidden))))
    gate = ops.sigmoid(ops.add(ops.matmul(hidden, ops.transpose(params["v2.weight"], (1, 0))),
                               ops.reshape(params["v2.bias"], (1, c))))
    z = ops.mul(x, ops.reshape(gate, (n, c, 1, 1)))
    npos = h * w
    trace = ProbeTrace(input=x.data.reshape(n, c, npos),
                       att=AttentionMap(np.full((n, npos), 1.0 / npos), is_global=True),
                       output=(z.data - x.data).reshape(n, c, npos))
    return z, trace


# -- framework: context modeling, transform, fusion ---------------------------

def context_modeling(params: BlockParams, xf: Tensor, pooling: str):
    """Returns (context [N, C], alpha [N, Np], logits or None)."""
    n, c, npos = xf.shape
    if pooling == "att":
        logits, alpha = _global_attention(params, xf)
        context = ops.reshape(_pool(xf, alpha), (n, c))
        return context, alpha.data[:, 0, :], logits
    if pooling == "avg":
        return ops.mean(xf, axis=2), np.full((n, npos), 1.0 / npos), None
    raise ConfigError(f"unknown pooling {pooling!r}")


def transform(params: BlockParams, context: Tensor, kind: str) -> Tensor:
    if kind == "bottleneck_ln_relu":
        t = _dense(params, "v1", context)
        t = ops.relu(ops.layer_norm(t, params["ln.gamma"], params["ln.beta"], LN_EPS))
        return _dense(params, "v2", t)
    if kind == "bottleneck_sigmoid":
        t = ops.relu(_dense(params, "v1", context))
        return ops.sigmoid(_dense(params, "v2", t))
    if kind == "single_linear":
        return _dense(params, "value", context)
    if kind == "none":
        return context
    raise ConfigError(f"unknown transform {kind!r}")


def fuse(x: Tensor, t: Tensor, fusion: str) -> Tensor:
    n, c = t.shape
    t4 = ops.reshape(t, (n, c, 1, 1))
    if fusion == "add":
        return ops.add(x, t4)
    if fusion == "scale":
        return ops.mul(x, t4)
    raise ConfigError(f"unknown fusion {fusion!r}")


def framework_forward(params: BlockParams, x: Tensor, spec: BlockSpec | None = None):
    spec = spec or params.spec
    if spec.kind != "framework":
        raise ConfigError(f"framework_forward needs kind=framework, got {spec.kind!r}")
    n, c, h, w = _check_input(spec, x)
    xf = _flat(x)
    context, alpha, logits = context_modeling(params, xf, spec.pooling)
    t = transform(params, context, spec.transform)
    z = fuse(x, t, spec.fusion)
    npos = h * w
    if spec.fusion == "add":
        output = np.repeat(t.data[:, :, None], npos, axis=2)
    else:
        output = (z.data - x.data).reshape(n, c, npos)
    trace = ProbeTrace(input=xf.data, key=None if logits is None else logits.data,
                       att=AttentionMap(alpha, is_global=True), output=output)
    return z, trace


def framework_equivalent(spec: BlockSpec) -> BlockSpec:
    """Framework spec structurally identical to a gc or se spec."""
    if spec.kind == "gc":
        return BlockSpec("framework", spec.channels, bottleneck_ratio=spec.bottleneck_ratio,
                         pooling="att", fusion="add", transform="bottleneck_ln_relu")
    if spec.kind == "se":
        return BlockSpec("framework", spec.channels, bottleneck_ratio=spec.bottleneck_ratio,
                         pooling="avg", fusion="scale", transform="bottleneck_sigmoid")
    raise ConfigError(f"no framework equivalent registered for kind {spec.kind!r}")


def forward(params: BlockParams, x: Tensor):
    kind = params.spec.kind
    if kind == "nl":
        return nl_forward(params, x)
    if kind == "snl":
        return snl_forward(params, x)
    if kind == "gc":
        return gc_forward(params, x)
    if kind == "se":
        return se_forward(params, x)
    return framework_forward(params, x)


def attention_map(params: BlockParams, x: Tensor, per_query: bool = False) -> AttentionMap:
    """Attention weights of one forward pass.

    nl blocks give per-query maps; every other block gives its global map,
    replicated over queries (still flagged global) when ``per_query`` is set.
    """
    _, trace = forward(params, x)
    att = trace.att
    return att.expanded() if per_query else att


def with_spec(params: BlockParams, **changes) -> BlockParams:
    return params.retarget(replace(params.spec, **changes))
