"""Execution-free parameter and FLOP counting.

Architectures are plain layer lists (:class:`ArchDescriptor`); nothing is
allocated. Block costs come from closed-form formulas here, kept separate
from :func:`gclab.blocks.param_shapes` so the two can cross-check each other.
"""

from __future__ import annotations

import copy
import json
import re
from dataclasses import dataclass, field, replace
from typing import Iterable

from .blocks import BlockSpec
from .errors import ConfigError, ShapeError

FLOP_CONVENTION = (
    "1 MAC = 1 FLOP; counts conv, fc and attention matmuls "
    "(score and aggregation); excludes biases, softmax, LN, activations, pooling, additions"
)

POSITIONS = ("after1x1", "afterAdd")


@dataclass
class Conv:
    cin: int
    cout: int
    k: int
    stride: int = 1
    bias: bool = False


@dataclass
class BN:
    c: int


@dataclass
class Pool:
    kind: str  # "max" or "global_avg"
    k: int = 1
    stride: int = 1


@dataclass
class FC:
    cin: int
    cout: int


@dataclass
class Inserted:
    position: str
    spec: BlockSpec


@dataclass
class ResBlock:
    name: str
    main: list
    shortcut: list = field(default_factory=list)
    inserts: list[Inserted] = field(default_factory=list)


@dataclass
class Stage:
    name: str
    layers: list


@dataclass
class ArchDescriptor:
    name: str
    stages: list[Stage]
    input_hw: tuple[int, int] | None = (224, 224)
    in_channels: int = 3

    def stage(self, name: str) -> Stage:
        for s in self.stages:
            if s.name == name:
                return s
        raise ConfigError(f"unknown stage {name!r}; have {[s.name for s in self.stages]}")

    def blocks(self, stage: str) -> list[ResBlock]:
        return [u for u in self.stage(stage).layers if isinstance(u, ResBlock)]

    def inserted(self) -> list[tuple[str, Inserted]]:
        out = []
        for s in self.stages:
            for u in s.layers:
                if isinstance(u, ResBlock):
                    out.extend((u.name, ins) for ins in u.inserts)
        return out


# -- ResNet-50 ---------------------------------------------------------------

def _conv_bn(cin, cout, k, stride=1):
    return [Conv(cin, cout, k, stride), BN(cout)]


def describe_resnet50(num_classes: int = 1000, input_hw: tuple[int, int] | None = (224, 224),
                      stride_in: str = "1x1") -> ArchDescriptor:
    """ResNet-50 with bottleneck units (3, 4, 6, 3).

    ``stride_in`` picks where a stage's downsampling stride sits: on the first
    1x1 conv (original layout, 3.86 GMACs at 224) or on the 3x3 conv
    (the later "v1.5" layout, 4.09 GMACs). Parameters are identical.
    """
    if stride_in not in ("1x1", "3x3"):
        raise ConfigError(f"stride_in must be '1x1' or '3x3', got {stride_in!r}")
    stages = [Stage("stem", _conv_bn(3, 64, 7, 2) + [Pool("max", 3, 2)])]
    cin = 64
    for name, planes, count, stride in (("c2", 64, 3, 1), ("c3", 128, 4, 2),
                                        ("c4", 256, 6, 2), ("c5", 512, 3, 2)):
        units = []
        for b in range(count):
            s = stride if b == 0 else 1
            s1, s3 = (s, 1) if stride_in == "1x1" else (1, s)
            main = (_conv_bn(cin, planes, 1, s1) + _conv_bn(planes, planes, 3, s3)
                    + _conv_bn(planes, planes * 4, 1))
            shortcut = _conv_bn(cin, planes * 4, 1, s) if b == 0 else []
            units.append(ResBlock(f"{name}.{b}", main, shortcut))
            cin = planes * 4
        stages.append(Stage(name, units))
    stages.append(Stage("head", [Pool("global_avg"), FC(cin, num_classes)]))
    return ArchDescriptor("resnet50", stages, input_hw)


# -- insertion ---------------------------------------------------------------

@dataclass(frozen=True)
class InsertionPlan:
    """Attach blocks of ``kind`` to stages.

    ``mode="all"`` puts one block in every residual unit of each stage;
    ``mode="+1"`` puts one block in the unit just before the stage's last one.
    ``options`` are extra BlockSpec fields (variant, bottleneck_ratio, ...).
    """

    kind: str
    stages: tuple[str, ...]
    mode: str = "all"
    position: str = "after1x1"
    options: tuple[tuple[str, object], ...] = ()

    def spec_for(self, channels: int) -> BlockSpec:
        return BlockSpec(self.kind, channels, **dict(self.options))


def _unit_out_channels(unit: ResBlock) -> int:
    convs = [l for l in unit.main if isinstance(l, Conv)]
    return convs[-1].cout


def insert_blocks(arch: ArchDescriptor, plans: Iterable[InsertionPlan]) -> ArchDescriptor:
    out = copy.deepcopy(arch)
    for plan in plans:
        if plan.position not in POSITIONS:
            raise ConfigError(f"unknown insertion position {plan.position!r}")
        if plan.mode not in ("all", "+1"):
            raise ConfigError(f"unknown insertion mode {plan.mode!r}")
        for stage in plan.stages:
            units = out.blocks(stage)
            if not units:
                raise ConfigError(f"stage {stage!r} has no residual units")
            if plan.mode == "+1":
                if len(units) < 2:
                    raise ConfigError(f"stage {stage!r} needs >= 2 units for a +1 insertion")
                units = [units[-2]]
            for unit in units:
                spec = plan.spec_for(_unit_out_channels(unit))
                unit.inserts.append(Inserted(plan.position, spec))
    return out


_SLOT_RE = re.compile(r"^(\+1)?((?:c\d)+)$")


def parse_insert(text: str, position: str = "after1x1") -> InsertionPlan:
    """Parse ``kind:slots[:rR]``, e.g. ``gc:c3c4c5:r16`` or ``nl:+1c4``.

    ``kind`` is one of nl (or nl/<variant>), snl, gc, se, or a framework
    ``<pooling>+<fusion>`` pair such as ``avg+add``.
    """
    parts = text.split(":")
    if len(parts) not in (2, 3):
        raise ConfigError(f"insert spec must be kind:slots[:rR], got {text!r}")
    kind_tok, slot_tok = parts[0], parts[1]
    options: dict[str, object] = {}
    if len(parts) == 3:
        m = re.fullmatch(r"r(\d+)", parts[2])
        if not m:
            raise ConfigError(f"bad ratio token {parts[2]!r}; expected rN")
        options["bottleneck_ratio"] = int(m.group(1))
    if kind_tok.startswith("nl/"):
        kind, options["variant"] = "nl", kind_tok[3:]
    elif "+" in kind_tok:
        pooling, _, fusion = kind_tok.partition("+")
        kind = "framework"
        options.update(pooling=pooling, fusion=fusion,
                       transform="bottleneck_sigmoid" if fusion == "scale" else "bottleneck_ln_relu")
    else:
        kind = kind_tok
    if kind not in ("nl", "snl", "gc", "se", "framework"):
        raise ConfigError(f"unknown block kind {kind_tok!r}")
    if kind in ("nl", "snl") and "bottleneck_ratio" in options:
        raise ConfigError(f"{kind} blocks take no bottleneck ratio")
    m = _SLOT_RE.fullmatch(slot_tok)
    if not m:
        raise ConfigError(f"bad slot token {slot_tok!r}; expected e.g. c3c4c5 or +1c4")
    stages = tuple(re.findall(r"c\d", m.group(2)))
    mode = "+1" if m.group(1) else "all"
    if mode == "+1" and len(stages) != 1:
        raise ConfigError("+1 insertion names exactly one stage")
    # validate the options once with a harmless channel count
    try:
        BlockSpec(kind, 2048, **options)
    except ConfigError as err:
        raise ConfigError(f"{text!r}: {err}") from None
    return InsertionPlan(kind, stages, mode, position, tuple(sorted(options.items())))


# -- closed-form block costs -------------------------------------------------

def _lin(cin: int, cout: int) -> int:
    return cin * cout + cout


def block_params(spec: BlockSpec) -> int:
    c = spec.channels
    if spec.kind == "nl":
        h = c // spec.hidden_ratio
        embed = {"gaussian": 0, "e-gaussian": 2 * _lin(c, h), "dot": 2 * _lin(c, h),
                 "concat": _lin(2 * c, 1)}[spec.variant]
        return embed + _lin(c, h) + _lin(h, c)
    if spec.kind == "snl":
        return _lin(c, 1) + _lin(c, c)
    h = c // spec.bottleneck_ratio
    if spec.kind == "gc":
        return _lin(c, 1) + _lin(c, h) + 2 * h + _lin(h, c)
    if spec.kind == "se":
        return _lin(c, h) + _lin(h, c)
    total = _lin(c, 1) if spec.pooling == "att" else 0
    if spec.transform == "bottleneck_ln_relu":
        total += _lin(c, h) + 2 * h + _lin(h, c)
    elif spec.transform == "bottleneck_sigmoid":
        total += _lin(c, h) + _lin(h, c)
    elif spec.transform == "single_linear":
        total += _lin(c, c)
    return total


def block_flops(spec: BlockSpec, npos: int) -> int:
    """MACs of one block at ``npos`` positions."""
    c = spec.channels
    if spec.kind == "nl":
        h = c // spec.hidden_ratio
        pairwise = npos * npos * h  # aggregation
        if spec.variant in ("e-gaussian", "dot"):
            return 4 * npos * c * h + npos * npos * h + pairwise
        if spec.variant == "gaussian":
            return 2 * npos * c * h + npos * npos * c + pairwise
        return 2 * npos * c * h + 2 * npos * c + pairwise  # concat
    if spec.kind == "snl":
        if spec.snl_form == "pre_distributive":
            return 2 * npos * c + npos * c * c
        return 2 * npos * c + c * c
    r = spec.bottleneck_ratio
    if spec.kind == "gc":
        return 2 * npos * c + 2 * c * c // r
    if spec.kind == "se":
        return 2 * c * c // r
    total = 2 * npos * c if spec.pooling == "att" else 0
    if spec.transform.startswith("bottleneck"):
        total += 2 * c * c // r
    elif spec.transform == "single_linear":
        total += c * c
    return total


# -- counting ----------------------------------------------------------------

@dataclass
class CostItem:
    label: str
    kind: str
    params: int
    flops: int | None


@dataclass
class CostReport:
    params: int
    flops: int | None
    breakdown: list[CostItem] = field(default_factory=list)
    convention: str = FLOP_CONVENTION

    @property
    def base_params(self) -> int:
        return self.params - sum(i.params for i in self.breakdown)

    @property
    def added_params(self) -> int:
        return sum(i.params for i in self.breakdown)

    @property
    def added_flops(self) -> int | None:
        if self.flops is None:
            return None
        return sum(i.flops for i in self.breakdown)

    def to_dict(self) -> dict:
        return {
            "params": self.params,
            "params_M": round(self.params / 1e6, 2),
            "flops": self.flops,
            "flops_G": None if self.flops is None else round(self.flops / 1e9, 2),
            "convention": self.convention,
            "insertions": [vars(i).copy() for i in self.breakdown],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _out_hw(h, w, k, stride):
    pad = k // 2
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


def _walk(layers, c, hw, totals):
    """Accumulate costs of plain layers; returns the new (channels, hw)."""
    for layer in layers:
        if isinstance(layer, Conv):
            if layer.cin != c:
                raise ShapeError(f"conv expects {layer.cin} channels, got {c}")
            params = layer.cin * layer.cout * layer.k ** 2 + (layer.cout if layer.bias else 0)
            if hw is not None:
                hw = _out_hw(*hw, layer.k, layer.stride)
                totals["flops"] += layer.cin * layer.cout * layer.k ** 2 * hw[0] * hw[1]
            totals["params"] += params
            c = layer.cout
        elif isinstance(layer, BN):
            if layer.c != c:
                raise ShapeError(f"bn expects {layer.c} channels, got {c}")
            totals["params"] += 2 * layer.c
        elif isinstance(layer, Pool):
            if hw is not None:
                hw = (1, 1) if layer.kind == "global_avg" else _out_hw(*hw, layer.k, layer.stride)
        elif isinstance(layer, FC):
            if layer.cin != c:
                raise ShapeError(f"fc expects {layer.cin} inputs, got {c}")
            totals["params"] += layer.cin * layer.cout + layer.cout
            totals["flops"] += layer.cin * layer.cout
            c = layer.cout
        else:
            raise TypeError(f"unexpected layer {layer!r}")
    return c, hw


def _count(arch: ArchDescriptor) -> CostReport:
    totals = {"params": 0, "flops": 0}
    items: list[CostItem] = []
    c, hw = arch.in_channels, arch.input_hw
    for stage in arch.stages:
        for unit in stage.layers:
            if not isinstance(unit, ResBlock):
                c, hw = _walk([unit], c, hw, totals)
                continue
            c_out, hw_out = _walk(unit.main, c, hw, totals)
            c_sc, hw_sc = _walk(unit.shortcut, c, hw, totals)
            if c_sc != c_out or hw_sc != hw_out:
                raise ShapeError(f"{unit.name}: shortcut ({c_sc}, {hw_sc}) != main ({c_out}, {hw_out})")
            for ins in unit.inserts:
                if ins.spec.channels != c_out:
                    raise ShapeError(f"{unit.name}: block has {ins.spec.channels} channels, slot has {c_out}")
                p = block_params(ins.spec)
                f = None if hw_out is None else block_flops(ins.spec, hw_out[0] * hw_out[1])
                totals["params"] += p
                if f is not None:
                    totals["flops"] += f
                label = ins.spec.kind if ins.spec.kind != "nl" else f"nl/{ins.spec.variant}"
                items.append(CostItem(f"{unit.name}:{ins.position}", label, p, f))
            c, hw = c_out, hw_out
    return CostReport(totals["params"], None if arch.input_hw is None else totals["flops"], items)


def count_params(arch: ArchDescriptor) -> CostReport:
    return _count(arch)


def count_flops(arch: ArchDescriptor) -> CostReport:
    if arch.input_hw is None:
        raise ConfigError("FLOP counting needs an input resolution")
    return _count(arch)


# -- reference configurations ---------------------------------------------------

REFERENCE_CONFIGS = (
    ("baseline", ()),
    ("+1NL", ("nl:+1c4",)),
    ("+1SNL", ("snl:+1c4",)),
    ("+1GC", ("gc:+1c4:r16",)),
    ("+all GC", ("gc:c3c4c5:r16",)),
)


def reference_configs(num_classes: int = 1000) -> list[tuple[str, CostReport]]:
    base = describe_resnet50(num_classes)
    return [(label, count_flops(insert_blocks(base, [parse_insert(s) for s in inserts])))
            for label, inserts in REFERENCE_CONFIGS]


def with_resolution(arch: ArchDescriptor, hw: tuple[int, int] | None) -> ArchDescriptor:
    return replace(arch, input_hw=hw)
