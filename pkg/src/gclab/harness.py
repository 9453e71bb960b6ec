"""Toy global-majority task, a small residual net with block slots, and SGD.

Each image scatters pixels of K signature colours on a black canvas; the
label is the colour covering the most pixels. Pixel values are scaled to
[-1, 1]. Deciding the label needs a count over the whole image, which is
what pooled global context provides.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import blocks, ops, rng
from .blocks import BlockParams
from .cost import InsertionPlan, parse_insert
from .errors import ConfigError, ContractError, TrainingError
from .tensor import Tape, Tensor, backward, no_tape

PALETTE = np.array([
    (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0), (1.0, 1.0, 0.0),
    (1.0, 0.0, 1.0), (0.0, 1.0, 1.0), (1.0, 1.0, 1.0), (0.5, 0.5, 0.5),
])


@dataclass(frozen=True)
class ToyDatasetSpec:
    seed: int = 0
    num_samples: int = 500
    num_classes: int = 4
    density: float = 1.0
    size: int = 16
    in_channels: int = 3


@dataclass
class Dataset:
    images: np.ndarray  # [N, 3, H, W]
    labels: np.ndarray  # [N]

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])


def _sample_counts(u: np.ndarray, k: int, total: int) -> tuple[int, np.ndarray]:
    """Pixel count per class with a unique argmax; ``u`` holds 2k+1 uniforms."""
    label = min(int(u[0] * k), k - 1)
    major = int(np.ceil(total * (1.3 + 0.5 * u[1]) / k))
    major = min(major, total)
    rest = total - major
    others = np.zeros(k, dtype=np.int64)
    other_ids = [c for c in range(k) if c != label]
    if other_ids and rest > 0:
        w = 0.5 + u[2:2 + len(other_ids)]
        share = np.floor(rest * w / w.sum()).astype(np.int64)
        share[np.argmax(w)] += rest - share.sum()
        others[other_ids] = share
    counts = others
    counts[label] = major
    while True:
        rivals = [c for c in other_ids if counts[c] >= counts[label]]
        if not rivals:
            break
        counts[rivals[0]] -= 1
        counts[label] += 1
    return label, counts


def gen_dataset(spec: ToyDatasetSpec) -> tuple[Dataset, Dataset]:
    """Deterministic images and labels, split 80/20 by index."""
    k = spec.num_classes
    if k < 2:
        raise ConfigError("need at least two classes")
    if k > len(PALETTE):
        raise ConfigError(f"at most {len(PALETTE)} classes are supported")
    if not 0.0 < spec.density <= 1.0:
        raise ConfigError(f"density must lie in (0, 1], got {spec.density}")
    hw = spec.size * spec.size
    total = max(k, int(round(spec.density * hw)))
    images = np.zeros((spec.num_samples, spec.in_channels, spec.size, spec.size))
    labels = np.zeros(spec.num_samples, dtype=np.int64)
    palette = PALETTE[:k, :spec.in_channels]
    for i in range(spec.num_samples):
        sub = rng.derive_seed(spec.seed, "sample", i)
        u = rng.uniform01(sub, 2 * k + 1 + hw)
        label, counts = _sample_counts(u[:2 * k + 1], k, total)
        order = np.argsort(u[2 * k + 1:], kind="stable")
        colour_of = np.repeat(np.arange(k), counts)
        flat = np.zeros((hw, spec.in_channels))
        flat[order[:total]] = palette[colour_of]
        # pixel values live in [-1, 1]; black canvas is -1
        images[i] = 2.0 * flat.T.reshape(spec.in_channels, spec.size, spec.size) - 1.0
        labels[i] = label
    cut = int(round(0.8 * spec.num_samples))
    return (Dataset(images[:cut], labels[:cut]), Dataset(images[cut:], labels[cut:]))


def majority_label(image: np.ndarray, num_classes: int) -> int:
    """Recompute the label from pixels (independent of the generator)."""
    pix = (image.reshape(image.shape[0], -1).T + 1.0) / 2.0
    counts = [int(np.all(pix == PALETTE[c, :image.shape[0]], axis=1).sum()) for c in range(num_classes)]
    return int(np.argmax(counts))


# -- network -----------------------------------------------------------------

@dataclass(frozen=True)
class ToyNetSpec:
    widths: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 2
    insert: tuple[InsertionPlan, ...] = ()
    in_channels: int = 3
    num_classes: int = 4

    @property
    def stage_names(self) -> tuple[str, ...]:
        return tuple(f"c{i + 2}" for i in range(len(self.widths)))

    @classmethod
    def with_inserts(cls, *inserts: str, **kw) -> "ToyNetSpec":
        return cls(insert=tuple(parse_insert(s) for s in inserts), **kw)


def receptive_field(spec: ToyNetSpec) -> int:
    """Receptive field (pixels) of the conv trunk before global pooling."""
    rf, jump = 3, 1  # stem 3x3
    for s in range(len(spec.widths)):
        # only the first unit of a stage is spatial; the rest are pointwise
        rf += 2 * jump
        if s > 0:
            jump *= 2
    return rf


@dataclass
class ToyNet:
    spec: ToyNetSpec
    params: dict[str, Tensor]
    slots: dict[str, list[tuple[str, blocks.BlockSpec]]] = field(default_factory=dict)

    def block_params(self, prefix: str, spec: blocks.BlockSpec) -> BlockParams:
        names = blocks.param_shapes(spec)
        return BlockParams(spec, {n: self.params[f"{prefix}.{n}"] for n in names})

    def forward(self, x: Tensor) -> Tensor:
        p = self.params
        h = ops.relu(ops.conv2d(x, p["stem.weight"], p["stem.bias"], 1, 1))
        for s, name in enumerate(self.spec.stage_names):
            for b in range(self.spec.blocks_per_stage):
                unit = f"{name}.{b}"
                stride = 2 if (s > 0 and b == 0) else 1
                pad = 1 if b == 0 else 0
                y = ops.relu(ops.conv2d(h, p[f"{unit}.conv1.weight"], p[f"{unit}.conv1.bias"], stride, pad))
                y = ops.conv2d(y, p[f"{unit}.conv2.weight"], p[f"{unit}.conv2.bias"], 1, 0)
                slots = self.slots.get(unit, [])
                for i, (pos, bspec) in enumerate(slots):
                    if pos == "after1x1":
                        y, _ = blocks.forward(self.block_params(f"{unit}.blk{i}", bspec), y)
                if f"{unit}.proj.weight" in p:
                    h = ops.conv2d(h, p[f"{unit}.proj.weight"], p[f"{unit}.proj.bias"], stride, 0)
                h = ops.relu(ops.add(y, h))
                for i, (pos, bspec) in enumerate(slots):
                    if pos == "afterAdd":
                        h, _ = blocks.forward(self.block_params(f"{unit}.blk{i}", bspec), h)
        pooled = ops.mean(h, axis=(2, 3))
        return ops.add(ops.matmul(pooled, ops.transpose(p["fc.weight"], (1, 0))),
                       ops.reshape(p["fc.bias"], (1, self.spec.num_classes)))

    def num_params(self) -> int:
        return int(sum(t.size for t in self.params.values()))


def init_net(spec: ToyNetSpec, seed: int) -> ToyNet:
    """Backbone weights are seeded by name, so inserting blocks leaves them unchanged."""
    params: dict[str, Tensor] = {}

    def conv(name, cout, cin, k, zero=False):
        if zero:
            w = np.zeros((cout, cin, k, k))
        else:
            w = rng.sample(rng.derive_seed(seed, name), (cout, cin, k, k), "kaiming", fan_in=cin * k * k)
        params[f"{name}.weight"] = Tensor(w, name=f"{name}.weight")
        params[f"{name}.bias"] = Tensor(np.zeros(cout), name=f"{name}.bias")

    conv("stem", spec.widths[0], spec.in_channels, 3)
    cin = spec.widths[0]
    stage_of: dict[str, list[str]] = {}
    for s, (name, width) in enumerate(zip(spec.stage_names, spec.widths)):
        stage_of[name] = []
        for b in range(spec.blocks_per_stage):
            unit = f"{name}.{b}"
            stage_of[name].append(unit)
            conv(f"{unit}.conv1", width, cin, 3 if b == 0 else 1)
            # residual branches start at zero; no normalization layers to tame them
            conv(f"{unit}.conv2", width, width, 1, zero=True)
            if b == 0 and (s > 0 or cin != width):
                conv(f"{unit}.proj", width, cin, 1)
            cin = width
    # zero head: the untrained net predicts uniformly
    params["fc.weight"] = Tensor(np.zeros((spec.num_classes, cin)), name="fc.weight")
    params["fc.bias"] = Tensor(np.zeros(spec.num_classes), name="fc.bias")

    slots: dict[str, list[tuple[str, blocks.BlockSpec]]] = {}
    width_of = dict(zip(spec.stage_names, spec.widths))
    for plan in spec.insert:
        for stage in plan.stages:
            if stage not in stage_of:
                raise ConfigError(f"unknown stage {stage!r}; toy net has {list(stage_of)}")
            units = stage_of[stage]
            if plan.mode == "+1":
                if len(units) < 2:
                    raise ConfigError(f"stage {stage!r} needs >= 2 units for a +1 insertion")
                units = [units[-2]]
            for unit in units:
                bspec = plan.spec_for(width_of[stage])
                idx = len(slots.setdefault(unit, []))
                slots[unit].append((plan.position, bspec))
                bp = blocks.build_block(bspec, rng.derive_seed(seed, f"{unit}.blk{idx}"))
                for n, t in bp.tensors.items():
                    params[f"{unit}.blk{idx}.{n}"] = Tensor(t.data, name=f"{unit}.blk{idx}.{n}")
    return ToyNet(spec, params, slots)


# -- training ----------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    test_acc: float


@dataclass
class TrainResult:
    history: list[EpochMetrics]
    net: ToyNet

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,test_acc"]
        lines += [f"{m.epoch},{m.train_loss:.12g},{m.test_acc:.12g}" for m in self.history]
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())


def logits(net: ToyNet, data: Dataset, chunk: int = 128) -> np.ndarray:
    out = []
    with no_tape():
        for start in range(0, len(data), chunk):
            out.append(net.forward(Tensor(data.images[start:start + chunk])).data)
    return np.concatenate(out, axis=0)


def dataset_loss(net: ToyNet, data: Dataset) -> float:
    z = logits(net, data)
    with no_tape():
        return ops.cross_entropy(Tensor(z), data.labels).item()


def evaluate(net: ToyNet, data: Dataset) -> float:
    """Top-1 accuracy; argmax ties go to the lowest class index."""
    if len(data) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    pred = np.argmax(logits(net, data), axis=1)
    return float(np.mean(pred == data.labels))


def train(net_spec: ToyNetSpec, data: tuple[Dataset, Dataset], epochs: int, seed: int,
          lr: float = 0.05, momentum: float = 0.9, weight_decay: float = 1e-4,
          batch_size: int = 32) -> TrainResult:
    """SGD with momentum on mean cross-entropy.

    Update per parameter: ``v = momentum * v + (g + weight_decay * w)``,
    ``w -= lr * v``. Epoch 0 in the history is the untrained net.
    """
    train_set, test_set = data
    if len(train_set) == 0:
        raise ContractError("training set is empty")
    net = init_net(net_spec, seed)
    names = list(net.params)
    velocity = {n: np.zeros(net.params[n].shape) for n in names}
    history = [EpochMetrics(0, dataset_loss(net, train_set),
                            evaluate(net, test_set) if len(test_set) else float("nan"))]
    # divergence is reported through the finiteness checks below
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, epochs + 1):
            shuffle = rng.uniform01(rng.derive_seed(seed, "shuffle", epoch), len(train_set))
            order = np.argsort(shuffle, kind="stable")
            for start in range(0, len(order), batch_size):
                idx = order[start:start + batch_size]
                with Tape() as tape:
                    loss = ops.cross_entropy(net.forward(Tensor(train_set.images[idx])),
                                             train_set.labels[idx])
                if not np.isfinite(loss.item()):
                    raise TrainingError("loss is not finite", epoch)
                grads = backward(tape, loss)
                updated = {}
                for n in names:
                    t = net.params[n]
                    g = grads.get(t)
                    if g is None:
                        g = np.zeros(t.shape)
                    velocity[n] = momentum * velocity[n] + (g + weight_decay * t.data)
                    updated[n] = Tensor(t.data - lr * velocity[n], name=n)
                net.params = updated
            train_loss = dataset_loss(net, train_set)
            if not np.isfinite(train_loss):
                raise TrainingError("loss is not finite", epoch)
            acc = evaluate(net, test_set) if len(test_set) else float("nan")
            history.append(EpochMetrics(epoch, train_loss, acc))
    return TrainResult(history, net)
