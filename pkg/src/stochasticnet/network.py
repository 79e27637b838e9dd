"""Declarative network specs, random-graph realization, inference, training.

A :class:`NetworkSpec` lists layer descriptors; :func:`realize` draws every
connectivity mask from per-filter child RNG streams and initializes weights,
producing a :class:`RealizedNetwork` that is a pure function of (spec, seed).
Masks are realized once and never change afterwards; training touches only
the weights that exist.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field, replace
from typing import IO, Union

import numpy as np

from . import rng
from .layers import (
    FlattenLayer,
    MaxPoolLayer,
    ReluLayer,
    SparseConvLayer,
    SparseDenseLayer,
    conv_output_hw,
    softmax_cross_entropy,
)
from .random_graph import (
    ConnectivityModel,
    FieldShape,
    ModelKind,
    SparsityTarget,
    realize_dense_mask,
    realize_feature_mask,
    realize_mask,
)
from .tensor import Tensor


class SpecError(ValueError):
    """A network spec that cannot be composed into a network."""


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    filters: int
    field: FieldShape = FieldShape(5, 5)
    stride: int = 1
    padding: int = 0
    sparsity: float | None = None  # None = fully connected
    model: ModelKind = ModelKind.UNIFORM

    def __post_init__(self) -> None:
        if self.filters < 1:
            raise SpecError(f"conv needs >= 1 filter, got {self.filters}")
        if self.sparsity is not None:
            SparsityTarget(self.sparsity)


@dataclass(frozen=True)
class PoolSpec:
    window: int = 2
    stride: int | None = None


@dataclass(frozen=True)
class ReluSpec:
    pass


@dataclass(frozen=True)
class DenseSpec:
    units: int
    sparsity: float | None = None

    def __post_init__(self) -> None:
        if self.units < 1:
            raise SpecError(f"dense needs >= 1 unit, got {self.units}")
        if self.sparsity is not None:
            SparsityTarget(self.sparsity)


LayerDescriptor = Union[ConvSpec, PoolSpec, ReluSpec, DenseSpec]

_KIND_TAGS = {ConvSpec: "conv", PoolSpec: "pool", ReluSpec: "relu", DenseSpec: "dense"}


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer descriptors plus input shape and realization seed.

    Descriptors can only chain adjacent layers, so skip and intra-layer
    connections are unrepresentable by construction.
    """

    layers: tuple[LayerDescriptor, ...]
    input_shape: tuple[int, int, int]
    seed: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        shape = tuple(int(d) for d in self.input_shape)
        if len(shape) != 3 or any(d < 1 for d in shape):
            raise SpecError(f"input shape must be 3 positive dims, got {self.input_shape}")
        object.__setattr__(self, "input_shape", shape)
        object.__setattr__(self, "seed", int(self.seed) & ((1 << 64) - 1))

    def with_sparsity(self, fraction: float) -> "NetworkSpec":
        """Copy the spec with every sparsifiable layer retargeted to ``fraction``."""
        SparsityTarget(fraction)
        new_layers = []
        for d in self.layers:
            if isinstance(d, (ConvSpec, DenseSpec)) and d.sparsity is not None:
                d = replace(d, sparsity=fraction)
            new_layers.append(d)
        return replace(self, layers=tuple(new_layers))

    def to_dict(self) -> dict:
        out = []
        for d in self.layers:
            entry: dict = {"kind": _KIND_TAGS[type(d)]}
            if isinstance(d, ConvSpec):
                entry.update(
                    filters=d.filters,
                    field=[d.field.height, d.field.width],
                    stride=d.stride,
                    padding=d.padding,
                    sparsity=d.sparsity,
                    model=d.model.value,
                )
            elif isinstance(d, PoolSpec):
                entry.update(window=d.window, stride=d.stride)
            elif isinstance(d, DenseSpec):
                entry.update(units=d.units, sparsity=d.sparsity)
            out.append(entry)
        return {
            "layers": out,
            "input_shape": list(self.input_shape),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkSpec":
        layers: list[LayerDescriptor] = []
        for entry in data["layers"]:
            kind = entry["kind"]
            if kind == "conv":
                fh, fw = entry["field"]
                layers.append(
                    ConvSpec(
                        filters=entry["filters"],
                        field=FieldShape(fh, fw),
                        stride=entry["stride"],
                        padding=entry["padding"],
                        sparsity=entry["sparsity"],
                        model=ModelKind(entry["model"]),
                    )
                )
            elif kind == "pool":
                layers.append(PoolSpec(window=entry["window"], stride=entry["stride"]))
            elif kind == "relu":
                layers.append(ReluSpec())
            elif kind == "dense":
                layers.append(DenseSpec(units=entry["units"], sparsity=entry["sparsity"]))
            else:
                raise SpecError(f"unknown layer kind {kind!r}")
        return cls(tuple(layers), tuple(data["input_shape"]), int(data["seed"]))


def lenet5_stochastic_spec(
    sparsity: float | SparsityTarget,
    model_kind: ModelKind = ModelKind.GAUSSIAN,
    seed: int = 0,
    input_shape: tuple[int, int, int] = (3, 32, 32),
    num_classes: int = 10,
) -> NetworkSpec:
    """Three 5x5 conv layers (32/32/64 filters) with pooling, a 64-unit hidden
    layer, and a softmax head.

    The convolutions and the hidden layer carry the sparsity target; the
    classifier head stays fully connected.  At sparsity 1.0 the realization is
    the conventional dense baseline.
    """
    if isinstance(sparsity, SparsityTarget):
        sparsity = sparsity.connectivity_fraction
    SparsityTarget(sparsity)
    f55 = FieldShape(5, 5)
    layers: tuple[LayerDescriptor, ...] = (
        ConvSpec(32, f55, stride=1, padding=2, sparsity=sparsity, model=model_kind),
        ReluSpec(),
        PoolSpec(2),
        ConvSpec(32, f55, stride=1, padding=2, sparsity=sparsity, model=model_kind),
        ReluSpec(),
        PoolSpec(2),
        ConvSpec(64, f55, stride=1, padding=2, sparsity=sparsity, model=model_kind),
        ReluSpec(),
        PoolSpec(2),
        DenseSpec(64, sparsity=sparsity),
        ReluSpec(),
        DenseSpec(num_classes, sparsity=None),
    )
    return NetworkSpec(layers, input_shape, seed)


RealizedLayer = Union[SparseConvLayer, SparseDenseLayer, ReluLayer, MaxPoolLayer, FlattenLayer]


@dataclass
class RealizedNetwork:
    """Realized layer instances plus the spec and seed that produced them."""

    layers: list[RealizedLayer]
    spec: NetworkSpec
    realization_seed: int

    @property
    def num_classes(self) -> int:
        for layer in reversed(self.layers):
            if isinstance(layer, SparseDenseLayer):
                return layer.out_features
        raise SpecError("network has no dense head")

    @property
    def param_count(self) -> int:
        return sum(
            layer.param_count
            for layer in self.layers
            if isinstance(layer, (SparseConvLayer, SparseDenseLayer))
        )

    @property
    def feature_boundary(self) -> int:
        """Boundary index of the flattened feature vector fed to dense layers."""
        for i, layer in enumerate(self.layers):
            if isinstance(layer, FlattenLayer):
                return i + 1
        return len(self.layers)

    def connectivity_summary(self) -> tuple[int, int]:
        """(realized, dense-capacity) connection counts over maskable layers."""
        realized = dense = 0
        for layer in self.layers:
            if isinstance(layer, SparseConvLayer):
                realized += layer.weights.size
                dense += layer.out_channels * layer.in_channels * layer.field_shape.cells
            elif isinstance(layer, SparseDenseLayer):
                realized += layer.weights.size
                dense += layer.in_features * layer.out_features
        return realized, dense

    def mask_checksum(self) -> str:
        """SHA-256 over every mask's packed bits; must never change."""
        h = hashlib.sha256()
        for layer in self.layers:
            if isinstance(layer, SparseConvLayer):
                for m in layer.masks:
                    h.update(b"conv")
                    h.update(m.packed())
            elif isinstance(layer, SparseDenseLayer):
                h.update(b"dense")
                h.update(np.packbits(layer.mask.ravel()).tobytes())
        return h.hexdigest()

    def _check_batch(self, batch: Tensor) -> None:
        if batch.ndim != 4 or tuple(batch.shape[1:]) != self.spec.input_shape:
            raise ValueError(
                f"batch shape {batch.shape} does not match input shape "
                f"[N, {', '.join(map(str, self.spec.input_shape))}]"
            )

    def forward(self, batch: Tensor) -> Tensor:
        self._check_batch(batch)
        x = batch
        for layer in self.layers:
            x, _ = layer.forward(x)
        return x

    def forward_with_caches(self, batch: Tensor) -> tuple[Tensor, list]:
        self._check_batch(batch)
        x, caches = batch, []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def extract_features(self, batch: Tensor, layer_index: int | None = None) -> Tensor:
        """Activations after boundary ``layer_index`` (0 = the input itself).

        Defaults to the flattened feature vector after the last pooling stage.
        """
        if layer_index is None:
            layer_index = self.feature_boundary
        if not 0 <= layer_index <= len(self.layers):
            raise IndexError(
                f"layer boundary {layer_index} out of range [0, {len(self.layers)}]"
            )
        self._check_batch(batch)
        x = batch
        for layer in self.layers[:layer_index]:
            x, _ = layer.forward(x)
        return x


def _shape_after(desc: LayerDescriptor, shape, index: int, prev: str):
    """Output shape of a descriptor, raising SpecError naming the layer pair."""
    try:
        if isinstance(desc, ConvSpec):
            if len(shape) != 3:
                raise ValueError(f"conv needs [C,H,W] input, got {shape}")
            _, h, w = shape
            oh, ow = conv_output_hw(h, w, desc.field.height, desc.field.width,
                                    desc.stride, desc.padding)
            return (desc.filters, oh, ow)
        if isinstance(desc, PoolSpec):
            if len(shape) != 3:
                raise ValueError(f"pool needs [C,H,W] input, got {shape}")
            return MaxPoolLayer(desc.window, desc.stride).output_shape(shape)
        if isinstance(desc, ReluSpec):
            return shape
        if isinstance(desc, DenseSpec):
            return (desc.units,)
        raise ValueError(f"unknown descriptor {desc!r}")
    except ValueError as exc:
        raise SpecError(
            f"{prev} -> layer {index} ({_KIND_TAGS[type(desc)]}): {exc}"
        ) from exc


def infer_shapes(spec: NetworkSpec) -> list[tuple[int, ...]]:
    """Per-descriptor output shapes; validates that consecutive layers compose."""
    shapes = []
    shape: tuple[int, ...] = spec.input_shape
    prev = "input"
    for i, desc in enumerate(spec.layers):
        if isinstance(desc, DenseSpec) and len(shape) != 1:
            shape = (int(np.prod(shape)),)
        shape = _shape_after(desc, shape, i, prev)
        shapes.append(shape)
        prev = f"layer {i} ({_KIND_TAGS[type(desc)]})"
    return shapes


def realize(spec: NetworkSpec) -> RealizedNetwork:
    """Draw all masks and initial weights; deterministic in (spec, seed).

    Each conv filter's mask comes from child stream (layer, filter); weight
    initialization has its own (layer, "weights") stream so masks do not
    depend on it.  A flatten stage is inserted automatically where conv
    output meets the first dense layer.
    """
    infer_shapes(spec)  # raise early, naming the offending layer

    layers: list[RealizedLayer] = []
    shape: tuple[int, ...] = spec.input_shape
    seed = spec.seed
    for i, desc in enumerate(spec.layers):
        if isinstance(desc, DenseSpec) and len(shape) != 1:
            layers.append(FlattenLayer())
            shape = (int(np.prod(shape)),)
        if isinstance(desc, ConvSpec):
            in_ch = shape[0]
            if desc.sparsity is None or desc.sparsity >= 1.0:
                masks = [realize_dense_mask(desc.field) for _ in range(desc.filters)]
            else:
                model = ConnectivityModel(desc.model, desc.field)
                target = SparsityTarget(desc.sparsity)
                masks = [
                    realize_mask(model, target, rng.child_seed(seed, "layer", i, "filter", f))
                    for f in range(desc.filters)
                ]
            layer = SparseConvLayer.with_glorot_init(
                in_ch, desc.filters, desc.field, masks,
                rng.stream(seed, "layer", i, "weights"),
                stride=desc.stride, padding=desc.padding,
            )
            layers.append(layer)
            shape = layer.output_shape(shape)
        elif isinstance(desc, PoolSpec):
            layer = MaxPoolLayer(desc.window, desc.stride)
            layers.append(layer)
            shape = layer.output_shape(shape)
        elif isinstance(desc, ReluSpec):
            layers.append(ReluLayer())
        elif isinstance(desc, DenseSpec):
            in_features = shape[0]
            if desc.sparsity is None or desc.sparsity >= 1.0:
                mask = np.ones((in_features, desc.units), dtype=bool)
            else:
                mask = realize_feature_mask(
                    in_features, desc.units, desc.sparsity,
                    rng.child_seed(seed, "layer", i, "mask"),
                )
            layers.append(
                SparseDenseLayer.with_glorot_init(
                    in_features, desc.units, mask, rng.stream(seed, "layer", i, "weights")
                )
            )
            shape = (desc.units,)
    return RealizedNetwork(layers, spec, seed)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    train_error: float
    test_error: float | None = None


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    config: TrainConfig | None = None

    @property
    def final_train_loss(self) -> float:
        return self.epochs[-1].train_loss

    @property
    def final_train_error(self) -> float:
        return self.epochs[-1].train_error

    @property
    def final_test_error(self) -> float | None:
        return self.epochs[-1].test_error

    def write_csv(self, out: IO[str]) -> None:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "train_error", "test_error"])
        for s in self.epochs:
            writer.writerow([
                s.epoch,
                f"{s.train_loss:.6f}",
                f"{s.train_error:.6f}",
                "" if s.test_error is None else f"{s.test_error:.6f}",
            ])


def evaluate_error(net: RealizedNetwork, images: Tensor, labels: np.ndarray,
                   batch_size: int = 256) -> float:
    """Fraction of inputs whose argmax logit disagrees with the label."""
    wrong = 0
    for start in range(0, images.shape[0], batch_size):
        logits = net.forward(images[start : start + batch_size])
        pred = logits.argmax(axis=1)
        wrong += int((pred != labels[start : start + batch_size]).sum())
    return wrong / images.shape[0]


def train(net: RealizedNetwork, data, cfg: TrainConfig, test=None) -> TrainReport:
    """SGD with momentum over the unmasked weights only.

    Data order is reshuffled each epoch from the config seed.  The per-epoch
    loss/error series records running means over batches in the order seen.
    Raises :class:`TrainingDivergedError` when the loss stops being finite
    and verifies afterwards that no mask bit changed.
    """
    images, labels = data.images, data.labels
    n = images.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if labels.max() >= net.num_classes:
        raise ValueError(
            f"label {int(labels.max())} out of range for {net.num_classes} classes"
        )

    checksum_before = net.mask_checksum()
    trainable = [l for l in net.layers if isinstance(l, (SparseConvLayer, SparseDenseLayer))]
    velocity = [
        (np.zeros_like(l.weights), np.zeros_like(l.biases)) for l in trainable
    ]

    report = TrainReport(config=cfg)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.stream(cfg.seed, "shuffle", epoch).permutation(n)
        loss_sum = 0.0
        wrong = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = images[idx], labels[idx]
            logits, caches = net.forward_with_caches(xb)
            loss, grad = softmax_cross_entropy(logits, yb)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"loss diverged at epoch {epoch}")
            loss_sum += loss * idx.size
            wrong += int((logits.argmax(axis=1) != yb).sum())

            param_grads = []
            g = grad
            for layer, cache in zip(reversed(net.layers), reversed(caches)):
                g, pg = layer.backward(cache, g)
                if pg is not None:
                    param_grads.append(pg)
            param_grads.reverse()

            for layer, (vw, vb), pg in zip(trainable, velocity, param_grads):
                vw *= cfg.momentum
                vw -= cfg.learning_rate * pg.weights
                layer.weights += vw
                vb *= cfg.momentum
                vb -= cfg.learning_rate * pg.biases
                layer.biases += vb

        test_error = None
        if test is not None:
            test_error = evaluate_error(net, test.images, test.labels)
        report.epochs.append(
            EpochStats(epoch, loss_sum / n, wrong / n, test_error)
        )

    if net.mask_checksum() != checksum_before:
        raise RuntimeError("connectivity masks changed during training")
    return report
