"""Connectivity probability models and random-graph mask realization.

A receptive field's connectivity is a realization of a random graph: each
in-region connection exists independently with a per-cell acceptance
probability given by a spatial model (uniform or center-peaked Gaussian).
Acceptance probabilities are calibrated so the expected realized connectivity
fraction matches a requested target, making the two models comparable at
equal connectivity percentages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import rng


class MaskRealizationError(RuntimeError):
    """Raised when a non-empty mask cannot be realized within the retry budget."""


class ModelKind(str, Enum):
    UNIFORM = "uniform"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class FieldShape:
    """Spatial extent of a receptive field; odd dims so a center cell exists."""

    height: int
    width: int

    def __post_init__(self) -> None:
        for name, v in (("height", self.height), ("width", self.width)):
            if v < 1 or v % 2 == 0:
                raise ValueError(f"field {name} must be a positive odd integer, got {v}")

    @property
    def cells(self) -> int:
        return self.height * self.width

    @property
    def center(self) -> tuple[int, int]:
        return self.height // 2, self.width // 2


@dataclass(frozen=True)
class ConnectivityModel:
    """Spatial rule assigning a relative acceptance probability to each offset.

    ``sigma`` applies to the Gaussian kind only and defaults to one third of
    the field side length.
    """

    kind: ModelKind
    region: FieldShape
    sigma: float | None = None

    def __post_init__(self) -> None:
        if self.kind is ModelKind.GAUSSIAN:
            sigma = self.sigma
            if sigma is None:
                sigma = (self.region.height + self.region.width) / 2.0 / 3.0
                object.__setattr__(self, "sigma", sigma)
            if sigma <= 0:
                raise ValueError(f"sigma must be > 0, got {sigma}")
        elif self.sigma is not None:
            raise ValueError("sigma only applies to the Gaussian model")


def uniform_model(region: FieldShape) -> ConnectivityModel:
    return ConnectivityModel(ModelKind.UNIFORM, region)


def gaussian_model(region: FieldShape, sigma: float | None = None) -> ConnectivityModel:
    return ConnectivityModel(ModelKind.GAUSSIAN, region, sigma)


def model_probability(model: ConnectivityModel, offset: tuple[int, int]) -> float:
    """Relative acceptance probability at ``offset`` (rows, cols from center).

    Exactly 0 outside the region.  The uniform model is constant in-region;
    the Gaussian model is an isotropic bell centered at (0, 0) and scaled so
    the center equals 1.
    """
    dr, dc = int(offset[0]), int(offset[1])
    ch, cw = model.region.center
    if abs(dr) > ch or abs(dc) > cw:
        return 0.0
    if model.kind is ModelKind.UNIFORM:
        return 1.0
    assert model.sigma is not None
    return math.exp(-(dr * dr + dc * dc) / (2.0 * model.sigma * model.sigma))


@dataclass(frozen=True)
class SparsityTarget:
    """Requested expected connectivity as a fraction of the dense count."""

    connectivity_fraction: float

    def __post_init__(self) -> None:
        f = self.connectivity_fraction
        if not (0.0 < f <= 1.0):
            raise ValueError(f"connectivity fraction must be in (0, 1], got {f}")


@dataclass(frozen=True)
class MaskSeedRecord:
    """Which stream seed and resample attempt produced a realized mask."""

    seed: int
    draw_index: int


@dataclass(frozen=True)
class ReceptiveFieldMask:
    """Immutable boolean connectivity pattern for one filter."""

    shape: FieldShape
    bits: np.ndarray
    seed_record: MaskSeedRecord | None = None

    def __post_init__(self) -> None:
        bits = np.array(self.bits, dtype=bool)
        if bits.shape != (self.shape.height, self.shape.width):
            raise ValueError(
                f"bits shape {bits.shape} does not match field "
                f"{self.shape.height}x{self.shape.width}"
            )
        if not bits.any():
            raise ValueError("mask must have at least one connection")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())

    @property
    def fraction(self) -> float:
        return self.popcount / self.shape.cells

    def packed(self) -> bytes:
        """Row-major bit packing, used for serialization and checksums."""
        return np.packbits(self.bits.ravel()).tobytes()

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ReceptiveFieldMask)
            and self.shape == other.shape
            and np.array_equal(self.bits, other.bits)
        )


def acceptance_grid(model: ConnectivityModel, target: SparsityTarget) -> np.ndarray:
    """Per-cell acceptance probabilities calibrated to the target fraction.

    Uniform: constant grid equal to the fraction.  Gaussian: ``min(1, c * g)``
    with ``g`` the center-normalized bell and ``c`` solved by bisection so the
    grid mean equals the fraction to within 1e-6.  A target of 1.0 yields an
    all-ones grid for either model.
    """
    h, w = model.region.height, model.region.width
    f = target.connectivity_fraction
    if f >= 1.0:
        return np.ones((h, w), dtype=np.float64)
    if model.kind is ModelKind.UNIFORM:
        return np.full((h, w), f, dtype=np.float64)

    ch, cw = model.region.center
    rr, cc = np.mgrid[0:h, 0:w]
    assert model.sigma is not None
    g = np.exp(-((rr - ch) ** 2 + (cc - cw) ** 2) / (2.0 * model.sigma**2))

    def mean_at(c: float) -> float:
        return float(np.minimum(1.0, c * g).mean())

    lo, hi = 0.0, 1.0 / float(g.min())  # mean_at(hi) == 1.0 >= f
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        m = mean_at(mid)
        if abs(m - f) <= 1e-6:
            lo = hi = mid
            break
        if m < f:
            lo = mid
        else:
            hi = mid
    return np.minimum(1.0, 0.5 * (lo + hi) * g)


def realize_mask(
    model: ConnectivityModel,
    target: SparsityTarget,
    seed: int,
    max_attempts: int = 100,
) -> ReceptiveFieldMask:
    """Realize a connectivity mask by acceptance-rejection sampling.

    Each in-region cell connects independently when its uniform draw falls
    under the calibrated acceptance probability.  Degenerate all-false masks
    are resampled from the same stream; after ``max_attempts`` failures a
    :class:`MaskRealizationError` is raised.  The result is a pure function
    of (model, target, seed).
    """
    q = acceptance_grid(model, target)
    seed = int(seed) & ((1 << 64) - 1)  # the stream identity, as stored on disk
    gen = rng.stream(seed)
    for attempt in range(max_attempts):
        bits = gen.random(q.shape) < q
        if bits.any():
            return ReceptiveFieldMask(
                model.region, bits, MaskSeedRecord(seed, attempt)
            )
    raise MaskRealizationError(
        f"cannot realize non-empty mask at this sparsity "
        f"(fraction {target.connectivity_fraction}, {max_attempts} attempts)"
    )


def realize_dense_mask(shape: FieldShape) -> ReceptiveFieldMask:
    """All-true mask: the conventional fully-connected receptive field."""
    return ReceptiveFieldMask(shape, np.ones((shape.height, shape.width), dtype=bool))


def realize_feature_mask(
    in_features: int,
    out_features: int,
    fraction: float,
    seed: int,
    max_attempts: int = 100,
) -> np.ndarray:
    """Realize an ``in_features x out_features`` boolean edge mask.

    Edges are independent Bernoulli draws at the given fraction.  Any output
    unit left with no incoming edge has its column redrawn, so every unit
    stays reachable; persistent failures raise :class:`MaskRealizationError`.
    """
    SparsityTarget(fraction)  # domain check
    gen = rng.stream(seed)
    mask = gen.random((in_features, out_features)) < fraction
    for j in range(out_features):
        attempt = 0
        while not mask[:, j].any():
            attempt += 1
            if attempt > max_attempts:
                raise MaskRealizationError(
                    f"cannot realize non-empty input set for unit {j} "
                    f"at fraction {fraction}"
                )
            mask[:, j] = gen.random(in_features) < fraction
    mask.setflags(write=False)
    return mask
