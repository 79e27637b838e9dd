"""Sparse CSR convolution executor, dense baseline, and benchmark harness.

Both execution paths are plain scalar loops compiled by numba: the dense
kernel walks every weight of the filter matrix, the sparse kernel walks only
the stored non-zeros of the CSR rows.  Neither uses hand-written SIMD, and
the strict float64 accumulation chain prevents the compiler from
reassociating the dot products into vector lanes, so the comparison isolates
the arithmetic skipped by sparsity.  The im2row patch buffer is shared by
both paths and reused across filters and repetitions.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np
from numba import njit

from .layers import (
    FlattenLayer,
    MaxPoolLayer,
    ReluLayer,
    SparseConvLayer,
    conv_output_hw,
)
from .network import NetworkSpec, RealizedNetwork, realize
from .random_graph import FieldShape
from .tensor import DTYPE, Tensor


class GeometryError(ValueError):
    pass


class BenchmarkError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConvGeometry:
    in_channels: int
    field: FieldShape
    stride: int = 1
    padding: int = 0

    @property
    def patch_size(self) -> int:
        return self.in_channels * self.field.cells


@dataclass
class SparseKernelCSR:
    """CSR form of a conv layer's dense-equivalent weight matrix.

    rows = out_channels; cols = in_channels * field cells.  Column indices
    are strictly increasing within each row and every row is non-empty.
    """

    row_offsets: np.ndarray  # int64, rows + 1
    col_indices: np.ndarray  # int32, nnz
    values: np.ndarray  # float32, nnz
    rows: int
    cols: int

    def __post_init__(self) -> None:
        self.row_offsets = np.ascontiguousarray(self.row_offsets, dtype=np.int64)
        self.col_indices = np.ascontiguousarray(self.col_indices, dtype=np.int32)
        self.values = np.ascontiguousarray(self.values, dtype=DTYPE)
        self.validate()

    @property
    def nnz(self) -> int:
        return self.values.size

    def validate(self) -> None:
        ro = self.row_offsets
        if ro.shape != (self.rows + 1,) or ro[0] != 0 or ro[-1] != self.nnz:
            raise ValueError("row offsets must run from 0 to nnz with rows+1 entries")
        if np.any(np.diff(ro) < 0):
            raise ValueError("row offsets must be non-decreasing")
        if np.any(np.diff(ro) == 0):
            raise ValueError("empty kernel row: every filter needs a connection")
        if self.col_indices.shape != (self.nnz,) or self.values.shape != (self.nnz,):
            raise ValueError("column/value arrays must both have nnz entries")
        if self.nnz and (self.col_indices.min() < 0 or self.col_indices.max() >= self.cols):
            raise ValueError("column index out of range")
        for r in range(self.rows):
            cols = self.col_indices[ro[r] : ro[r + 1]]
            if np.any(np.diff(cols) <= 0):
                raise ValueError(f"column indices must strictly increase within row {r}")

    def densify(self) -> np.ndarray:
        dense = np.zeros((self.rows, self.cols), dtype=DTYPE)
        for r in range(self.rows):
            lo, hi = self.row_offsets[r], self.row_offsets[r + 1]
            dense[r, self.col_indices[lo:hi]] = self.values[lo:hi]
        return dense


def lower_to_sparse(layer: SparseConvLayer) -> SparseKernelCSR:
    """Lossless CSR lowering of a conv layer's weights."""
    offsets = np.zeros(layer.out_channels + 1, dtype=np.int64)
    offsets[1:] = np.cumsum(layer.filter_nnz)
    return SparseKernelCSR(
        row_offsets=offsets,
        col_indices=layer.scatter_cols.astype(np.int32),
        values=layer.weights.copy(),
        rows=layer.out_channels,
        cols=layer.in_channels * layer.field_shape.cells,
    )


# --- scalar kernels -------------------------------------------------------
# Filter-major loops with hoisted row slices; float64 accumulators keep the
# arithmetic strictly sequential in both kernels.

@njit(cache=True)
def _im2row_single(x, fh, fw, stride, padding, patches):
    c, h, w = x.shape
    oh = (h + 2 * padding - fh) // stride + 1
    ow = (w + 2 * padding - fw) // stride + 1
    for oy in range(oh):
        for ox in range(ow):
            p = oy * ow + ox
            prow = patches[p]
            col = 0
            for ch in range(c):
                for i in range(fh):
                    yy = oy * stride + i - padding
                    for j in range(fw):
                        xx = ox * stride + j - padding
                        if 0 <= yy < h and 0 <= xx < w:
                            prow[col] = x[ch, yy, xx]
                        else:
                            prow[col] = 0.0
                        col += 1


@njit(cache=True)
def _dense_dot(weights, patches, biases, out):
    rows, k = weights.shape
    p_count = patches.shape[0]
    for r in range(rows):
        wrow = weights[r]
        b = biases[r]
        for p in range(p_count):
            prow = patches[p]
            acc = 0.0
            for i in range(k):
                acc += wrow[i] * prow[i]
            out[r, p] = np.float32(acc + b)


@njit(cache=True)
def _csr_dot(row_offsets, col_indices, values, patches, biases, out):
    rows = row_offsets.shape[0] - 1
    p_count = patches.shape[0]
    for r in range(rows):
        lo = row_offsets[r]
        hi = row_offsets[r + 1]
        cols = col_indices[lo:hi]
        vals = values[lo:hi]
        count = hi - lo
        b = biases[r]
        for p in range(p_count):
            prow = patches[p]
            acc = 0.0
            for i in range(count):
                acc += vals[i] * prow[cols[i]]
            out[r, p] = np.float32(acc + b)


@njit(cache=True)
def _relu_inplace(x):
    flat = x.ravel()
    for i in range(flat.size):
        if flat[i] < 0.0:
            flat[i] = 0.0


@njit(cache=True)
def _maxpool_single(x, window, stride, out):
    c, oh, ow = out.shape
    for ch in range(c):
        for oy in range(oh):
            for ox in range(ow):
                best = x[ch, oy * stride, ox * stride]
                for i in range(window):
                    for j in range(window):
                        v = x[ch, oy * stride + i, ox * stride + j]
                        if v > best:
                            best = v
                out[ch, oy, ox] = best


def _check_geometry(kernel_cols: int, x: Tensor, geometry: ConvGeometry) -> tuple[int, int]:
    if x.ndim != 3:
        raise GeometryError(f"input must be [C, H, W], got shape {x.shape}")
    c, h, w = x.shape
    if c != geometry.in_channels:
        raise GeometryError(f"expected {geometry.in_channels} channels, got {c}")
    if kernel_cols != geometry.patch_size:
        raise GeometryError(
            f"kernel has {kernel_cols} columns but geometry implies {geometry.patch_size}"
        )
    return conv_output_hw(h, w, geometry.field.height, geometry.field.width,
                          geometry.stride, geometry.padding)


def _patches_for(x: Tensor, geometry: ConvGeometry, oh: int, ow: int) -> np.ndarray:
    patches = np.empty((oh * ow, geometry.patch_size), dtype=DTYPE)
    _im2row_single(x, geometry.field.height, geometry.field.width,
                   geometry.stride, geometry.padding, patches)
    return patches


def _as_biases(biases, rows: int) -> np.ndarray:
    if biases is None:
        return np.zeros(rows, dtype=DTYPE)
    biases = np.ascontiguousarray(biases, dtype=DTYPE)
    if biases.shape != (rows,):
        raise GeometryError(f"expected {rows} biases, got shape {biases.shape}")
    return biases


def sparse_conv_exec(kernel: SparseKernelCSR, x: Tensor, geometry: ConvGeometry,
                     biases=None) -> Tensor:
    """Convolve one image with a CSR kernel; matches the source layer's forward."""
    oh, ow = _check_geometry(kernel.cols, x, geometry)
    patches = _patches_for(np.ascontiguousarray(x, dtype=DTYPE), geometry, oh, ow)
    out = np.empty((kernel.rows, oh * ow), dtype=DTYPE)
    _csr_dot(kernel.row_offsets, kernel.col_indices, kernel.values, patches,
             _as_biases(biases, kernel.rows), out)
    return out.reshape(kernel.rows, oh, ow)


def dense_conv_exec(weights: np.ndarray, x: Tensor, geometry: ConvGeometry,
                    biases=None) -> Tensor:
    """Dense matrix-dot-product convolution: the timing baseline."""
    weights = np.ascontiguousarray(weights, dtype=DTYPE)
    if weights.ndim != 2:
        raise GeometryError(f"weights must be [filters, K], got shape {weights.shape}")
    oh, ow = _check_geometry(weights.shape[1], x, geometry)
    patches = _patches_for(np.ascontiguousarray(x, dtype=DTYPE), geometry, oh, ow)
    out = np.empty((weights.shape[0], oh * ow), dtype=DTYPE)
    _dense_dot(weights, patches, _as_biases(biases, weights.shape[0]), out)
    return out.reshape(weights.shape[0], oh, ow)


class _StageBuffers:
    """Preallocated per-conv-stage buffers shared by both execution paths."""

    def __init__(self, layer: SparseConvLayer, in_shape: tuple[int, int, int],
                 use_relu: bool, pool: MaxPoolLayer | None) -> None:
        _, h, w = in_shape
        self.geometry = ConvGeometry(layer.in_channels, layer.field_shape,
                                     layer.stride, layer.padding)
        oh, ow = conv_output_hw(h, w, layer.field_shape.height, layer.field_shape.width,
                                layer.stride, layer.padding)
        self.conv_hw = (oh, ow)
        self.patches = np.empty((oh * ow, self.geometry.patch_size), dtype=DTYPE)
        self.conv_out = np.empty((layer.out_channels, oh * ow), dtype=DTYPE)
        self.dense_weights = layer.dense_weight_matrix()
        self.kernel = lower_to_sparse(layer)
        self.biases = layer.biases.copy()
        self.use_relu = use_relu
        self.pool = pool
        if pool is not None:
            pc, ph, pw = pool.output_shape((layer.out_channels, oh, ow))
            self.pool_out = np.empty((pc, ph, pw), dtype=DTYPE)
            self.out_shape = (pc, ph, pw)
        else:
            self.pool_out = None
            self.out_shape = (layer.out_channels, oh, ow)

    def run(self, x: np.ndarray, sparse: bool) -> np.ndarray:
        g = self.geometry
        _im2row_single(x, g.field.height, g.field.width, g.stride, g.padding, self.patches)
        if sparse:
            k = self.kernel
            _csr_dot(k.row_offsets, k.col_indices, k.values, self.patches,
                     self.biases, self.conv_out)
        else:
            _dense_dot(self.dense_weights, self.patches, self.biases, self.conv_out)
        if self.use_relu:
            _relu_inplace(self.conv_out)
        conv3 = self.conv_out.reshape(self.conv_out.shape[0], *self.conv_hw)
        if self.pool is None:
            return conv3
        _maxpool_single(conv3, self.pool.window, self.pool.stride, self.pool_out)
        return self.pool_out


class FeatureExtractor:
    """The conv/relu/pool prefix of a realized network, runnable on either path."""

    def __init__(self, net: RealizedNetwork, input_shape: tuple[int, int, int]) -> None:
        # Group the prefix into (conv, relu?, pool?) stages in layer order.
        # Relu may sit before or after the pool: max pooling commutes with it.
        groups: list[dict] = []
        for layer in net.layers[: net.feature_boundary]:
            if isinstance(layer, SparseConvLayer):
                groups.append({"conv": layer, "relu": False, "pool": None})
            elif isinstance(layer, ReluLayer):
                if not groups:
                    raise BenchmarkError("activation before the first conv is unsupported")
                groups[-1]["relu"] = True
            elif isinstance(layer, MaxPoolLayer):
                if not groups or groups[-1]["pool"] is not None:
                    raise BenchmarkError("pooling must follow a convolution stage")
                groups[-1]["pool"] = layer
            elif isinstance(layer, FlattenLayer):
                pass
        if not groups:
            raise BenchmarkError("network has no convolutional stack to extract with")

        stages: list[_StageBuffers] = []
        shape = input_shape
        for g in groups:
            stage = _StageBuffers(g["conv"], shape, g["relu"], g["pool"])
            shape = stage.out_shape
            stages.append(stage)
        self.stages = stages
        self.input_shape = input_shape
        self.output_shape = shape

    def extract(self, x: np.ndarray, sparse: bool) -> np.ndarray:
        for stage in self.stages:
            x = stage.run(x, sparse)
        return x


@dataclass
class BenchReport:
    """Raw timing samples and derived relative-time statistics per level."""

    connectivity_levels: list[float]
    samples: dict[float, dict[str, list[float]]]
    environment: dict
    relative_time: dict[float, float] = field(init=False)

    def __post_init__(self) -> None:
        self.relative_time = {
            lvl: self.median(lvl, "sparse") / self.median(lvl, "dense")
            for lvl in self.connectivity_levels
        }

    def median(self, level: float, path: str) -> float:
        return statistics.median(self.samples[level][path])

    def iqr(self, level: float, path: str) -> float:
        q1, _, q3 = statistics.quantiles(self.samples[level][path], n=4)
        return q3 - q1

    def write_csv(self, out: IO[str]) -> None:
        out.write("connectivity,rep,path,seconds\n")
        for lvl in self.connectivity_levels:
            for path in ("sparse", "dense"):
                for rep, sec in enumerate(self.samples[lvl][path]):
                    out.write(f"{lvl:g},{rep},{path},{sec:.9e}\n")

    def summary(self) -> dict:
        return {
            "levels": [
                {
                    "connectivity": lvl,
                    "median_sparse_s": self.median(lvl, "sparse"),
                    "median_dense_s": self.median(lvl, "dense"),
                    "iqr_sparse_s": self.iqr(lvl, "sparse"),
                    "relative_time": self.relative_time[lvl],
                }
                for lvl in self.connectivity_levels
            ],
            "environment": self.environment,
        }

    def write_json(self, out: IO[str]) -> None:
        json.dump(self.summary(), out, indent=2)
        out.write("\n")


def timer_granularity() -> float:
    """Smallest positive step the wall-clock timer can resolve, in seconds."""
    g = float("inf")
    for _ in range(50):
        t0 = time.perf_counter()
        t1 = time.perf_counter()
        while t1 == t0:
            t1 = time.perf_counter()
        g = min(g, t1 - t0)
    return g


def run_benchmark(
    spec: NetworkSpec,
    levels: Sequence[float],
    input_shape: tuple[int, int, int] = (3, 64, 64),
    reps: int = 30,
    warmup: int = 5,
    seed: int = 0,
    verify_tolerance: float = 1e-5,
) -> BenchReport:
    """Time sparse vs dense feature extraction across connectivity levels.

    For each level the spec is retargeted, realized, and lowered; sparse and
    dense paths run on the identical input and must agree within
    ``verify_tolerance`` before anything is timed.  Repetitions interleave
    every (level, path) series so clock drift cancels out of the medians.
    """
    if not levels:
        raise ValueError("need at least one connectivity level")
    if reps < 1 or warmup < 0:
        raise ValueError(f"bad reps/warmup: {reps}/{warmup}")
    levels = [float(l) for l in levels]

    x = np.ascontiguousarray(
        np.random.Generator(np.random.PCG64(seed)).random(input_shape), dtype=DTYPE
    )
    extractors: dict[float, FeatureExtractor] = {}
    for lvl in levels:
        net = realize(spec.with_sparsity(lvl))
        ex = FeatureExtractor(net, input_shape)
        got_sparse = ex.extract(x, sparse=True).copy()
        got_dense = ex.extract(x, sparse=False).copy()
        diff = float(np.max(np.abs(got_sparse - got_dense)))
        if diff > verify_tolerance:
            raise BenchmarkError(
                f"sparse/dense outputs disagree at level {lvl:g}: "
                f"max abs diff {diff:.3e} > {verify_tolerance:g}"
            )
        extractors[lvl] = ex

    for _ in range(warmup):
        for lvl in levels:
            extractors[lvl].extract(x, sparse=True)
            extractors[lvl].extract(x, sparse=False)

    granularity = timer_granularity()
    t0 = time.perf_counter()
    extractors[levels[0]].extract(x, sparse=False)
    probe = time.perf_counter() - t0
    if probe < 100.0 * granularity:
        raise BenchmarkError(
            f"run time {probe:.3e}s is under 100x timer granularity "
            f"({granularity:.3e}s); use a larger input or batch"
        )

    samples = {lvl: {"sparse": [], "dense": []} for lvl in levels}
    for _ in range(reps):
        for lvl in levels:
            ex = extractors[lvl]
            t0 = time.perf_counter()
            ex.extract(x, sparse=True)
            samples[lvl]["sparse"].append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            ex.extract(x, sparse=False)
            samples[lvl]["dense"].append(time.perf_counter() - t0)

    env = {
        "input_shape": list(input_shape),
        "reps": reps,
        "warmup": warmup,
        "seed": seed,
        "timer_granularity_s": granularity,
    }
    return BenchReport(levels, samples, env)
