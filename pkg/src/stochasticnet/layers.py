"""Network building blocks with masked forward and backward passes.

Convolutions run as im2row patch extraction followed by a matrix product
against the filters' dense-equivalent weight matrix.  Weights exist only for
unmasked connections: each layer stores a flat parameter vector plus the
index arrays that scatter it into the dense matrix, so masked positions have
no storage and can never receive an update.  Matrix products accumulate in
float64 and round the result to float32, which keeps alternative execution
paths of the same layer within one float32 ulp of each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .random_graph import FieldShape, ReceptiveFieldMask
from .tensor import DTYPE, Tensor


def _mm64(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation."""
    return np.matmul(a, b, dtype=np.float64)


def conv_output_hw(
    h: int, w: int, fh: int, fw: int, stride: int, padding: int
) -> tuple[int, int]:
    oh = (h + 2 * padding - fh) // stride + 1
    ow = (w + 2 * padding - fw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(
            f"field {fh}x{fw} (stride {stride}, padding {padding}) does not fit "
            f"input {h}x{w}"
        )
    return oh, ow


def im2row(x: Tensor, fh: int, fw: int, stride: int, padding: int) -> np.ndarray:
    """Extract convolution patches as rows.

    Input ``[N, C, H, W]`` becomes ``[N, P, C*fh*fw]`` where ``P`` is the
    number of output positions; columns are ordered channel-major, then
    field-row-major, matching the flattened kernel layout.
    """
    n, c, h, w = x.shape
    oh, ow = conv_output_hw(h, w, fh, fw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    patches = np.empty((n, c, fh, fw, oh, ow), dtype=x.dtype)
    for i in range(fh):
        for j in range(fw):
            patches[:, :, i, j] = x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return patches.transpose(0, 4, 5, 1, 2, 3).reshape(n, oh * ow, c * fh * fw)


def row2im(
    rows: np.ndarray,
    input_shape: tuple[int, int, int, int],
    fh: int,
    fw: int,
    stride: int,
    padding: int,
) -> np.ndarray:
    """Adjoint of :func:`im2row`: scatter-add patch rows back onto the image."""
    n, c, h, w = input_shape
    oh, ow = conv_output_hw(h, w, fh, fw, stride, padding)
    rows = rows.reshape(n, oh, ow, c, fh, fw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=rows.dtype)
    for i in range(fh):
        for j in range(fw):
            img[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += rows[:, :, i, j]
    if padding:
        img = img[:, :, padding : padding + h, padding : padding + w]
    return img


def glorot_bound(fan_in: float, fan_out: float) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


@dataclass
class ParamGrads:
    """Gradients aligned with a layer's flat weight and bias storage."""

    weights: np.ndarray
    biases: np.ndarray


class SparseConvLayer:
    """Convolution whose filters connect only through their realized masks.

    One 2-D mask per output filter, shared across every spatial position and
    across all input channels.  The flat weight vector concatenates, filter by
    filter, an ``[in_channels, popcount]`` block in channel-major order.
    Biases are unmasked.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        field_shape: FieldShape,
        masks: list[ReceptiveFieldMask] | tuple[ReceptiveFieldMask, ...],
        weights: np.ndarray,
        biases: np.ndarray,
        stride: int = 1,
        padding: int = 0,
    ) -> None:
        if in_channels < 1 or out_channels < 1:
            raise ValueError("channel counts must be positive")
        if stride < 1 or padding < 0:
            raise ValueError(f"bad geometry: stride {stride}, padding {padding}")
        if len(masks) != out_channels:
            raise ValueError(f"need {out_channels} masks, got {len(masks)}")
        for m in masks:
            if m.shape != field_shape:
                raise ValueError(f"mask shape {m.shape} != field shape {field_shape}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.field_shape = field_shape
        self.stride = stride
        self.padding = padding
        self.masks = tuple(masks)

        # Scatter/gather indices into the dense [out_channels, K] matrix,
        # K = in_channels * field cells.  Fixed for the life of the layer;
        # sorted ascending within each filter, which is the weight order.
        cells = field_shape.cells
        rows, cols, counts = [], [], []
        for f, mask in enumerate(self.masks):
            flat = np.flatnonzero(mask.bits.ravel())
            cidx = (np.arange(in_channels)[:, None] * cells + flat[None, :]).ravel()
            cols.append(cidx)
            rows.append(np.full(cidx.size, f, dtype=np.int64))
            counts.append(cidx.size)
        self.scatter_rows = np.concatenate(rows)
        self.scatter_cols = np.concatenate(cols)
        self.filter_nnz = np.asarray(counts, dtype=np.int64)

        weights = np.asarray(weights, dtype=DTYPE).ravel()
        biases = np.asarray(biases, dtype=DTYPE).ravel()
        if weights.size != self.scatter_cols.size:
            raise ValueError(
                f"expected {self.scatter_cols.size} weights for these masks, got {weights.size}"
            )
        if biases.size != out_channels:
            raise ValueError(f"expected {out_channels} biases, got {biases.size}")
        self.weights = weights
        self.biases = biases

    @classmethod
    def with_glorot_init(
        cls,
        in_channels: int,
        out_channels: int,
        field_shape: FieldShape,
        masks,
        gen: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
    ) -> "SparseConvLayer":
        """Initialize weights uniformly in [-b, b] with masked fan counts.

        For filter f with popcount p: fan_in = in_channels * p and
        fan_out = out_channels * p, so activations stay comparable across
        sparsity levels.
        """
        blocks = []
        for mask in masks:
            p = mask.popcount
            b = glorot_bound(in_channels * p, out_channels * p)
            blocks.append(gen.uniform(-b, b, size=in_channels * p))
        weights = np.concatenate(blocks).astype(DTYPE)
        biases = np.zeros(out_channels, dtype=DTYPE)
        return cls(in_channels, out_channels, field_shape, masks, weights, biases,
                   stride, padding)

    @property
    def param_count(self) -> int:
        return self.weights.size + self.biases.size

    def dense_weight_matrix(self) -> np.ndarray:
        """Dense-equivalent ``[out_channels, K]`` matrix, zeros where masked."""
        k = self.in_channels * self.field_shape.cells
        dense = np.zeros((self.out_channels, k), dtype=DTYPE)
        dense[self.scatter_rows, self.scatter_cols] = self.weights
        return dense

    def output_shape(self, input_shape: tuple[int, int, int]) -> tuple[int, int, int]:
        c, h, w = input_shape
        if c != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {c}")
        oh, ow = conv_output_hw(h, w, self.field_shape.height, self.field_shape.width,
                                self.stride, self.padding)
        return self.out_channels, oh, ow

    def forward(self, x: Tensor) -> tuple[Tensor, dict]:
        n = x.shape[0]
        _, oh, ow = self.output_shape(x.shape[1:])
        patches = im2row(x, self.field_shape.height, self.field_shape.width,
                         self.stride, self.padding)
        flat = patches.reshape(n * oh * ow, -1)
        out = _mm64(flat, self.dense_weight_matrix().T) + self.biases
        y = out.astype(DTYPE).reshape(n, oh, ow, self.out_channels)
        y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
        cache = {"patches": flat, "input_shape": x.shape, "out_hw": (oh, ow)}
        return y, cache

    def backward(self, cache: dict, grad_y: Tensor) -> tuple[Tensor, ParamGrads]:
        n, c, h, w = cache["input_shape"]
        oh, ow = cache["out_hw"]
        if grad_y.shape != (n, self.out_channels, oh, ow):
            raise ValueError(
                f"grad shape {grad_y.shape} != output shape {(n, self.out_channels, oh, ow)}"
            )
        g = grad_y.transpose(0, 2, 3, 1).reshape(n * oh * ow, self.out_channels)
        patches = cache["patches"]
        grad_dense = _mm64(g.T, patches)
        grad_w = grad_dense[self.scatter_rows, self.scatter_cols].astype(DTYPE)
        grad_b = g.sum(axis=0, dtype=np.float64).astype(DTYPE)
        grad_rows = _mm64(g, self.dense_weight_matrix()).astype(DTYPE)
        grad_x = row2im(grad_rows, (n, c, h, w), self.field_shape.height,
                        self.field_shape.width, self.stride, self.padding)
        return grad_x, ParamGrads(grad_w, grad_b)


class SparseDenseLayer:
    """Affine layer restricted to a fixed boolean edge mask.

    The flat weight vector follows the row-major order of the true entries of
    ``mask`` (shape ``[in_features, out_features]``).  Biases are unmasked.
    """

    def __init__(
        self,
        in_features: int,
        out_features: int,
        mask: np.ndarray,
        weights: np.ndarray,
        biases: np.ndarray,
    ) -> None:
        if in_features < 1 or out_features < 1:
            raise ValueError("feature counts must be positive")
        mask = np.array(mask, dtype=bool)
        if mask.shape != (in_features, out_features):
            raise ValueError(
                f"mask shape {mask.shape} != ({in_features}, {out_features})"
            )
        if not mask.any(axis=0).all():
            raise ValueError("every output unit needs at least one incoming connection")
        mask.setflags(write=False)
        self.in_features = in_features
        self.out_features = out_features
        self.mask = mask

        weights = np.asarray(weights, dtype=DTYPE).ravel()
        biases = np.asarray(biases, dtype=DTYPE).ravel()
        nnz = int(mask.sum())
        if weights.size != nnz:
            raise ValueError(f"expected {nnz} weights for this mask, got {weights.size}")
        if biases.size != out_features:
            raise ValueError(f"expected {out_features} biases, got {biases.size}")
        self.weights = weights
        self.biases = biases

    @classmethod
    def with_glorot_init(
        cls, in_features: int, out_features: int, mask: np.ndarray,
        gen: np.random.Generator,
    ) -> "SparseDenseLayer":
        mask = np.asarray(mask, dtype=bool)
        nnz = int(mask.sum())
        fan_in = nnz / out_features  # mean unmasked incoming per unit
        fan_out = nnz / in_features
        b = glorot_bound(fan_in, fan_out)
        weights = gen.uniform(-b, b, size=nnz).astype(DTYPE)
        biases = np.zeros(out_features, dtype=DTYPE)
        return cls(in_features, out_features, mask, weights, biases)

    @property
    def param_count(self) -> int:
        return self.weights.size + self.biases.size

    def dense_weight_matrix(self) -> np.ndarray:
        dense = np.zeros((self.in_features, self.out_features), dtype=DTYPE)
        dense[self.mask] = self.weights
        return dense

    def forward(self, x: Tensor) -> tuple[Tensor, dict]:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(
                f"expected input [batch, {self.in_features}], got {x.shape}"
            )
        y = (_mm64(x, self.dense_weight_matrix()) + self.biases).astype(DTYPE)
        return y, {"x": x}

    def backward(self, cache: dict, grad_y: Tensor) -> tuple[Tensor, ParamGrads]:
        x = cache["x"]
        if grad_y.shape != (x.shape[0], self.out_features):
            raise ValueError(
                f"grad shape {grad_y.shape} != output shape {(x.shape[0], self.out_features)}"
            )
        grad_dense = _mm64(x.T, grad_y)
        grad_w = grad_dense[self.mask].astype(DTYPE)
        grad_b = grad_y.sum(axis=0, dtype=np.float64).astype(DTYPE)
        grad_x = _mm64(grad_y, self.dense_weight_matrix().T).astype(DTYPE)
        return grad_x, ParamGrads(grad_w, grad_b)


class ReluLayer:
    def forward(self, x: Tensor) -> tuple[Tensor, dict]:
        y = np.maximum(x, 0)
        return y, {"active": x > 0}

    def backward(self, cache: dict, grad_y: Tensor) -> tuple[Tensor, None]:
        return np.where(cache["active"], grad_y, 0).astype(grad_y.dtype), None


class MaxPoolLayer:
    """Max pooling over square windows; trailing remainder cells are dropped."""

    def __init__(self, window: int, stride: int | None = None) -> None:
        if window < 1:
            raise ValueError(f"window must be >= 1, got {window}")
        self.window = window
        self.stride = window if stride is None else stride
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")

    def output_shape(self, input_shape: tuple[int, int, int]) -> tuple[int, int, int]:
        c, h, w = input_shape
        oh = (h - self.window) // self.stride + 1
        ow = (w - self.window) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ValueError(f"pool window {self.window} does not fit input {h}x{w}")
        return c, oh, ow

    def forward(self, x: Tensor) -> tuple[Tensor, dict]:
        n = x.shape[0]
        c, oh, ow = self.output_shape(x.shape[1:])
        best = np.full((n, c, oh, ow), -np.inf, dtype=x.dtype)
        argoff = np.zeros((n, c, oh, ow), dtype=np.int32)
        # First strictly-greater value wins, so ties break to the earliest
        # window offset in row-major order.
        for i in range(self.window):
            for j in range(self.window):
                sl = x[:, :, i : i + self.stride * oh : self.stride,
                       j : j + self.stride * ow : self.stride]
                better = sl > best
                best = np.where(better, sl, best)
                argoff = np.where(better, np.int32(i * self.window + j), argoff)
        return best, {"argoff": argoff, "input_shape": x.shape}

    def backward(self, cache: dict, grad_y: Tensor) -> tuple[Tensor, None]:
        n, c, h, w = cache["input_shape"]
        argoff = cache["argoff"]
        if grad_y.shape != argoff.shape:
            raise ValueError(f"grad shape {grad_y.shape} != output shape {argoff.shape}")
        oh, ow = argoff.shape[2:]
        grad_x = np.zeros((n, c, h, w), dtype=grad_y.dtype)
        for i in range(self.window):
            for j in range(self.window):
                hit = argoff == i * self.window + j
                view = grad_x[:, :, i : i + self.stride * oh : self.stride,
                              j : j + self.stride * ow : self.stride]
                # += handles overlapping windows (stride < window)
                view += np.where(hit, grad_y, 0)
        return grad_x, None


class FlattenLayer:
    def forward(self, x: Tensor) -> tuple[Tensor, dict]:
        return np.ascontiguousarray(x.reshape(x.shape[0], -1)), {"shape": x.shape}

    def backward(self, cache: dict, grad_y: Tensor) -> tuple[Tensor, None]:
        return grad_y.reshape(cache["shape"]), None


def relu_forward(x: Tensor) -> tuple[Tensor, dict]:
    return ReluLayer().forward(x)


def relu_backward(cache: dict, grad_y: Tensor) -> Tensor:
    return ReluLayer().backward(cache, grad_y)[0]


def maxpool_forward(x: Tensor, window: int, stride: int | None = None):
    return MaxPoolLayer(window, stride).forward(x)


def maxpool_backward(cache: dict, grad_y: Tensor, window: int,
                     stride: int | None = None) -> Tensor:
    return MaxPoolLayer(window, stride).backward(cache, grad_y)[0]


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> tuple[float, Tensor]:
    """Mean cross-entropy of softmax(logits) against integer labels.

    Returns the scalar loss and the gradient with respect to the logits.
    """
    if logits.ndim != 2:
        raise ValueError(f"logits must be [batch, classes], got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return loss, (grad / n).astype(DTYPE)
