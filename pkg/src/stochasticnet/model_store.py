"""Binary serialization of realized networks and extracted feature tensors.

Model files are little-endian with fixed-width fields, a canonical-JSON spec
header, packed mask bitsets, raw float32 parameter arrays, and a trailing
SHA-256 over everything that precedes it.  Saving the same network twice
produces identical bytes; see docs/formats.md for the field-by-field layout.
Writes go to a temp file in the target directory and are renamed into place.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .layers import FlattenLayer, MaxPoolLayer, ReluLayer, SparseConvLayer, SparseDenseLayer
from .network import ConvSpec, DenseSpec, NetworkSpec, PoolSpec, RealizedNetwork, ReluSpec
from .random_graph import MaskSeedRecord, ReceptiveFieldMask
from .tensor import DTYPE

MODEL_MAGIC = b"SNETMODL"
FEATURE_MAGIC = b"SNETFEAT"
FORMAT_VERSION = 1

_CONV_TAG = 1
_DENSE_TAG = 2


class ModelFormatError(ValueError):
    pass


def _canonical_spec_json(spec: NetworkSpec) -> bytes:
    return json.dumps(spec.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")


def _pack_array(buf: io.BytesIO, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr, dtype=DTYPE).tobytes()
    buf.write(struct.pack("<Q", len(data) // 4))
    buf.write(data)


def _pack_bits(buf: io.BytesIO, bits: np.ndarray) -> None:
    packed = np.packbits(bits.ravel()).tobytes()
    buf.write(struct.pack("<Q", bits.size))
    buf.write(packed)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self._data = data
        self._pos = 0

    def take(self, count: int) -> bytes:
        if self._pos + count > len(self._data):
            raise ModelFormatError("truncated model file")
        out = self._data[self._pos : self._pos + count]
        self._pos += count
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f32_array(self) -> np.ndarray:
        count = self.u64()
        raw = self.take(count * 4)
        return np.frombuffer(raw, dtype=DTYPE).copy()

    def bit_array(self, shape: tuple[int, ...]) -> np.ndarray:
        count = self.u64()
        if count != int(np.prod(shape)):
            raise ModelFormatError(
                f"mask has {count} bits, layer shape needs {int(np.prod(shape))}"
            )
        packed = np.frombuffer(self.take((count + 7) // 8), dtype=np.uint8)
        return np.unpackbits(packed, count=count).astype(bool).reshape(shape)

    def done(self) -> bool:
        return self._pos == len(self._data)


def dumps(net: RealizedNetwork) -> bytes:
    """Serialize a realized network to deterministic bytes."""
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    spec_json = _canonical_spec_json(net.spec)
    buf.write(struct.pack("<Q", len(spec_json)))
    buf.write(spec_json)
    buf.write(struct.pack("<Q", net.realization_seed & ((1 << 64) - 1)))

    param_layers = [
        l for l in net.layers if isinstance(l, (SparseConvLayer, SparseDenseLayer))
    ]
    buf.write(struct.pack("<I", len(param_layers)))
    for layer in param_layers:
        if isinstance(layer, SparseConvLayer):
            buf.write(struct.pack("<BI", _CONV_TAG, layer.out_channels))
            for mask in layer.masks:
                rec = mask.seed_record
                if rec is None:
                    buf.write(struct.pack("<BQI", 0, 0, 0))
                else:
                    buf.write(struct.pack("<BQI", 1, rec.seed, rec.draw_index))
                _pack_bits(buf, mask.bits)
            _pack_array(buf, layer.weights)
            _pack_array(buf, layer.biases)
        else:
            buf.write(struct.pack("<BII", _DENSE_TAG, layer.in_features, layer.out_features))
            _pack_bits(buf, layer.mask)
            _pack_array(buf, layer.weights)
            _pack_array(buf, layer.biases)

    payload = buf.getvalue()
    return payload + hashlib.sha256(payload).digest()


def _read_conv_block(r: _Reader, desc, in_channels: int) -> SparseConvLayer:
    out_channels = r.u32()
    if out_channels != desc.filters:
        raise ModelFormatError(
            f"block has {out_channels} filters, spec implies {desc.filters}"
        )
    masks = []
    for _ in range(out_channels):
        has_rec, seed, draw = struct.unpack("<BQI", r.take(13))
        bits = r.bit_array((desc.field.height, desc.field.width))
        rec = MaskSeedRecord(seed, draw) if has_rec else None
        masks.append(ReceptiveFieldMask(desc.field, bits, rec))
    weights = r.f32_array()
    biases = r.f32_array()
    return SparseConvLayer(in_channels, out_channels, desc.field, masks,
                           weights, biases, desc.stride, desc.padding)


def _read_dense_block(r: _Reader, desc, in_features: int) -> SparseDenseLayer:
    file_in, file_out = r.u32(), r.u32()
    if (file_in, file_out) != (in_features, desc.units):
        raise ModelFormatError(
            f"block is {file_in}x{file_out}, spec implies {in_features}x{desc.units}"
        )
    mask = r.bit_array((file_in, file_out))
    weights = r.f32_array()
    biases = r.f32_array()
    return SparseDenseLayer(file_in, file_out, mask, weights, biases)


def loads(data: bytes) -> RealizedNetwork:
    """Reconstruct a realized network from bytes produced by :func:`dumps`."""
    if len(data) < len(MODEL_MAGIC) + 4 + 32:
        raise ModelFormatError("file too short to be a model file")
    if data[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    version = struct.unpack_from("<I", data, len(MODEL_MAGIC))[0]
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported version {version} (expected {FORMAT_VERSION})")
    payload, digest = data[:-32], data[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise ModelFormatError("checksum mismatch: file is corrupt")

    r = _Reader(payload)
    r.take(len(MODEL_MAGIC) + 4)
    spec_len = r.u64()
    spec = NetworkSpec.from_dict(json.loads(r.take(spec_len).decode("utf-8")))
    realization_seed = struct.unpack("<Q", r.take(8))[0]
    layer_count = r.u32()
    expected = sum(isinstance(d, (ConvSpec, DenseSpec)) for d in spec.layers)
    if layer_count != expected:
        raise ModelFormatError(
            f"file has {layer_count} parameter layers, spec implies {expected}"
        )

    # Walk the spec exactly like realize() does, but source all parameter
    # state from the stored blocks instead of drawing it.
    tags = {ConvSpec: _CONV_TAG, DenseSpec: _DENSE_TAG}
    layers: list = []
    shape: tuple[int, ...] = spec.input_shape
    for desc in spec.layers:
        if isinstance(desc, DenseSpec) and len(shape) != 1:
            layers.append(FlattenLayer())
            shape = (int(np.prod(shape)),)
        if isinstance(desc, (ConvSpec, DenseSpec)):
            tag = r.u8()
            if tag != tags[type(desc)]:
                raise ModelFormatError("layer kind mismatch between blocks and spec")
        if isinstance(desc, ConvSpec):
            layer = _read_conv_block(r, desc, shape[0])
            layers.append(layer)
            shape = layer.output_shape(shape)
        elif isinstance(desc, PoolSpec):
            layer = MaxPoolLayer(desc.window, desc.stride)
            layers.append(layer)
            shape = layer.output_shape(shape)
        elif isinstance(desc, ReluSpec):
            layers.append(ReluLayer())
        elif isinstance(desc, DenseSpec):
            layers.append(_read_dense_block(r, desc, shape[0]))
            shape = (desc.units,)
    if not r.done():
        raise ModelFormatError("trailing bytes after the last layer block")
    return RealizedNetwork(layers, spec, realization_seed)


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(net: RealizedNetwork, path) -> None:
    atomic_write(path, dumps(net))


def load(path) -> RealizedNetwork:
    return loads(Path(path).read_bytes())


def save_features(features: np.ndarray, path) -> None:
    """Write a feature tensor: magic, version, ndim, dims, float32 payload."""
    arr = np.ascontiguousarray(features, dtype=DTYPE)
    buf = io.BytesIO()
    buf.write(FEATURE_MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.tobytes())
    atomic_write(path, buf.getvalue())


def load_features(path) -> np.ndarray:
    data = Path(path).read_bytes()
    header = len(FEATURE_MAGIC) + 8
    if len(data) < header or data[: len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise ModelFormatError("not a feature file (bad magic)")
    version, ndim = struct.unpack_from("<II", data, len(FEATURE_MAGIC))
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported version {version}")
    dims = struct.unpack_from(f"<{ndim}Q", data, header)
    start = header + 8 * ndim
    count = int(np.prod(dims))
    if len(data) != start + 4 * count:
        raise ModelFormatError("feature payload size does not match dims")
    return np.frombuffer(data[start:], dtype=DTYPE).reshape(dims).copy()
