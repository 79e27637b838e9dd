"""Sparsely-connected deep networks realized from random graphs.

Connectivity masks are drawn once from spatial probability models, stay fixed
through training, and let convolution run as a sparse matrix dot product that
skips the missing connections.
"""

from .data_io import LabeledDataset, load_cifar10_binary, load_idx, resize_to, subset, synth_blobs
from .layers import (
    MaxPoolLayer,
    ReluLayer,
    SparseConvLayer,
    SparseDenseLayer,
    softmax_cross_entropy,
)
from .network import (
    ConvSpec,
    DenseSpec,
    NetworkSpec,
    PoolSpec,
    RealizedNetwork,
    ReluSpec,
    TrainConfig,
    TrainReport,
    lenet5_stochastic_spec,
    realize,
    train,
)
from .random_graph import (
    ConnectivityModel,
    FieldShape,
    MaskRealizationError,
    ModelKind,
    ReceptiveFieldMask,
    SparsityTarget,
    gaussian_model,
    model_probability,
    realize_dense_mask,
    realize_feature_mask,
    realize_mask,
    uniform_model,
)

__version__ = "0.1.0"

__all__ = [
    "ConnectivityModel",
    "ConvSpec",
    "DenseSpec",
    "FieldShape",
    "LabeledDataset",
    "MaskRealizationError",
    "MaxPoolLayer",
    "ModelKind",
    "NetworkSpec",
    "PoolSpec",
    "RealizedNetwork",
    "ReceptiveFieldMask",
    "ReluLayer",
    "ReluSpec",
    "SparseConvLayer",
    "SparseDenseLayer",
    "SparsityTarget",
    "TrainConfig",
    "TrainReport",
    "gaussian_model",
    "lenet5_stochastic_spec",
    "load_cifar10_binary",
    "load_idx",
    "model_probability",
    "realize",
    "realize_dense_mask",
    "realize_feature_mask",
    "realize_mask",
    "resize_to",
    "softmax_cross_entropy",
    "subset",
    "synth_blobs",
    "train",
    "uniform_model",
]
