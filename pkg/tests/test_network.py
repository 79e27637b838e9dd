import io

import numpy as np
import pytest

import reference_dense as ref
from stochasticnet.data_io import synth_blobs
from stochasticnet.layers import FlattenLayer, SparseConvLayer, SparseDenseLayer
from stochasticnet.network import (
    ConvSpec,
    DenseSpec,
    NetworkSpec,
    PoolSpec,
    ReluSpec,
    SpecError,
    TrainConfig,
    TrainingDivergedError,
    infer_shapes,
    lenet5_stochastic_spec,
    realize,
    train,
)
from stochasticnet.random_graph import FieldShape, ModelKind, SparsityTarget

F32 = np.float32


def tiny_spec(sparsity=0.75, seed=5, input_shape=(1, 12, 12), classes=4):
    return NetworkSpec(
        (
            ConvSpec(6, FieldShape(3, 3), padding=1, sparsity=sparsity),
            ReluSpec(),
            PoolSpec(2),
            DenseSpec(16, sparsity=sparsity),
            ReluSpec(),
            DenseSpec(classes, sparsity=None),
        ),
        input_shape,
        seed,
    )


class TestSpec:
    def test_lenet5_layout(self):
        spec = lenet5_stochastic_spec(0.75, ModelKind.GAUSSIAN, seed=1)
        kinds = [type(d).__name__ for d in spec.layers]
        assert kinds == [
            "ConvSpec", "ReluSpec", "PoolSpec",
            "ConvSpec", "ReluSpec", "PoolSpec",
            "ConvSpec", "ReluSpec", "PoolSpec",
            "DenseSpec", "ReluSpec", "DenseSpec",
        ]
        convs = [d for d in spec.layers if isinstance(d, ConvSpec)]
        assert [c.filters for c in convs] == [32, 32, 64]
        assert all(c.field == FieldShape(5, 5) for c in convs)
        assert all(c.sparsity == 0.75 for c in convs)
        assert all(c.model is ModelKind.GAUSSIAN for c in convs)
        hidden, head = [d for d in spec.layers if isinstance(d, DenseSpec)]
        assert (hidden.units, hidden.sparsity) == (64, 0.75)
        assert (head.units, head.sparsity) == (10, None)

    def test_zero_sparsity_rejected(self):
        with pytest.raises(ValueError):
            lenet5_stochastic_spec(0.0, ModelKind.UNIFORM, seed=0)

    def test_mnist_variant(self):
        spec = lenet5_stochastic_spec(1.0, ModelKind.UNIFORM, seed=0,
                                      input_shape=(1, 28, 28))
        assert spec.input_shape == (1, 28, 28)
        realize(spec)  # composes

    def test_with_sparsity_spares_head(self):
        spec = lenet5_stochastic_spec(0.75, ModelKind.UNIFORM, seed=0).with_sparsity(0.5)
        convs = [d for d in spec.layers if isinstance(d, ConvSpec)]
        assert all(c.sparsity == 0.5 for c in convs)
        head = spec.layers[-1]
        assert head.sparsity is None

    def test_roundtrip_dict(self):
        spec = lenet5_stochastic_spec(0.6, ModelKind.GAUSSIAN, seed=9)
        assert NetworkSpec.from_dict(spec.to_dict()) == spec

    def test_incomposable_spec_names_layer_pair(self):
        spec = NetworkSpec(
            (ConvSpec(2, FieldShape(5, 5)), PoolSpec(8)), (1, 6, 6), 0
        )
        with pytest.raises(SpecError, match="layer 0 \\(conv\\) -> layer 1 \\(pool\\)"):
            infer_shapes(spec)

    def test_feature_dim_for_lenet5(self):
        spec = lenet5_stochastic_spec(1.0, ModelKind.UNIFORM, seed=0)
        shapes = infer_shapes(spec)
        assert shapes[8] == (64, 4, 4)  # after third pool
        net = realize(spec)
        x = np.zeros((1, 3, 32, 32), F32)
        assert net.extract_features(x).shape == (1, 64 * 4 * 4)


class TestRealize:
    def test_deterministic_masks(self):
        spec = tiny_spec()
        assert realize(spec).mask_checksum() == realize(spec).mask_checksum()

    def test_different_seeds_differ(self):
        a = realize(tiny_spec(seed=1)).mask_checksum()
        b = realize(tiny_spec(seed=2)).mask_checksum()
        assert a != b

    def test_full_sparsity_all_true(self):
        net = realize(tiny_spec(sparsity=1.0))
        realized, dense = net.connectivity_summary()
        assert realized == dense

    def test_binomial_mask_total(self):
        # 32+32+64 filters x 25 cells at 50% connectivity
        spec = lenet5_stochastic_spec(0.5, ModelKind.UNIFORM, seed=123)
        net = realize(spec)
        cells = sum(
            m.popcount
            for l in net.layers if isinstance(l, SparseConvLayer)
            for m in l.masks
        )
        n = 128 * 25
        band = 3 * np.sqrt(0.25 * n)
        assert abs(cells - 0.5 * n) < band

    def test_flatten_inserted(self):
        net = realize(tiny_spec())
        assert any(isinstance(l, FlattenLayer) for l in net.layers)

    def test_param_count_sums_layers(self):
        net = realize(tiny_spec())
        manual = sum(
            l.param_count for l in net.layers
            if isinstance(l, (SparseConvLayer, SparseDenseLayer))
        )
        assert net.param_count == manual


class TestForward:
    def test_zero_weights_give_zero_logits(self):
        net = realize(tiny_spec())
        for layer in net.layers:
            if isinstance(layer, (SparseConvLayer, SparseDenseLayer)):
                layer.weights[:] = 0
                layer.biases[:] = 0
        x = np.random.default_rng(0).random((3, 1, 12, 12)).astype(F32)
        assert not net.forward(x).any()

    def test_forward_is_pure(self):
        net = realize(tiny_spec())
        x = np.random.default_rng(1).random((2, 1, 12, 12)).astype(F32)
        np.testing.assert_array_equal(net.forward(x), net.forward(x))

    def test_dense_realization_matches_reference_composition(self):
        net = realize(tiny_spec(sparsity=1.0))
        dense = ref.from_realized(net)
        x = np.random.default_rng(2).random((4, 1, 12, 12)).astype(F32)
        np.testing.assert_allclose(net.forward(x), dense.forward(x), atol=1e-6)

    def test_shape_mismatch(self):
        net = realize(tiny_spec())
        with pytest.raises(ValueError, match="batch shape"):
            net.forward(np.zeros((1, 3, 12, 12), F32))


class TestExtractFeatures:
    def test_boundary_zero_is_input(self):
        net = realize(tiny_spec())
        x = np.random.default_rng(3).random((2, 1, 12, 12)).astype(F32)
        np.testing.assert_array_equal(net.extract_features(x, 0), x)

    def test_last_boundary_is_forward(self):
        net = realize(tiny_spec())
        x = np.random.default_rng(4).random((2, 1, 12, 12)).astype(F32)
        np.testing.assert_array_equal(
            net.extract_features(x, len(net.layers)), net.forward(x)
        )

    def test_default_is_flattened_features(self):
        net = realize(tiny_spec())
        x = np.random.default_rng(5).random((2, 1, 12, 12)).astype(F32)
        assert net.extract_features(x).shape == (2, 6 * 6 * 6)

    def test_bad_boundary(self):
        net = realize(tiny_spec())
        x = np.zeros((1, 1, 12, 12), F32)
        with pytest.raises(IndexError):
            net.extract_features(x, len(net.layers) + 1)
        with pytest.raises(IndexError):
            net.extract_features(x, -1)


class TestTrain:
    def setup_method(self):
        self.data = synth_blobs(4, 24, (1, 12, 12), seed=77)
        self.test = synth_blobs(4, 8, (1, 12, 12), seed=78)

    def test_zero_lr_keeps_weights_and_loss_constant(self):
        net = realize(tiny_spec())
        before = [l.weights.copy() for l in net.layers
                  if isinstance(l, (SparseConvLayer, SparseDenseLayer))]
        report = train(net, self.data,
                       TrainConfig(learning_rate=0.0, epochs=3, batch_size=8, seed=1))
        after = [l.weights for l in net.layers
                 if isinstance(l, (SparseConvLayer, SparseDenseLayer))]
        for b, a in zip(before, after):
            np.testing.assert_array_equal(b, a)
        losses = [e.train_loss for e in report.epochs]
        assert losses[0] == pytest.approx(losses[1]) == pytest.approx(losses[2])

    def test_separable_blobs_reach_zero_train_error(self):
        net = realize(tiny_spec(seed=3))
        report = train(net, self.data,
                       TrainConfig(learning_rate=0.05, epochs=50, batch_size=16, seed=2))
        assert min(e.train_error for e in report.epochs) == 0.0

    def test_mask_checksum_unchanged_by_training(self):
        net = realize(tiny_spec())
        checksum = net.mask_checksum()
        train(net, self.data, TrainConfig(learning_rate=0.05, epochs=10,
                                          batch_size=16, seed=3), test=self.test)
        assert net.mask_checksum() == checksum

    def test_loss_decreases_on_average(self):
        net = realize(tiny_spec(seed=11))
        report = train(net, self.data,
                       TrainConfig(learning_rate=0.05, epochs=5, batch_size=16, seed=4))
        assert report.epochs[4].train_loss < report.epochs[0].train_loss

    @pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
    def test_divergence_raises_with_epoch(self):
        net = realize(tiny_spec(seed=13))
        with pytest.raises(TrainingDivergedError, match="epoch"):
            train(net, self.data,
                  TrainConfig(learning_rate=1e9, epochs=5, batch_size=16, seed=5))

    def test_label_out_of_range(self):
        net = realize(tiny_spec(classes=2))
        with pytest.raises(ValueError, match="out of range"):
            train(net, self.data, TrainConfig(epochs=1, seed=0))

    def test_report_csv(self):
        net = realize(tiny_spec())
        report = train(net, self.data,
                       TrainConfig(learning_rate=0.05, epochs=2, batch_size=16, seed=6),
                       test=self.test)
        buf = io.StringIO()
        report.write_csv(buf)
        lines = buf.getvalue().strip().splitlines()
        assert lines[0] == "epoch,train_loss,train_error,test_error"
        assert len(lines) == 3
        assert lines[1].startswith("1,")

    def test_dense_training_trajectory_matches_reference(self):
        # fully-connected realization vs the independent dense implementation,
        # identical data order and identical initial weights
        spec = tiny_spec(sparsity=1.0, seed=21)
        net = realize(spec)
        dense = ref.from_realized(net)
        lr, momentum = 0.05, 0.9
        gen = np.random.default_rng(99)
        velocity = dense.new_velocity()
        images, labels = self.data.images, self.data.labels
        batches = [gen.integers(0, images.shape[0], size=8) for _ in range(20)]

        trainable = [l for l in net.layers
                     if isinstance(l, (SparseConvLayer, SparseDenseLayer))]
        vel = [(np.zeros_like(l.weights), np.zeros_like(l.biases)) for l in trainable]
        from stochasticnet.layers import softmax_cross_entropy

        for idx in batches:
            xb, yb = images[idx], labels[idx]
            logits, caches = net.forward_with_caches(xb)
            _, g = softmax_cross_entropy(logits, yb)
            grads = []
            for layer, cache in zip(reversed(net.layers), reversed(caches)):
                g, pg = layer.backward(cache, g)
                if pg is not None:
                    grads.append(pg)
            grads.reverse()
            for layer, (vw, vb), pg in zip(trainable, vel, grads):
                vw *= momentum
                vw -= lr * pg.weights
                layer.weights += vw
                vb *= momentum
                vb -= lr * pg.biases
                layer.biases += vb

            _, ref_grads = dense.forward_backward(xb, yb)
            dense.sgd_step(ref_grads, velocity, lr, momentum)

        x = images[:16]
        np.testing.assert_allclose(net.forward(x), dense.forward(x), atol=1e-4)

    def test_empty_dataset_rejected(self):
        net = realize(tiny_spec())

        class Empty:
            images = np.zeros((0, 1, 12, 12), F32)
            labels = np.zeros(0, np.int64)

        with pytest.raises(ValueError, match="empty"):
            train(net, Empty(), TrainConfig(epochs=1, seed=0))


class TestConfigValidation:
    @pytest.mark.parametrize("kwargs", [
        {"learning_rate": -0.1},
        {"momentum": 1.0},
        {"momentum": -0.2},
        {"batch_size": 0},
        {"epochs": 0},
    ])
    def test_bad_config(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    def test_sparsity_target_via_spec(self):
        with pytest.raises(ValueError):
            ConvSpec(4, sparsity=1.5)
        with pytest.raises(ValueError):
            DenseSpec(4, sparsity=0.0)
        SparsityTarget(0.5)  # fine
