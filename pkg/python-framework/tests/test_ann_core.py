import struct

import numpy as np
import pytest

from ann_core import (
    DenseLayer,
    FormatError,
    MLPParams,
    TrainerConfig,
    TrainingDivergenceError,
    TrainingReport,
    ann_forward,
    ann_train_sgd,
    evaluate_accuracy,
    init_params,
    load_mnist,
    load_params,
    loss_and_gradients,
    parse_architecture,
    read_idx,
    record_max_activations,
    save_params,
    write_idx,
)


def blobs(n=200, seed=0):
    """Two well separated clusters in four dimensions"""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    X = rng.normal(0.0, 0.1, (n, 4)) + np.where(y[:, None] == 1, 0.8, 0.2)
    return np.clip(X, 0.0, 1.0), y


class TestArchitecture:
    def test_parse(self):
        assert parse_architecture("784-300-300-10") == [784, 300, 300, 10]
        assert parse_architecture([4, 2]) == [4, 2]

    @pytest.mark.parametrize("bad", ["784", "4-0-2", ""])
    def test_parse_invalid(self, bad):
        with pytest.raises(ValueError):
            parse_architecture(bad)

    def test_params_must_chain(self):
        with pytest.raises(ValueError):
            MLPParams([DenseLayer(np.ones((4, 3)), np.zeros(3)), DenseLayer(np.ones((2, 1)), np.zeros(1))])

    def test_params_reject_nan(self):
        with pytest.raises(ValueError):
            MLPParams([DenseLayer(np.array([[np.nan]]), np.zeros(1))])


class TestForward:
    def setup_method(self):
        self.params = MLPParams([
            DenseLayer(np.array([[1.0, -1.0], [0.5, 2.0]]), np.array([0.0, 0.1])),
            DenseLayer(np.array([[1.0], [-1.0]]), np.array([0.2])),
        ])

    def test_relu_forward(self):
        record = ann_forward(self.params, np.array([1.0, 1.0]))
        np.testing.assert_allclose(record.activations[0], [1.5, 1.1])
        np.testing.assert_allclose(record.logits, [0.6])
        np.testing.assert_allclose(record.activations[1], [0.6])
        assert record.prediction == 0

    def test_batch_forward(self):
        record = ann_forward(self.params, np.array([[1.0, 1.0], [0.0, 0.0]]))
        assert record.logits.shape == (2, 1)
        np.testing.assert_allclose(record.activations[0][1], [0.0, 0.1])

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            ann_forward(self.params, np.zeros(3))

    def test_max_activations(self):
        lam = record_max_activations(self.params, np.array([[1.0, 1.0], [0.0, 0.0]]))
        np.testing.assert_allclose(lam, [1.5, 0.6])


def test_backprop_matches_finite_differences():
    rng = np.random.default_rng(7)
    params = init_params([5, 4, 3], rng)
    for layer in params.layers:
        layer.biases += rng.normal(0, 0.1, layer.fan_out)
    X = rng.uniform(0, 1, (6, 5))
    y = rng.integers(0, 3, 6)
    _, grads = loss_and_gradients(params, X, y)

    h = 1e-6
    for l, layer in enumerate(params.layers):
        for (i, j) in [(0, 0), (layer.fan_in - 1, layer.fan_out - 1), (1, 2)]:
            original = layer.weights[i, j]
            layer.weights[i, j] = original + h
            plus, _ = loss_and_gradients(params, X, y)
            layer.weights[i, j] = original - h
            minus, _ = loss_and_gradients(params, X, y)
            layer.weights[i, j] = original
            assert grads[l][0][i, j] == pytest.approx((plus - minus) / (2 * h), abs=1e-4)


class TestTraining:
    def test_learns_separable_data(self):
        X, y = blobs()
        report = TrainingReport()
        params = ann_train_sgd((X, y), "4-8-2", TrainerConfig(lr=0.5, epochs=30, batch=16, seed=1),
                               test_set=(X, y), report=report)
        assert report.epoch_losses[-1] < report.epoch_losses[0]
        assert evaluate_accuracy(params, X, y) > 0.9
        assert report.test_accuracy == pytest.approx(evaluate_accuracy(params, X, y))
        assert 'training_time_seconds' not in report.to_dict()

    def test_same_seed_same_weights(self):
        X, y = blobs()
        hyper = TrainerConfig(lr=0.1, epochs=2, batch=32, seed=5)
        a = ann_train_sgd((X, y), "4-6-2", hyper)
        b = ann_train_sgd((X, y), "4-6-2", hyper)
        for la, lb in zip(a.layers, b.layers):
            np.testing.assert_array_equal(la.weights, lb.weights)

    def test_divergence_raises(self):
        X, y = blobs(64)
        with pytest.raises(TrainingDivergenceError):
            ann_train_sgd((X * 1e200, y), "4-8-2", TrainerConfig(lr=1e10, epochs=3, batch=8))

    def test_width_mismatch(self):
        X, y = blobs()
        with pytest.raises(ValueError):
            ann_train_sgd((X, y), "5-2", TrainerConfig(epochs=1))


class TestIdx:
    def test_mnist_directory_with_gzip(self, tmp_path):
        images = np.arange(3 * 28 * 28, dtype=np.uint32).reshape(3, 28, 28) % 256
        write_idx(images, tmp_path / "t10k-images-idx3-ubyte.gz")
        write_idx(np.array([7, 2, 1]), tmp_path / "t10k-labels-idx1-ubyte")
        X, y = load_mnist(tmp_path, "test", limit=2)
        assert X.shape == (2, 784)
        assert X.max() <= 1.0 and X.min() >= 0.0
        assert X[0, 255] == pytest.approx(1.0)
        assert y.tolist() == [7, 2]

    def test_wrong_magic(self, tmp_path):
        path = write_idx(np.array([1, 2, 3]), tmp_path / "labels")
        with pytest.raises(FormatError):
            read_idx(path, 0x00000803)

    def test_truncated(self, tmp_path):
        path = tmp_path / "short"
        path.write_bytes(struct.pack(">II", 0x00000801, 10) + b"\x01\x02")
        with pytest.raises(FormatError):
            read_idx(path, 0x00000801)

    def test_missing_files(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_mnist(tmp_path, "train")


class TestParamFile:
    def setup_method(self):
        self.params = init_params([6, 4, 2], np.random.default_rng(0))

    def test_reload_preserves_float32_values(self, tmp_path):
        path = save_params(self.params, tmp_path / "ann.mlpw")
        loaded = load_params(path)
        assert loaded.architecture == [6, 4, 2]
        for a, b in zip(self.params.layers, loaded.layers):
            np.testing.assert_array_equal(a.weights.astype(np.float32), b.weights)
        assert path.read_bytes()[:4] == b"MLPW"

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.mlpw"
        path.write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(FormatError):
            load_params(path)

    def test_bad_version(self, tmp_path):
        data = bytearray(save_params(self.params, tmp_path / "a.mlpw").read_bytes())
        data[4:8] = struct.pack("<I", 9)
        (tmp_path / "a.mlpw").write_bytes(bytes(data))
        with pytest.raises(FormatError):
            load_params(tmp_path / "a.mlpw")

    def test_trailing_bytes(self, tmp_path):
        path = save_params(self.params, tmp_path / "a.mlpw")
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError):
            load_params(path)

    @pytest.mark.parametrize("keep", [6, 20, 30])
    def test_truncated_header_and_body(self, tmp_path, keep):
        path = save_params(self.params, tmp_path / "a.mlpw")
        path.write_bytes(path.read_bytes()[:keep])
        with pytest.raises(FormatError):
            load_params(path)
