import numpy as np
import pandas as pd
import pytest

from ann_core import DenseLayer, MLPParams, ann_forward, init_params
from conversion import build_snn, convert_ann, normalize_weights, prune
from finetune import (
    FinetuneConfig,
    FinetuneDivergenceError,
    LayerCoupling,
    finetune,
    layer_loss,
    loss_gradients,
    spike_time_bias_grad,
    spike_time_grad,
    train_network,
    write_finetune_log,
)
from ttfs_network import (
    ABSENT,
    EncodingConfig,
    SpikeTimeVector,
    TTFSLayer,
    instantaneous_rates,
    itl_encode,
    layer_forward_continuous,
)


def two_input_layer(w1=0.5, w2=1.0):
    return TTFSLayer(np.array([[w1], [w2]]), np.array([0.0]))


def coupling_for(layer, input_times, activations):
    inp = SpikeTimeVector(input_times)
    out, _ = layer_forward_continuous(inp, layer)
    return LayerCoupling.build(layer, np.asarray(activations, dtype=float), inp, out)


class TestLayerLoss:
    def test_identical(self):
        assert layer_loss([0.3, 0.7], [0.3, 0.7]) == 0.0

    def test_examples(self):
        assert layer_loss([2.0], [1.0]) == 0.5
        assert layer_loss([1.0, 3.0], [0.0, 1.0]) == 2.5

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            layer_loss([1.0], [1.0, 2.0])


class TestSpikeTimeGradient:
    def test_two_input_crossing(self):
        coupling = coupling_for(two_input_layer(), [0.0, 0.2], [1.0])
        assert coupling.times.times[0] == pytest.approx(0.8)
        assert coupling.mu[0] == pytest.approx(1.5)
        assert spike_time_grad(coupling, 0, 1) == pytest.approx(-0.4)
        assert spike_time_grad(coupling, 0, 0) == pytest.approx(-0.8 / 1.5)
        assert spike_time_bias_grad(coupling, 0) == pytest.approx(-0.8 / 1.5)

    def test_matches_finite_difference(self):
        h = 1e-5
        times = []
        for delta in (h, -h):
            out, _ = layer_forward_continuous(SpikeTimeVector([0.0, 0.2]), two_input_layer(w2=1.0 + delta))
            times.append(out.times[0])
        fd = (times[0] - times[1]) / (2 * h)
        coupling = coupling_for(two_input_layer(), [0.0, 0.2], [1.0])
        assert spike_time_grad(coupling, 0, 1) == pytest.approx(fd, abs=1e-4)

    def test_non_causal_synapse(self):
        layer = TTFSLayer(np.array([[0.5], [1.0], [3.0]]), np.array([0.0]))
        coupling = coupling_for(layer, [0.0, 0.2, 0.9], [1.0])
        assert coupling.times.times[0] == pytest.approx(0.8)
        assert spike_time_grad(coupling, 0, 2) == 0.0

    def test_silent_neuron(self):
        coupling = coupling_for(two_input_layer(-0.5, -1.0), [0.0, 0.2], [1.0])
        assert coupling.times.times[0] == ABSENT
        dW, db, clamped = loss_gradients(coupling)
        assert not dW.any() and not db.any()
        assert clamped == 0

    def test_tiny_mu_is_clamped(self):
        times = SpikeTimeVector([0.5])
        coupling = LayerCoupling(activations=np.array([1.0]), input_times=SpikeTimeVector([0.0]),
                                 times=times, rates=instantaneous_rates(times),
                                 causal=np.array([[True]]), mu=np.array([0.0]))
        assert spike_time_grad(coupling, 0, 0) == 0.0
        dW, db, clamped = loss_gradients(coupling)
        assert clamped == 1
        assert not dW.any() and not db.any()

    def test_capped_rate_has_no_gradient(self):
        layer = TTFSLayer(np.array([[5.0]]), np.array([0.0]))
        coupling = coupling_for(layer, [0.0], [1.0])
        coupling.times = SpikeTimeVector([0.0])
        dW, _, _ = loss_gradients(coupling)
        assert dW[0, 0] == 0.0


def test_loss_gradient_matches_finite_difference():
    a = np.array([2.0])
    coupling = coupling_for(two_input_layer(), [0.0, 0.2], a)
    dW, db, _ = loss_gradients(coupling)
    # dL/dt = (a - r) / t^2 with r = 1/0.8
    assert dW[1, 0] == pytest.approx((2.0 - 1.25) / 0.64 * -0.4)

    h = 1e-6
    for j in range(2):
        losses = []
        for delta in (h, -h):
            w = [0.5, 1.0]
            w[j] += delta
            losses.append(coupling_for(two_input_layer(*w), [0.0, 0.2], a).loss)
        fd = (losses[0] - losses[1]) / (2 * h)
        assert dW[j, 0] == pytest.approx(fd, rel=1e-3, abs=1e-6)


def test_random_layer_gradients_against_finite_differences():
    rng = np.random.default_rng(11)
    h = 1e-5
    checked = 0
    for _ in range(20):
        layer = TTFSLayer(rng.uniform(-0.2, 1.0, (6, 4)), rng.uniform(0.0, 0.2, 4))
        inp = SpikeTimeVector(rng.uniform(0.0, 1.0, 6))
        a = rng.uniform(0.2, 1.0, 4)
        out, _ = layer_forward_continuous(inp, layer)
        coupling = LayerCoupling.build(layer, a, inp, out)
        dW, _, _ = loss_gradients(coupling)
        for i in np.flatnonzero(out.spiked):
            for j in range(6):
                perturbed = []
                for delta in (h, -h):
                    w = layer.weights.copy()
                    w[j, i] += delta
                    shifted = TTFSLayer(w, layer.biases)
                    o, _ = layer_forward_continuous(inp, shifted)
                    perturbed.append((LayerCoupling.build(shifted, a, inp, o).loss,
                                      np.array_equal(o.spiked, out.spiked)
                                      and np.array_equal(np.isfinite(o.times), np.isfinite(out.times))
                                      and np.array_equal(inp.times < o.times[i], coupling.causal[:, i])))
                if not (perturbed[0][1] and perturbed[1][1]):
                    continue
                fd = (perturbed[0][0] - perturbed[1][0]) / (2 * h)
                assert abs(dW[j, i] - fd) / max(1.0, abs(fd)) <= 1e-3
                checked += 1
    assert checked > 50


class TestFinetune:
    def setup_method(self):
        # one layer, two inputs; neuron 1 lags its ANN activation
        self.ann = MLPParams([DenseLayer(np.array([[1.0, 0.5], [1.0, 0.5]]), np.zeros(2))])
        self.snn = build_snn(self.ann.layers, 1.0)
        self.inputs = np.array([[1.0, 0.5]])
        self.encoding = EncodingConfig()

    def layer_error(self, net):
        normalized, _ = normalize_weights(self.ann, self.inputs)
        a = ann_forward(normalized, self.inputs[0]).activations[0]
        out, _ = layer_forward_continuous(itl_encode(self.inputs[0], self.encoding), net.layers[0],
                                          t_end=self.encoding.horizon)
        return layer_loss(a, instantaneous_rates(out))

    def test_initial_loss(self):
        result = finetune(self.ann, self.snn, self.inputs,
                          FinetuneConfig(K=1, eta=1e-3, epsilon=1e-12), self.encoding)
        assert result.initial_layer_losses[0] == pytest.approx(0.5 * (4 / 7 - 0.5) ** 2, rel=1e-6)

    def test_single_step_descends(self):
        cfg = FinetuneConfig(K=1, eta=1e-3, epsilon=1e-12)
        result = finetune(self.ann, self.snn, self.inputs, cfg, self.encoding)
        assert self.layer_error(result.network) < result.initial_layer_losses[0]

    def test_reduces_loss_by_a_third(self):
        result = finetune(self.ann, self.snn, self.inputs,
                          FinetuneConfig(K=3, eta=0.5, epsilon=1e-12), self.encoding)
        assert result.iterations_run == 3
        assert result.final_layer_losses[0] < 0.7 * result.initial_layer_losses[0]

    def test_zero_iterations_returns_normalized_network(self):
        net = train_network(self.ann, self.snn, self.inputs, FinetuneConfig(K=0), self.encoding)
        normalized, _ = normalize_weights(prune(self.ann, 0.99), self.inputs)
        np.testing.assert_array_equal(net.layers[0].weights, normalized.layers[0].weights)

    def test_already_converged(self):
        result = finetune(self.ann, self.snn, self.inputs,
                          FinetuneConfig(K=10, epsilon=1.0), self.encoding)
        normalized, _ = normalize_weights(self.ann, self.inputs)
        assert result.iterations_run == 1
        np.testing.assert_array_equal(result.network.layers[0].weights, normalized.layers[0].weights)

    def test_skipped_layers_are_untouched(self):
        result = finetune(self.ann, self.snn, self.inputs,
                          FinetuneConfig(K=3, eta=0.5, epsilon=1e-12, skip_layers=[0]), self.encoding)
        normalized, _ = normalize_weights(self.ann, self.inputs)
        assert result.iterations_run == 3
        np.testing.assert_array_equal(result.network.layers[0].weights, normalized.layers[0].weights)

    def test_literal_mode_scales_step_by_error(self):
        normalized, _ = normalize_weights(self.ann, self.inputs)
        start = normalized.layers[0].weights
        plain = finetune(self.ann, self.snn, self.inputs,
                         FinetuneConfig(K=1, eta=0.5, epsilon=1e-12), self.encoding)
        literal = finetune(self.ann, self.snn, self.inputs,
                           FinetuneConfig(K=1, eta=0.5, epsilon=1e-12, error_scaled_step=True), self.encoding)
        step_plain = plain.network.layers[0].weights - start
        step_literal = literal.network.layers[0].weights - start
        np.testing.assert_allclose(step_literal, step_plain * plain.initial_layer_losses[0], atol=1e-15)

    def test_divergence(self):
        with pytest.raises(FinetuneDivergenceError):
            finetune(self.ann, self.snn, self.inputs,
                     FinetuneConfig(K=5, eta=np.inf, epsilon=1e-12), self.encoding)

    def test_architecture_mismatch(self):
        other = build_snn([DenseLayer(np.ones((2, 3)), np.zeros(3))], 1.0)
        with pytest.raises(ValueError):
            finetune(self.ann, other, self.inputs, FinetuneConfig(K=1))

    def test_log_file(self, tmp_path):
        result = finetune(self.ann, self.snn, self.inputs,
                          FinetuneConfig(K=2, eta=0.5, epsilon=1e-12), self.encoding)
        frame = pd.read_csv(write_finetune_log(result, tmp_path / "finetune_log.csv"))
        assert list(frame.columns) == ["iteration", "layer", "mean_l2", "samples"]
        assert frame["iteration"].tolist() == [0, 1]
        assert (frame["samples"] == 1).all()
        assert result.to_dict()['iterations_run'] == 2


def total_layer_loss(ann, net, inputs, encoding):
    normalized, _ = normalize_weights(ann, inputs)
    activations = ann_forward(normalized, inputs).activations
    total = 0.0
    for s, x in enumerate(inputs):
        times = itl_encode(x, encoding)
        for q, layer in enumerate(net.layers):
            times, _ = layer_forward_continuous(times, layer, t_end=encoding.horizon)
            total += layer_loss(activations[q][s], instantaneous_rates(times))
    return total


class TestRandomNetworks:
    @pytest.mark.parametrize("seed", [2, 6, 8])
    def test_converted_network_loses_a_third_of_its_loss(self, seed):
        rng = np.random.default_rng(seed)
        ann = init_params([8, 6, 4], rng)
        inputs = rng.random((20, 8))
        snn, _ = convert_ann(ann, inputs)
        result = finetune(ann, snn, inputs, FinetuneConfig(n=20, eta=0.05, K=50))
        assert result.iterations_run == 50
        assert np.mean(result.final_layer_losses) <= 0.7 * np.mean(result.initial_layer_losses)

    @pytest.mark.parametrize("seed", range(100, 110))
    def test_small_step_does_not_increase_loss(self, seed):
        rng = np.random.default_rng(seed)
        ann = init_params([8, 6, 4], rng)
        inputs = rng.random((10, 8))
        encoding = EncodingConfig()
        normalized, _ = normalize_weights(ann, inputs)
        before = total_layer_loss(ann, build_snn(normalized.layers, 1.0), inputs, encoding)
        tuned = train_network(ann, build_snn(ann.layers, 1.0), inputs,
                              FinetuneConfig(K=1, eta=1e-3, epsilon=1e-12), encoding)
        assert total_layer_loss(ann, tuned, inputs, encoding) <= before + 1e-12


@pytest.mark.parametrize("kwargs", [{'eta': 0.0}, {'epsilon': 0.0}, {'K': -1}, {'beta': 0.0}, {'n': 0}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        FinetuneConfig(**kwargs)
