#!/usr/bin/env python3
"""
Layerwise SNN Fine-Tuning
Couples ANN activations with SNN instantaneous rates layer by layer and
descends the per-layer L2 divergence with exact spike-time gradients.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from ann_core import MLPParams, ann_forward
from conversion import normalize_weights, prune
from ttfs_network import (
    DEFAULT_RATE_CAP,
    EncodingConfig,
    SpikeTimeVector,
    TTFSLayer,
    TTFSNetwork,
    causal_mask,
    instantaneous_rates,
    itl_encode,
    layer_forward_continuous,
)

logger = logging.getLogger(__name__)

MU_EPSILON = 1e-9
LOG_COLUMNS = ["iteration", "layer", "mean_l2", "samples"]


class FinetuneDivergenceError(RuntimeError):
    """Layer loss became non-finite during fine-tuning"""


# ============================================================================
# DATA STRUCTURES
# ============================================================================

@dataclass
class FinetuneConfig:
    n: int = 100
    beta: float = 0.99
    eta: float = 10.0
    epsilon: float = 0.001
    K: int = 100
    rate_cap: float = DEFAULT_RATE_CAP
    error_scaled_step: bool = False
    skip_layers: List[int] = field(default_factory=list)
    progress: bool = False

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.K < 0:
            raise ValueError(f"K must be non-negative, got {self.K}")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")
        if self.n < 1:
            raise ValueError(f"n must be at least 1, got {self.n}")


@dataclass
class LayerCoupling:
    """One layer's view of one sample: ANN activations against SNN rates"""
    activations: np.ndarray
    input_times: SpikeTimeVector
    times: SpikeTimeVector
    rates: np.ndarray
    causal: np.ndarray
    mu: np.ndarray

    @classmethod
    def build(cls, layer: TTFSLayer, activations: np.ndarray, input_times: SpikeTimeVector,
              times: SpikeTimeVector, rate_cap: float = DEFAULT_RATE_CAP) -> "LayerCoupling":
        causal = causal_mask(input_times, times)
        # mu_i = b_i + sum of causal weights
        mu = layer.biases + np.where(causal, layer.weights, 0.0).sum(axis=0)
        return cls(
            activations=np.asarray(activations, dtype=float),
            input_times=input_times,
            times=times,
            rates=instantaneous_rates(times, rate_cap),
            causal=causal,
            mu=mu,
        )

    @property
    def loss(self) -> float:
        return layer_loss(self.activations, self.rates)


@dataclass
class FinetuneResult:
    network: TTFSNetwork
    log: List[Dict[str, Any]] = field(default_factory=list)
    initial_layer_losses: List[float] = field(default_factory=list)
    final_layer_losses: List[float] = field(default_factory=list)
    iterations_run: int = 0
    clamped_gradients: int = 0

    def log_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.log, columns=LOG_COLUMNS)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'iterations_run': self.iterations_run,
            'initial_layer_losses': [float(v) for v in self.initial_layer_losses],
            'final_layer_losses': [float(v) for v in self.final_layer_losses],
            'clamped_gradients': self.clamped_gradients,
        }


# ============================================================================
# LOSS AND GRADIENTS
# ============================================================================

def layer_loss(a: np.ndarray, r: np.ndarray) -> float:
    """L = 1/2 * sum (a - r)^2"""
    a = np.asarray(a, dtype=float)
    r = np.asarray(r, dtype=float)
    if a.shape != r.shape:
        raise ValueError(f"activation shape {a.shape} != rate shape {r.shape}")
    return 0.5 * float(np.sum((a - r) ** 2))


def spike_time_grad(coupling: LayerCoupling, i: int, j: int) -> float:
    """dt_i/dw_ij = (t_j - t_i) / mu_i for causal j; 0 otherwise"""
    t_i = coupling.times.times[i]
    if not np.isfinite(t_i) or not coupling.causal[j, i]:
        return 0.0
    mu = coupling.mu[i]
    if abs(mu) < MU_EPSILON:
        logger.debug(f"|mu| below {MU_EPSILON} for neuron {i}, gradient clamped to 0")
        return 0.0
    return float((coupling.input_times.times[j] - t_i) / mu)


def spike_time_bias_grad(coupling: LayerCoupling, i: int) -> float:
    """dt_i/db_i = -t_i / mu_i"""
    t_i = coupling.times.times[i]
    mu = coupling.mu[i]
    if not np.isfinite(t_i) or abs(mu) < MU_EPSILON:
        return 0.0
    return float(-t_i / mu)


def loss_gradients(coupling: LayerCoupling, rate_cap: float = DEFAULT_RATE_CAP
                   ) -> Tuple[np.ndarray, np.ndarray, int]:
    """dL/dW [fan_in x fan_out], dL/db and the number of neurons clamped for tiny mu"""
    t_out = coupling.times.times
    t_in = coupling.input_times.times
    # dL/dt_i = (a_i - r_i) / t_i^2, zero where the rate is capped or absent
    valid = np.isfinite(t_out) & (t_out > 0)
    valid &= np.where(valid, 1.0 / np.where(valid, t_out, 1.0), np.inf) < rate_cap
    tiny = valid & (np.abs(coupling.mu) < MU_EPSILON)
    valid &= ~tiny

    dL_dt = np.zeros(t_out.size)
    safe_t = np.where(valid, t_out, 1.0)
    safe_mu = np.where(valid, coupling.mu, 1.0)
    dL_dt[valid] = (coupling.activations[valid] - coupling.rates[valid]) / safe_t[valid] ** 2

    mask = coupling.causal & valid[None, :]
    delta = np.where(mask, np.where(np.isfinite(t_in), t_in, 0.0)[:, None] - safe_t[None, :], 0.0)
    dW = delta / safe_mu[None, :] * dL_dt[None, :]
    db = np.where(valid, -safe_t / safe_mu, 0.0) * dL_dt
    return dW, db, int(tiny.sum())


# ============================================================================
# TRAINING LOOP
# ============================================================================

def _snn_forward_times(layers: Sequence[TTFSLayer], inp: SpikeTimeVector,
                       t_end: float) -> List[SpikeTimeVector]:
    times = [inp]
    for layer in layers:
        out, _ = layer_forward_continuous(times[-1], layer, t_end=t_end)
        times.append(out)
    return times


def finetune(ann: MLPParams, snn: TTFSNetwork, inputs: np.ndarray, cfg: FinetuneConfig,
             encoding: Optional[EncodingConfig] = None) -> FinetuneResult:
    """Prune, normalize, then descend the layerwise ANN/SNN divergence on the continuous simulator"""
    encoding = encoding or EncodingConfig()
    if ann.architecture != snn.architecture:
        raise ValueError(f"ANN {ann.architecture} and SNN {snn.architecture} architectures differ")
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))

    normalized, _ = normalize_weights(prune(ann, cfg.beta), inputs)
    layers = [TTFSLayer(dense.weights.copy(), dense.biases.copy(), snn_layer.threshold)
              for dense, snn_layer in zip(normalized.layers, snn.layers)]
    activations = ann_forward(normalized, inputs).activations
    encoded = [itl_encode(x, encoding) for x in inputs]
    result = FinetuneResult(network=snn)
    n_layers = len(layers)

    logger.info(f"Fine-tuning {snn.architecture} on {len(inputs)} samples "
                f"(eta={cfg.eta}, epsilon={cfg.epsilon}, K={cfg.K}, beta={cfg.beta})")

    for k in tqdm(range(cfg.K), desc="finetune", disable=not cfg.progress):
        errors = [[] for _ in range(n_layers)]
        for s, inp in enumerate(encoded):
            times = _snn_forward_times(layers, inp, encoding.horizon)
            couplings = [LayerCoupling.build(layers[q], activations[q][s], times[q], times[q + 1],
                                             cfg.rate_cap) for q in range(n_layers)]
            for q, coupling in enumerate(couplings):
                error = coupling.loss
                if not np.isfinite(error):
                    raise FinetuneDivergenceError(
                        f"non-finite loss in layer {q} at iteration {k}, sample {s}")
                errors[q].append(error)
                if q in cfg.skip_layers or error <= cfg.epsilon:
                    continue
                dW, db, clamped = loss_gradients(coupling, cfg.rate_cap)
                result.clamped_gradients += clamped
                if cfg.error_scaled_step:
                    dW, db = dW * error, db * error
                layers[q].weights -= cfg.eta * dW
                layers[q].biases -= cfg.eta * db

        means = [float(np.mean(e)) for e in errors]
        if k == 0:
            result.initial_layer_losses = means
        result.final_layer_losses = means
        result.iterations_run = k + 1
        for q, mean in enumerate(means):
            result.log.append({'iteration': k, 'layer': q, 'mean_l2': mean, 'samples': len(encoded)})
        logger.debug(f"iteration {k}: layer losses {[round(m, 6) for m in means]}")

        if not all(np.all(np.isfinite(layer.weights)) and np.all(np.isfinite(layer.biases))
                   for layer in layers):
            raise FinetuneDivergenceError(f"non-finite weights after iteration {k}")
        if float(np.mean(means)) <= cfg.epsilon:
            break

    if result.clamped_gradients:
        logger.warning(f"{result.clamped_gradients} neuron gradients clamped to 0 (|mu| < {MU_EPSILON})")

    result.network = TTFSNetwork(layers, ticks_per_unit=snn.ticks_per_unit,
                                 potential_bits=snn.potential_bits,
                                 accumulator_bits=snn.accumulator_bits)
    logger.info(f"✅ Fine-tuning finished after {result.iterations_run} iterations, "
                f"final layer losses {[round(m, 6) for m in result.final_layer_losses]}")
    return result


def train_network(ann: MLPParams, snn: TTFSNetwork, inputs: np.ndarray, cfg: FinetuneConfig,
                  encoding: Optional[EncodingConfig] = None) -> TTFSNetwork:
    """Fine-tuned float network; the integer image is re-derived by the caller"""
    return finetune(ann, snn, inputs, cfg, encoding).network


def write_finetune_log(result: FinetuneResult, path: Union[str, Path]) -> Path:
    path = Path(path)
    result.log_frame().to_csv(path, index=False, float_format="%.10g")
    return path
