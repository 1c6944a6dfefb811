#!/usr/bin/env python3
"""
ANN to TTFS-SNN Conversion
Data-driven weight normalization, magnitude pruning, fixed-point quantization
and construction of the spiking network, plus the converted-network file.
"""

import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ann_core import DenseLayer, FormatError, MLPParams, ann_forward, record_max_activations
from ttfs_network import (
    EncodingConfig,
    LayerQuant,
    NoDecisionError,
    SpikeTimeVector,
    TTFSLayer,
    TTFSNetwork,
    decode_first_spike,
    itl_encode,
    layer_forward_continuous,
    saturate,
)

logger = logging.getLogger(__name__)

TTFS_MAGIC = b"TTFS"
TTFS_VERSION = 1
FLAG_QUANTIZED = 0x1
FLAG_TICKS_PER_UNIT = 0x2
FLAG_QUANT_BITS = 0x4

THRESHOLD_GRID = (0.0625, 0.125, 0.25, 0.5, 1.0, 2.0, 4.0)

Thresholds = Union[float, Sequence[float]]


class ConversionError(ValueError):
    """The ANN cannot be converted under the requested settings"""


# ============================================================================
# DATA STRUCTURES
# ============================================================================

@dataclass
class NormalizationReport:
    lambdas: List[float] = field(default_factory=list)
    scale_factors: List[float] = field(default_factory=list)
    post_max_activations: List[float] = field(default_factory=list)
    sample_count: int = 0
    thresholds: List[float] = field(default_factory=list)
    calibration_agreement: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'lambdas': [float(v) for v in self.lambdas],
            'scale_factors': [float(v) for v in self.scale_factors],
            'post_max_activations': [float(v) for v in self.post_max_activations],
            'sample_count': self.sample_count,
            'thresholds': [float(v) for v in self.thresholds],
            'calibration_agreement': self.calibration_agreement,
        }


@dataclass
class QuantSpec:
    """Per-layer symmetric quantization; s = max|w| / (2^(bits-1) - 1)"""
    bits: int = 8
    rounding: str = "nearest_even"
    accumulator_bits: int = 16

    def __post_init__(self):
        if not 2 <= self.bits <= 16:
            raise ValueError(f"quantization width must lie in [2, 16] bits, got {self.bits}")
        if self.rounding != "nearest_even":
            raise ValueError(f"unsupported rounding mode: {self.rounding}")

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1


def _layers_of(params: Union[MLPParams, Sequence[DenseLayer]]) -> List[DenseLayer]:
    if params is None:
        return []
    return list(params.layers) if isinstance(params, MLPParams) else list(params)


def _thresholds_for(theta: Thresholds, count: int) -> List[float]:
    if isinstance(theta, (int, float, np.floating, np.integer)):
        return [float(theta)] * count
    thresholds = [float(t) for t in theta]
    if len(thresholds) != count:
        raise ConversionError(f"{len(thresholds)} thresholds for {count} layers")
    return thresholds


# ============================================================================
# NORMALIZATION AND PRUNING
# ============================================================================

def normalize_weights(params: MLPParams, samples: np.ndarray
                      ) -> Tuple[MLPParams, NormalizationReport]:
    """W^l <- W^l * lambda^(l-1) / lambda^l, b^l <- b^l / lambda^l with lambda^0 = 1"""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] == 0:
        raise ConversionError("normalization needs at least one sample")

    lambdas = record_max_activations(params, samples)
    for l, lam in enumerate(lambdas):
        if not lam > 0:
            raise ConversionError(
                f"layer {l} never activates on the {samples.shape[0]} normalization samples "
                f"(max activation {lam}); cannot normalize a dead layer")

    report = NormalizationReport(lambdas=list(lambdas), sample_count=samples.shape[0])
    layers = []
    previous = 1.0
    for layer, lam in zip(params.layers, lambdas):
        factor = previous / lam
        layers.append(DenseLayer(layer.weights * factor, layer.biases / lam))
        report.scale_factors.append(factor)
        previous = lam

    normalized = MLPParams(layers)
    report.post_max_activations = list(record_max_activations(normalized, samples))
    logger.info(f"Normalized {normalized.architecture_string}: lambdas "
                f"{[round(float(v), 4) for v in lambdas]}")
    return normalized, report


def prune(params: MLPParams, beta: float) -> MLPParams:
    """Zero floor((1 - beta) * count) smallest-magnitude weights in every layer"""
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    layers = []
    for layer in params.layers:
        weights = layer.weights.copy()
        drop = int(math.floor((1.0 - beta) * weights.size + 1e-9))
        if drop:
            order = np.argsort(np.abs(weights), axis=None, kind="stable")
            weights.flat[order[:drop]] = 0.0
        layers.append(DenseLayer(weights, layer.biases.copy()))
    return MLPParams(layers)


# ============================================================================
# QUANTIZATION
# ============================================================================

def quantize_layer(layer: DenseLayer, spec: QuantSpec) -> LayerQuant:
    """Integer weights and biases sharing one scale; threshold is filled in by build_snn"""
    peak = float(np.abs(layer.weights).max(initial=0.0))
    if peak == 0.0:
        logger.warning("Layer with all-zero weights, using unit quantization scale")
        peak = float(spec.qmax)
    scale = peak / spec.qmax

    q = np.clip(np.rint(layer.weights / scale), -spec.qmax, spec.qmax).astype(np.int64)

    raw_biases = np.rint(layer.biases / scale)
    biases = saturate(raw_biases, spec.accumulator_bits).astype(np.int64)
    clipped = int(np.sum(biases != raw_biases))
    if clipped:
        logger.warning(f"{clipped} quantized biases saturated to {spec.accumulator_bits} bits")

    return LayerQuant(bits=spec.bits, scale=scale, weights=q, biases=biases, threshold=0)


def quantize(params: Union[MLPParams, Sequence[DenseLayer]],
             spec: Optional[QuantSpec] = None) -> List[LayerQuant]:
    spec = spec or QuantSpec()
    return [quantize_layer(layer, spec) for layer in _layers_of(params)]


def threshold_ticks(theta: float, scale: float, ticks_per_unit: float) -> int:
    """theta_q = ceil(theta * ticks_per_unit / s); V gains A_q per tick in the integer domain"""
    exact = theta * ticks_per_unit / scale
    return int(math.ceil(exact * (1.0 - 1e-12)))


def max_ticks_per_unit(params: Union[MLPParams, Sequence[DenseLayer]],
                       spec: Optional[QuantSpec] = None,
                       theta: Thresholds = 1.0, potential_bits: int = 16) -> int:
    """Largest integer ticks-per-unit whose integer thresholds all fit the potential width"""
    spec = spec or QuantSpec()
    layers = _layers_of(params)
    thresholds = _thresholds_for(theta, len(layers))
    limit = 2 ** (potential_bits - 1) - 1
    best = None
    for lq, th in zip(quantize(layers, spec), thresholds):
        allowed = int(math.floor(limit * lq.scale / th * (1.0 + 1e-12)))
        best = allowed if best is None else min(best, allowed)
    if best is None or best < 1:
        raise ConversionError(
            f"no ticks-per-unit keeps theta_q within {potential_bits} bits; "
            f"widen the potential")
    return best


# ============================================================================
# THRESHOLD CALIBRATION
# ============================================================================

def _first_spike_hits(layers: Sequence[TTFSLayer], thresholds: Sequence[float],
                      inputs: Sequence[SpikeTimeVector], targets: Sequence[int],
                      horizon: float) -> int:
    hits = 0
    for times, target in zip(inputs, targets):
        for layer, theta in zip(layers, thresholds):
            times, _ = layer_forward_continuous(times, layer, theta, t_end=horizon)
        try:
            hits += int(decode_first_spike(times) == target)
        except NoDecisionError:
            pass
    return hits


def calibrate_thresholds(params: MLPParams, samples: np.ndarray,
                         encoding: Optional[EncodingConfig] = None,
                         grid: Sequence[float] = THRESHOLD_GRID, start: float = 1.0,
                         rounds: int = 2, max_samples: int = 200) -> Tuple[List[float], float]:
    """Per-layer firing thresholds for a normalized network.

    Coordinate search over ``grid``: each layer in turn takes the threshold that
    most often makes the first-spiking output neuron of the continuous network
    (simulated up to the encoding horizon) the ANN's argmax class. A threshold only
    moves on a strict improvement. Samples whose ANN output never activates are
    ignored. Returns the thresholds and the agreement rate they reach.
    """
    encoding = encoding or EncodingConfig()
    samples = np.atleast_2d(np.asarray(samples, dtype=float))[:max_samples]
    logits = np.atleast_2d(ann_forward(params, samples).logits)
    active = logits.max(axis=1) > 0
    targets = [int(t) for t in np.argmax(logits[active], axis=1)]
    inputs = [itl_encode(x, encoding) for x in samples[active]]

    layers = [TTFSLayer(d.weights, d.biases) for d in params.layers]
    thresholds = [float(start)] * len(layers)
    if not inputs:
        logger.warning("⚠️ No calibration sample activates the output layer, keeping uniform thresholds")
        return thresholds, 0.0

    horizon = encoding.horizon
    best = _first_spike_hits(layers, thresholds, inputs, targets, horizon)
    for r in range(rounds):
        improved = False
        for l in range(len(layers)):
            # layers before l keep their thresholds, so their spike times are reused
            prefix = inputs
            for layer, theta in zip(layers[:l], thresholds[:l]):
                prefix = [layer_forward_continuous(t, layer, theta, t_end=horizon)[0] for t in prefix]
            for theta in grid:
                if theta == thresholds[l]:
                    continue
                trial = thresholds[:l] + [float(theta)] + thresholds[l + 1:]
                hits = _first_spike_hits(layers[l:], trial[l:], prefix, targets, horizon)
                if hits > best:
                    best, thresholds, improved = hits, trial, True
        logger.debug(f"calibration round {r}: thresholds {thresholds}, {best}/{len(inputs)} agree")
        if not improved:
            break

    agreement = best / len(inputs)
    logger.info(f"Calibrated thresholds {thresholds} ({agreement:.1%} first-spike agreement "
                f"on {len(inputs)} samples)")
    return thresholds, agreement


# ============================================================================
# NETWORK CONSTRUCTION
# ============================================================================

def build_snn(params: Union[MLPParams, Sequence[DenseLayer]], theta: Thresholds = 1.0,
              quant: Optional[QuantSpec] = None, ticks_per_unit: float = 1.0,
              potential_bits: int = 16) -> TTFSNetwork:
    """TTFS network with threshold theta (one value, or one per layer); weights are expected normalized"""
    layers = _layers_of(params)
    if not layers:
        raise ConversionError("cannot build a spiking network from an empty network")
    thresholds = _thresholds_for(theta, len(layers))

    limit = 2 ** (potential_bits - 1) - 1
    built = []
    for l, (layer, th) in enumerate(zip(layers, thresholds)):
        lq = None
        if quant is not None:
            lq = quantize_layer(layer, quant)
            theta_q = threshold_ticks(th, lq.scale, ticks_per_unit)
            if theta_q > limit:
                raise ConversionError(
                    f"layer {l}: integer threshold {theta_q} exceeds the {potential_bits}-bit "
                    f"potential range; widen the potential or lower ticks_per_unit "
                    f"(currently {ticks_per_unit})")
            lq = replace(lq, threshold=theta_q)
        built.append(TTFSLayer(layer.weights.copy(), layer.biases.copy(), th, lq))

    net = TTFSNetwork(built, ticks_per_unit=float(ticks_per_unit),
                      potential_bits=potential_bits,
                      accumulator_bits=quant.accumulator_bits if quant else potential_bits)
    logger.info(f"Built TTFS network {net.architecture} (theta={thresholds}, "
                f"{'quantized ' + str(quant.bits) + '-bit' if quant else 'float'})")
    return net


def requantize(net: TTFSNetwork, quant: QuantSpec, clamp_ticks_per_unit: bool = True) -> TTFSNetwork:
    """Re-derive the integer image of a network whose float weights changed"""
    dense = [DenseLayer(layer.weights, layer.biases) for layer in net.layers]
    thresholds = [layer.threshold for layer in net.layers]
    ticks_per_unit = net.ticks_per_unit
    if clamp_ticks_per_unit:
        ceiling = max_ticks_per_unit(dense, quant, thresholds, net.potential_bits)
        if ticks_per_unit > ceiling:
            logger.warning(f"⚠️ ticks_per_unit {ticks_per_unit} reduced to {ceiling} after re-quantization")
            ticks_per_unit = ceiling
    return build_snn(dense, theta=thresholds, quant=quant, ticks_per_unit=ticks_per_unit,
                     potential_bits=net.potential_bits)


def convert_ann(params: MLPParams, samples: np.ndarray, theta: float = 1.0,
                quant: Optional[QuantSpec] = None, ticks_per_unit: float = 1.0,
                potential_bits: int = 16, clamp_ticks_per_unit: bool = True,
                encoding: Optional[EncodingConfig] = None, calibrate: bool = True,
                calibration_samples: int = 200
                ) -> Tuple[TTFSNetwork, NormalizationReport]:
    """normalize -> (calibrate thresholds) -> (clamp resolution) -> build

    Without calibration every layer gets ``theta``; with it, ``theta`` is the
    starting point of the per-layer search.
    """
    normalized, report = normalize_weights(params, samples)
    thresholds = [float(theta)] * len(normalized.layers)
    if calibrate:
        thresholds, report.calibration_agreement = calibrate_thresholds(
            normalized, samples, encoding, start=theta, max_samples=calibration_samples)
    report.thresholds = thresholds

    if quant is not None and clamp_ticks_per_unit:
        ceiling = max_ticks_per_unit(normalized, quant, thresholds, potential_bits)
        if ticks_per_unit > ceiling:
            logger.warning(f"⚠️ ticks_per_unit {ticks_per_unit} reduced to {ceiling} so "
                           f"integer thresholds fit {potential_bits} bits")
            ticks_per_unit = ceiling
    return build_snn(normalized, thresholds, quant, ticks_per_unit, potential_bits), report



# ============================================================================
# CONVERTED-NETWORK FILE
# ============================================================================

def _weight_dtype(bits: int) -> np.dtype:
    return np.dtype("<i1") if bits <= 8 else np.dtype("<i2")


def save_snn(net: TTFSNetwork, path: Union[str, Path]) -> Path:
    """TTFS little-endian: header, f32 ticks_per_unit, u32 weight bits when quantized, then per-layer records"""
    path = Path(path)
    quantized = net.quantized
    flags = FLAG_TICKS_PER_UNIT | (FLAG_QUANTIZED | FLAG_QUANT_BITS if quantized else 0)
    chunks = [TTFS_MAGIC, struct.pack("<III", TTFS_VERSION, len(net.layers), flags),
              struct.pack("<f", net.ticks_per_unit)]
    if quantized:
        bits = {layer.quant.bits for layer in net.layers}
        if len(bits) != 1:
            raise FormatError(f"layers quantized to different widths {sorted(bits)}")
        bits = bits.pop()
        chunks.append(struct.pack("<I", bits))
        weight_dtype = _weight_dtype(bits)
    for layer in net.layers:
        rows, cols = layer.weights.shape
        chunks.append(struct.pack("<IIf", rows, cols, layer.threshold))
        if quantized:
            q = layer.quant
            chunks.append(struct.pack("<fi", q.scale, q.threshold))
            chunks.append(q.weights.astype(weight_dtype).tobytes())
            chunks.append(q.biases.astype("<i4").tobytes())
        else:
            chunks.append(layer.weights.astype("<f4").tobytes())
            chunks.append(layer.biases.astype("<f4").tobytes())
    path.write_bytes(b"".join(chunks))
    logger.debug(f"Wrote TTFS network to {path}")
    return path


def load_snn(path: Union[str, Path], potential_bits: int = 16) -> TTFSNetwork:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != TTFS_MAGIC:
        raise FormatError(f"{path}: not a TTFS network file")
    try:
        version, count, flags = struct.unpack_from("<III", data, 4)
        if version != TTFS_VERSION:
            raise FormatError(f"{path}: unsupported TTFS version {version}")
        offset = 16
        ticks_per_unit = 1.0
        if flags & FLAG_TICKS_PER_UNIT:
            ticks_per_unit = struct.unpack_from("<f", data, offset)[0]
            offset += 4
        quantized = bool(flags & FLAG_QUANTIZED)
        bits = 8
        if quantized and flags & FLAG_QUANT_BITS:
            bits = struct.unpack_from("<I", data, offset)[0]
            offset += 4
            if not 2 <= bits <= 16:
                raise FormatError(f"{path}: unsupported weight width {bits}")
        weight_dtype = _weight_dtype(bits)

        layers = []
        for _ in range(count):
            rows, cols, theta = struct.unpack_from("<IIf", data, offset)
            offset += 12
            if quantized:
                scale, theta_q = struct.unpack_from("<fi", data, offset)
                scale = float(np.float32(scale))
                offset += 8
                q = np.frombuffer(data, dtype=weight_dtype, count=rows * cols, offset=offset)
                offset += weight_dtype.itemsize * rows * cols
                qb = np.frombuffer(data, dtype="<i4", count=cols, offset=offset)
                offset += 4 * cols
                lq = LayerQuant(bits=bits, scale=scale, weights=q.reshape(rows, cols).astype(np.int64),
                                biases=qb.astype(np.int64), threshold=int(theta_q))
                layers.append(TTFSLayer(lq.dequantized_weights(), lq.biases * scale, theta, lq))
            else:
                w = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=offset)
                offset += 4 * rows * cols
                b = np.frombuffer(data, dtype="<f4", count=cols, offset=offset)
                offset += 4 * cols
                layers.append(TTFSLayer(w.reshape(rows, cols).astype(float), b.astype(float), theta))
    except (struct.error, ValueError) as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"{path}: corrupt TTFS file ({e})") from e
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes")
    return TTFSNetwork(layers, ticks_per_unit=float(ticks_per_unit), potential_bits=potential_bits)
