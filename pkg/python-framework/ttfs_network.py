#!/usr/bin/env python3
"""
TTFS Network Reference Simulators
Exact continuous-time and discrete-tick simulators for time-to-first-spike
feedforward networks of non-leaky integrate-and-fire neurons, plus
intensity-to-latency input encoding and output decoding.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

ABSENT = np.inf
DEFAULT_RATE_CAP = 1e6


class InputDomainError(ValueError):
    """Input value outside the encodable domain"""


class DimensionError(ValueError):
    """Layer or vector dimensions do not chain"""


class NoDecisionError(LookupError):
    """No output neuron spiked, first-spike decoding has no answer"""


# ============================================================================
# DATA STRUCTURES
# ============================================================================

@dataclass
class SpikeTimeVector:
    """First-spike time per neuron; ``inf`` marks a neuron that never spiked"""
    times: np.ndarray
    discrete: bool = False

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).ravel()
        present = self.times[np.isfinite(self.times)]
        if present.size and present.min() < 0:
            raise InputDomainError("spike times must be non-negative")

    @classmethod
    def empty(cls, size: int, discrete: bool = False) -> "SpikeTimeVector":
        return cls(np.full(size, ABSENT), discrete)

    def __len__(self) -> int:
        return self.times.size

    @property
    def spiked(self) -> np.ndarray:
        return np.isfinite(self.times)

    @property
    def spike_count(self) -> int:
        return int(self.spiked.sum())

    def spike_pairs(self) -> List[Tuple[int, float]]:
        """(neuron, time) pairs of the neurons that spiked, in neuron order"""
        idx = np.flatnonzero(self.spiked)
        if self.discrete:
            return [(int(i), int(self.times[i])) for i in idx]
        return [(int(i), float(self.times[i])) for i in idx]


@dataclass
class NeuronState:
    """Struct-of-arrays neuron state: potential V, slope A, spiked flag"""
    potential: np.ndarray
    slope: np.ndarray
    spiked: np.ndarray

    @classmethod
    def initial(cls, biases: np.ndarray, bias_as_initial_potential: bool = False,
                integer: bool = False) -> "NeuronState":
        dtype = np.int64 if integer else float
        biases = np.asarray(biases, dtype=dtype)
        zeros = np.zeros_like(biases)
        if bias_as_initial_potential:
            return cls(biases.copy(), zeros, np.zeros(biases.size, dtype=bool))
        return cls(zeros, biases.copy(), np.zeros(biases.size, dtype=bool))

    def copy(self) -> "NeuronState":
        return NeuronState(self.potential.copy(), self.slope.copy(), self.spiked.copy())

    def __len__(self) -> int:
        return self.potential.size


@dataclass
class LayerQuant:
    """Integer image of a layer for the fixed-point domain"""
    bits: int
    scale: float
    weights: np.ndarray
    biases: np.ndarray
    threshold: int

    def dequantized_weights(self) -> np.ndarray:
        return self.weights.astype(float) * self.scale


@dataclass
class TTFSLayer:
    """Dense layer; weights are [fan_in x fan_out]"""
    weights: np.ndarray
    biases: np.ndarray
    threshold: float = 1.0
    quant: Optional[LayerQuant] = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.biases = np.asarray(self.biases, dtype=float).ravel()
        if self.weights.ndim != 2 or self.weights.shape[1] != self.biases.size:
            raise DimensionError(
                f"weights {self.weights.shape} do not match {self.biases.size} biases")
        if not self.threshold > 0:
            raise ValueError(f"threshold must be positive, got {self.threshold}")
        if self.quant is not None:
            limit = 2 ** (self.quant.bits - 1) - 1
            if self.quant.weights.shape != self.weights.shape:
                raise DimensionError("quantized weights do not match layer shape")
            if np.abs(self.quant.weights).max(initial=0) > limit:
                raise ValueError(f"quantized weights exceed {self.quant.bits} signed bits")

    @property
    def fan_in(self) -> int:
        return self.weights.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[1]


@dataclass
class TTFSNetwork:
    """Converted spiking network"""
    layers: List[TTFSLayer]
    ticks_per_unit: float = 1.0
    potential_bits: int = 16
    accumulator_bits: int = 16

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("a network needs at least one layer")
        for l in range(1, len(self.layers)):
            if self.layers[l - 1].fan_out != self.layers[l].fan_in:
                raise DimensionError(
                    f"layer {l - 1} fan_out {self.layers[l - 1].fan_out} "
                    f"!= layer {l} fan_in {self.layers[l].fan_in}")

    @property
    def quantized(self) -> bool:
        return all(layer.quant is not None for layer in self.layers)

    @property
    def architecture(self) -> List[int]:
        return [self.layers[0].fan_in] + [layer.fan_out for layer in self.layers]


@dataclass
class EncodingConfig:
    """Input window and simulation length"""
    t_max: float = 1.0
    T_in: int = 256
    T_max: int = 512
    ticks_per_unit_override: Optional[float] = None

    def __post_init__(self):
        if not self.t_max > 0:
            raise ValueError(f"t_max must be positive, got {self.t_max}")
        if self.T_in < 1 or self.T_max < 1:
            raise ValueError("T_in and T_max must be positive")
        if self.T_in > self.T_max:
            raise ValueError(f"T_in ({self.T_in}) must not exceed T_max ({self.T_max})")
        if self.ticks_per_unit <= 0:
            raise ValueError("T_in must be at least 2 unless ticks_per_unit is given")

    @property
    def ticks_per_unit(self) -> float:
        if self.ticks_per_unit_override is not None:
            return float(self.ticks_per_unit_override)
        return (self.T_in - 1) / self.t_max

    @property
    def horizon(self) -> float:
        """Continuous-time length of the T_max tick window"""
        return self.T_max / self.ticks_per_unit


@dataclass
class SimulationOptions:
    early_stop: bool = False
    softmax_output: bool = False
    bias_as_initial_potential: bool = False
    use_quantized: bool = True


@dataclass
class ForwardResult:
    """Per-layer spike times plus the final state of every layer"""
    mode: str
    layer_times: List[SpikeTimeVector]
    states: List[NeuronState]
    ticks_run: int = 0

    @property
    def output(self) -> SpikeTimeVector:
        return self.layer_times[-1]

    @property
    def final_state(self) -> NeuronState:
        return self.states[-1]


# ============================================================================
# INPUT ENCODING AND OUTPUT DECODING
# ============================================================================

def itl_encode(image: Sequence[float], cfg: EncodingConfig,
               discrete: bool = False) -> SpikeTimeVector:
    """Intensity-to-latency: brighter pixels spike earlier, black pixels never"""
    x = np.asarray(image, dtype=float).ravel()
    if x.size and (not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0):
        raise InputDomainError("pixel intensities must lie in [0, 1]")

    times = np.full(x.size, ABSENT)
    on = x > 0
    if discrete:
        if cfg.ticks_per_unit_override is None:
            times[on] = np.rint((1.0 - x[on]) * (cfg.T_in - 1))
        else:
            times[on] = np.rint((1.0 - x[on]) * cfg.t_max * cfg.ticks_per_unit_override)
    else:
        times[on] = (1.0 - x[on]) * cfg.t_max
    return SpikeTimeVector(times, discrete)


def instantaneous_rates(t: SpikeTimeVector, rate_cap: float = DEFAULT_RATE_CAP) -> np.ndarray:
    """r = 1/t for spiking neurons, 0 for silent ones, capped at rate_cap"""
    rates = np.zeros(len(t))
    present = t.spiked
    times = t.times[present]
    with np.errstate(divide="ignore"):
        rates[present] = np.where(times > 0, 1.0 / np.where(times > 0, times, 1.0), rate_cap)
    return np.minimum(rates, rate_cap)


def decode_first_spike(out: SpikeTimeVector) -> int:
    """Index of the earliest spiking neuron; ties go to the lowest index"""
    if not out.spiked.any():
        raise NoDecisionError("no output neuron spiked")
    return int(np.argmin(out.times))


def decode_softmax_membrane(states: Union[NeuronState, np.ndarray]) -> int:
    """argmax of final membrane potentials (softmax is monotone)"""
    potential = states.potential if isinstance(states, NeuronState) else np.asarray(states)
    return int(np.argmax(potential))


def membrane_softmax(potential: np.ndarray) -> np.ndarray:
    v = np.asarray(potential, dtype=float)
    e = np.exp(v - v.max())
    return e / e.sum()


# ============================================================================
# CONTINUOUS-TIME SIMULATOR
# ============================================================================

def _settle_segment(state: NeuronState, out: np.ndarray, t_start: float,
                    t_stop: float, theta: float) -> None:
    """Fire every neuron whose linear potential reaches theta inside [t_start, t_stop)"""
    active = ~state.spiked
    at_start = active & (state.potential >= theta)
    out[at_start] = t_start
    state.spiked |= at_start
    active &= ~at_start

    rising = active & (state.slope > 0)
    if not rising.any():
        return
    candidate = np.full(out.size, np.inf)
    candidate[rising] = t_start + (theta - state.potential[rising]) / state.slope[rising]
    hit = rising & (candidate < t_stop)
    out[hit] = candidate[hit]
    state.spiked |= hit


def layer_forward_continuous(inp: SpikeTimeVector, layer: TTFSLayer,
                             threshold: Optional[float] = None,
                             t_end: float = np.inf,
                             bias_as_initial_potential: bool = False
                             ) -> Tuple[SpikeTimeVector, NeuronState]:
    """Event-driven exact solution of one layer.

    Between consecutive input events the potential is linear with slope A,
    so the crossing time of each neuron is solved in closed form. The returned
    state holds V at ``t_end`` (or at the last event when the window is open).
    """
    theta = layer.threshold if threshold is None else threshold
    if len(inp) != layer.fan_in:
        raise DimensionError(f"input of length {len(inp)} for fan_in {layer.fan_in}")

    state = NeuronState.initial(layer.biases, bias_as_initial_potential)
    out = np.full(layer.fan_out, ABSENT)

    order = np.argsort(inp.times, kind="stable")
    order = order[inp.times[order] < t_end]

    t_prev = 0.0
    for j in order:
        t_next = inp.times[j]
        _settle_segment(state, out, t_prev, t_next, theta)
        state.potential += state.slope * (t_next - t_prev)
        state.slope += layer.weights[j]
        t_prev = t_next

    _settle_segment(state, out, t_prev, t_end, theta)
    if np.isfinite(t_end):
        state.potential += state.slope * (t_end - t_prev)
        out[out >= t_end] = ABSENT
    return SpikeTimeVector(out), state


def causal_mask(t_in: SpikeTimeVector, t_out: SpikeTimeVector) -> np.ndarray:
    """[fan_in x fan_out] mask of inputs that arrived strictly before each output spike"""
    return t_in.times[:, None] < t_out.times[None, :]


# ============================================================================
# DISCRETE-TICK SIMULATOR
# ============================================================================

def saturate(values: np.ndarray, bits: int) -> np.ndarray:
    hi = 2 ** (bits - 1) - 1
    return np.clip(values, -hi - 1, hi)


def layer_step_discrete(state: NeuronState, arrivals: Sequence[np.ndarray],
                        threshold: float, ticks_per_unit: float = 1.0,
                        saturation_bits: Optional[int] = None,
                        fire: bool = True) -> Tuple[NeuronState, np.ndarray]:
    """One tick of one layer.

    ``arrivals`` holds the weight row of every input spike of this tick in
    arrival order. Phase 1 adds them to the slopes, phase 2 (end of
    timestep) integrates and fires neurons that cross for the first time.
    With ``saturation_bits`` the state is integer and every add saturates;
    otherwise V grows by A / ticks_per_unit per tick.
    """
    nxt = state.copy()
    if len(arrivals):
        rows = np.asarray(arrivals)
        if saturation_bits is None:
            nxt.slope = nxt.slope + rows.sum(axis=0)
        else:
            limit = 2 ** (saturation_bits - 1) - 1
            bound = np.abs(nxt.slope) + np.abs(rows).sum(axis=0)
            if bound.max() <= limit:
                nxt.slope = nxt.slope + rows.sum(axis=0)
            else:
                for row in rows:
                    nxt.slope = saturate(nxt.slope + row, saturation_bits)

    if saturation_bits is None:
        nxt.potential = nxt.potential + nxt.slope / ticks_per_unit
    else:
        nxt.potential = saturate(nxt.potential + nxt.slope, saturation_bits)

    if not fire:
        return nxt, np.empty(0, dtype=np.int64)
    fired = (nxt.potential >= threshold) & ~nxt.spiked
    nxt.spiked |= fired
    return nxt, np.flatnonzero(fired)


def _tick_schedule(inp: SpikeTimeVector, T_max: int) -> Dict[int, np.ndarray]:
    order = np.argsort(inp.times, kind="stable")
    order = order[inp.times[order] < T_max]
    schedule: Dict[int, List[int]] = {}
    for j in order:
        schedule.setdefault(int(inp.times[j]), []).append(int(j))
    return {k: np.asarray(v, dtype=np.int64) for k, v in schedule.items()}


def _forward_discrete(net: TTFSNetwork, inp: SpikeTimeVector, cfg: EncodingConfig,
                      options: SimulationOptions) -> ForwardResult:
    quantized = options.use_quantized and net.quantized
    if quantized:
        weights = [layer.quant.weights.astype(np.int64) for layer in net.layers]
        biases = [layer.quant.biases.astype(np.int64) for layer in net.layers]
        thresholds = [layer.quant.threshold for layer in net.layers]
    else:
        weights = [layer.weights for layer in net.layers]
        biases = [layer.biases for layer in net.layers]
        thresholds = [layer.threshold for layer in net.layers]

    states = [NeuronState.initial(b, options.bias_as_initial_potential, integer=quantized)
              for b in biases]
    records = [np.full(layer.fan_out, ABSENT) for layer in net.layers]
    schedule = _tick_schedule(inp, cfg.T_max)
    last = len(net.layers) - 1
    tpu = cfg.ticks_per_unit
    empty = np.empty(0, dtype=np.int64)

    ticks_run = 0
    for tick in range(cfg.T_max):
        arrivals = schedule.get(tick, empty)
        for l in range(len(net.layers)):
            softmax_layer = options.softmax_output and l == last
            # accumulator and potential share one saturation width in the reference
            states[l], fired = layer_step_discrete(
                states[l], [weights[l][j] for j in arrivals], thresholds[l],
                ticks_per_unit=tpu,
                saturation_bits=net.potential_bits if quantized else None,
                fire=not softmax_layer)
            if softmax_layer and tick == cfg.T_max - 1:
                fired = np.array([decode_softmax_membrane(states[l])], dtype=np.int64)
                states[l].spiked[fired] = True
            records[l][fired] = tick
            arrivals = fired
        ticks_run = tick + 1
        if options.early_stop and len(arrivals):
            break

    return ForwardResult(
        mode="discrete",
        layer_times=[SpikeTimeVector(r, discrete=True) for r in records],
        states=states,
        ticks_run=ticks_run,
    )


def _forward_continuous(net: TTFSNetwork, inp: SpikeTimeVector, cfg: EncodingConfig,
                        options: SimulationOptions) -> ForwardResult:
    times, states = [], []
    current = inp
    for layer in net.layers:
        current, state = layer_forward_continuous(
            current, layer, t_end=cfg.horizon,
            bias_as_initial_potential=options.bias_as_initial_potential)
        times.append(current)
        states.append(state)
    return ForwardResult(mode="continuous", layer_times=times, states=states)


def network_forward(net: TTFSNetwork, inp: SpikeTimeVector, mode: str = "continuous",
                    cfg: Optional[EncodingConfig] = None,
                    options: Optional[SimulationOptions] = None) -> ForwardResult:
    """Evaluate the layers in order in continuous or discrete mode"""
    cfg = cfg or EncodingConfig()
    options = options or SimulationOptions()
    if len(inp) != net.layers[0].fan_in:
        raise DimensionError(f"input of length {len(inp)} for fan_in {net.layers[0].fan_in}")
    if mode == "continuous":
        return _forward_continuous(net, inp, cfg, options)
    if mode == "discrete":
        return _forward_discrete(net, inp, cfg, options)
    raise ValueError(f"unknown simulation mode: {mode}")


# ============================================================================
# SPIKE TRACES
# ============================================================================

def spike_trace_frame(result: ForwardResult) -> pd.DataFrame:
    """layer,neuron,tick (discrete) or layer,neuron,time (continuous); silent neurons omitted"""
    column = "tick" if result.mode == "discrete" else "time"
    rows = []
    for layer_idx, times in enumerate(result.layer_times):
        for neuron, t in times.spike_pairs():
            rows.append((layer_idx, neuron, t))
    frame = pd.DataFrame(rows, columns=["layer", "neuron", column])
    if column == "tick":
        frame[column] = frame[column].astype(np.int64)
    return frame


def write_spike_trace(result: ForwardResult, path: Union[str, Path]) -> Path:
    path = Path(path)
    spike_trace_frame(result).to_csv(path, index=False, float_format="%.17g")
    logger.debug(f"Wrote spike trace to {path}")
    return path


def read_spike_trace(path: Union[str, Path]) -> pd.DataFrame:
    frame = pd.read_csv(path, float_precision="round_trip")
    expected = {"layer", "neuron"}
    if not expected.issubset(frame.columns) or not ({"tick", "time"} & set(frame.columns)):
        raise ValueError(f"{path} is not a spike trace")
    return frame
