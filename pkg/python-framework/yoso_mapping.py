#!/usr/bin/env python3
"""
YOSO Mapping
Allocates PEs to the layers of a quantized TTFS network, builds forwarding
chains and bank images, routes x-y and stores the placement/program image.
"""

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from ann_core import FormatError
from ttfs_network import TTFSNetwork
from yoso_hardware import (
    Bank,
    Coords,
    PEConfig,
    PERegisters,
    SpikeType,
    int16_slots,
    spike_word,
)

logger = logging.getLogger(__name__)

PLACEMENT_MAGIC = b"YOSO"
PLACEMENT_VERSION = 1
HOST = (0, 0)
MAX_SOURCE_INDEX = 1 << 12


class MappingError(ValueError):
    """The network does not fit the configured PE grid"""


# ============================================================================
# DATA STRUCTURES
# ============================================================================

@dataclass
class GridConfig:
    width: int = 6
    height: int = 7
    pe: PEConfig = field(default_factory=PEConfig)

    def __post_init__(self):
        if not (1 <= self.width <= 16 and 1 <= self.height <= 16):
            raise ValueError(f"grid {self.width}x{self.height} does not fit 4-bit coordinates")

    @property
    def pe_slots(self) -> int:
        """Tiles available to PEs; (0,0) is the host interface"""
        return self.width * self.height - 1

    def coords_of(self, pe_index: int) -> Coords:
        tile = pe_index + 1
        return tile % self.width, tile // self.width


@dataclass
class PEAssignment:
    index: int
    coords: Coords
    layer: int
    neuron_start: int
    neuron_stop: int
    registers: PERegisters
    images: Dict[Bank, bytes] = field(default_factory=dict)

    @property
    def neuron_count(self) -> int:
        return self.neuron_stop - self.neuron_start


@dataclass
class Placement:
    grid: GridConfig
    pes: List[PEAssignment]
    layer_pes: List[List[int]]
    formula_counts: List[int]
    layer_shapes: List[Tuple[int, int]]
    softmax_output: bool = False
    bias_as_initial_potential: bool = False

    @property
    def pe_counts(self) -> List[int]:
        return [len(chain) for chain in self.layer_pes]

    def head(self, layer: int) -> PEAssignment:
        return self.pes[self.layer_pes[layer][0]]

    def output_pes(self) -> List[PEAssignment]:
        return [self.pes[i] for i in self.layer_pes[-1]]

    def summary(self) -> Dict[str, Any]:
        return {
            'grid': [self.grid.width, self.grid.height],
            'pe_counts': self.pe_counts,
            'formula_counts': self.formula_counts,
            'layer_shapes': [list(s) for s in self.layer_shapes],
            'softmax_output': self.softmax_output,
            'bias_as_initial_potential': self.bias_as_initial_potential,
        }


# ============================================================================
# ROUTING
# ============================================================================

def route(src: Coords, dest: Coords) -> List[Coords]:
    """x first, then y; the source tile is not part of the path"""
    x, y = src
    path = []
    step = 1 if dest[0] > x else -1
    while x != dest[0]:
        x += step
        path.append((x, y))
    step = 1 if dest[1] > y else -1
    while y != dest[1]:
        y += step
        path.append((x, y))
    return path


def hop_count(src: Coords, dest: Coords) -> int:
    return abs(src[0] - dest[0]) + abs(src[1] - dest[1])


# ============================================================================
# PE ALLOCATION
# ============================================================================

def pes_required(fan_in: int, fan_out: int, pe: Optional[PEConfig] = None) -> int:
    """C = max(ceil(n / N), ceil(m * n / W)) with 1-byte weights"""
    pe = pe or PEConfig()
    weights_per_pe = pe.weight_bytes // pe.weight_width
    return max(math.ceil(fan_out / pe.max_neurons), math.ceil(fan_in * fan_out / weights_per_pe))


def split_neurons(count: int, parts: int) -> List[Tuple[int, int]]:
    """Even split; the first count % parts PEs take one extra neuron"""
    base, extra = divmod(count, parts)
    ranges, start = [], 0
    for p in range(parts):
        stop = start + base + (1 if p < extra else 0)
        ranges.append((start, stop))
        start = stop
    return ranges


def _layer_pe_count(fan_in: int, fan_out: int, pe: PEConfig) -> Tuple[int, int]:
    formula = pes_required(fan_in, fan_out, pe)
    count = formula
    weights_per_pe = pe.weight_bytes // pe.weight_width
    while (math.ceil(fan_out / count) > pe.max_neurons
           or math.ceil(fan_out / count) * fan_in > weights_per_pe):
        count += 1
    return formula, count


def _bank_images(layer, start: int, stop: int, registers: PERegisters,
                 pe: PEConfig, bias_as_initial_potential: bool,
                 softmax: bool) -> Dict[Bank, bytes]:
    q = layer.quant
    P = stop - start
    weights = np.zeros(pe.weight_bytes, dtype=np.int8)
    block = q.weights[:, start:stop].astype(np.int8)
    # weight of (source j, local neuron k) lives at j * P * M + k * M
    addresses = (np.arange(q.weights.shape[0])[:, None] * P * registers.M
                 + np.arange(P)[None, :] * registers.M)
    weights[addresses.ravel()] = block.ravel()

    biases = q.biases[start:stop]
    zeros = np.zeros(P, dtype=np.int64)
    accumulated = int16_slots(zeros if bias_as_initial_potential else biases,
                              pe.accumulated_slot, pe.max_neurons)
    neurons = int16_slots(biases if bias_as_initial_potential else zeros,
                          pe.neuron_slot, pe.max_neurons)

    words = np.zeros(pe.max_neurons * (pe.spike_slot // 4), dtype="<u4")
    stride = pe.spike_slot // 4
    for k in range(P):
        kind = SpikeType.DATA_SPIKE
        if softmax and k == registers.softmax_first:
            kind = SpikeType.SOFTMAX_FIRST
        elif softmax and k == registers.softmax_last:
            kind = SpikeType.SOFTMAX_LAST
        words[k * stride] = spike_word(k, start + k, override=True, spike_type=kind)

    return {
        Bank.WEIGHTS: weights.tobytes(),
        Bank.ACCUMULATED: accumulated,
        Bank.NEURONS: neurons,
        Bank.SPIKE_ADDRESS: words.tobytes(),
        Bank.REGISTERS: registers.to_bytes(pe.register_bytes),
    }


def map_network(net: TTFSNetwork, grid: Optional[GridConfig] = None,
                softmax_output: bool = False,
                bias_as_initial_potential: bool = False) -> Placement:
    """Allocate PEs layer by layer, row-major from tile (1,0)"""
    grid = grid or GridConfig()
    pe = grid.pe
    if not net.quantized:
        raise MappingError("only quantized networks can be mapped")

    shapes = [(layer.fan_in, layer.fan_out) for layer in net.layers]
    counts = [_layer_pe_count(m, n, pe) for m, n in shapes]
    required = sum(c for _, c in counts)
    if required > grid.pe_slots:
        breakdown = ", ".join(f"layer {l} ({m}x{n}): {c}" for l, ((m, n), (_, c))
                              in enumerate(zip(shapes, counts)))
        raise MappingError(f"network needs {required} PEs but the {grid.width}x{grid.height} "
                           f"grid offers {grid.pe_slots}: {breakdown}")
    for l, (m, _) in enumerate(shapes):
        if m > MAX_SOURCE_INDEX:
            raise MappingError(f"layer {l} fan_in {m} exceeds the 12-bit source address")
    for l, layer in enumerate(net.layers):
        if not -32768 <= layer.quant.threshold <= 32767:
            raise MappingError(f"layer {l} integer threshold {layer.quant.threshold} exceeds int16")
    if softmax_output and counts[-1][1] != 1:
        raise MappingError("softmax output requires the final layer on a single PE")

    layer_pes: List[List[int]] = []
    index = 0
    for _, c in counts:
        layer_pes.append(list(range(index, index + c)))
        index += c

    pes = []
    last = len(net.layers) - 1
    for l, layer in enumerate(net.layers):
        chain = layer_pes[l]
        output = HOST if l == last else grid.coords_of(layer_pes[l + 1][0])
        expected = 1 if l == 0 else len(layer_pes[l - 1])
        softmax = softmax_output and l == last
        for position, ((start, stop), pe_index) in enumerate(
                zip(split_neurons(layer.fan_out, len(chain)), chain)):
            forward = grid.coords_of(chain[position + 1]) if position + 1 < len(chain) else None
            registers = PERegisters(
                P=stop - start, M=1, theta_q=int(layer.quant.threshold),
                output_destination=output, forwarding_destination=forward,
                softmax=softmax, bias_as_initial_potential=bias_as_initial_potential,
                softmax_first=0, softmax_last=max(stop - start - 1, 0) if softmax else 0,
                expected_eots=expected, neuron_count=stop - start)
            assignment = PEAssignment(pe_index, grid.coords_of(pe_index), l, start, stop, registers)
            assignment.images = _bank_images(layer, start, stop, registers, pe,
                                             bias_as_initial_potential, softmax)
            pes.append(assignment)

    placement = Placement(grid=grid, pes=pes, layer_pes=layer_pes,
                          formula_counts=[f for f, _ in counts], layer_shapes=shapes,
                          softmax_output=softmax_output,
                          bias_as_initial_potential=bias_as_initial_potential)
    logger.info(f"Mapped {net.architecture} onto {len(pes)} PEs "
                f"(per layer {placement.pe_counts}) on a {grid.width}x{grid.height} grid")
    return placement


# ============================================================================
# PLACEMENT / PROGRAM IMAGE FILE
# ============================================================================

def save_placement(placement: Placement, path: Union[str, Path]) -> Path:
    """YOSO little-endian: header, per-layer shapes, per-PE records with bank images"""
    path = Path(path)
    flags = (1 if placement.softmax_output else 0) | (2 if placement.bias_as_initial_potential else 0)
    chunks = [PLACEMENT_MAGIC, struct.pack("<I", PLACEMENT_VERSION),
              struct.pack("<BBHHH", placement.grid.width, placement.grid.height,
                          len(placement.pes), len(placement.layer_shapes), flags)]
    for (m, n), formula, chain in zip(placement.layer_shapes, placement.formula_counts,
                                      placement.layer_pes):
        chunks.append(struct.pack("<HHHH", m, n, formula, len(chain)))
    for pe in placement.pes:
        chunks.append(struct.pack("<BBHHH", pe.coords[0], pe.coords[1], pe.layer,
                                  pe.neuron_start, pe.neuron_stop))
        for bank in Bank:
            image = pe.images.get(bank, b"")
            chunks.append(struct.pack("<I", len(image)))
            chunks.append(image)
    path.write_bytes(b"".join(chunks))
    logger.debug(f"Wrote placement image to {path}")
    return path


def load_placement(path: Union[str, Path], pe_config: Optional[PEConfig] = None) -> Placement:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != PLACEMENT_MAGIC:
        raise FormatError(f"{path}: not a YOSO placement file")
    try:
        (version,) = struct.unpack_from("<I", data, 4)
        if version != PLACEMENT_VERSION:
            raise FormatError(f"{path}: unsupported placement version {version}")
        width, height, pe_count, layer_count, flags = struct.unpack_from("<BBHHH", data, 8)
        offset = 16
        grid = GridConfig(width, height, pe_config or PEConfig())
        shapes, formulas, chain_lengths = [], [], []
        for _ in range(layer_count):
            m, n, formula, length = struct.unpack_from("<HHHH", data, offset)
            offset += 8
            shapes.append((m, n))
            formulas.append(formula)
            chain_lengths.append(length)

        pes = []
        for index in range(pe_count):
            x, y, layer, start, stop = struct.unpack_from("<BBHHH", data, offset)
            offset += 8
            images = {}
            for bank in Bank:
                (length,) = struct.unpack_from("<I", data, offset)
                offset += 4
                images[bank] = bytes(data[offset:offset + length])
                offset += length
            pes.append(PEAssignment(index, (x, y), layer, start, stop,
                                    PERegisters.from_bytes(images[Bank.REGISTERS]), images))
    except struct.error as e:
        raise FormatError(f"{path}: truncated placement file ({e})") from e
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes")

    layer_pes, index = [], 0
    for length in chain_lengths:
        layer_pes.append(list(range(index, index + length)))
        index += length
    return Placement(grid=grid, pes=pes, layer_pes=layer_pes, formula_counts=formulas,
                     layer_shapes=shapes, softmax_output=bool(flags & 1),
                     bias_as_initial_potential=bool(flags & 2))
