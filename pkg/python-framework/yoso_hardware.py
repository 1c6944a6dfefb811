#!/usr/bin/env python3
"""
YOSO Hardware Primitives
Wire format of NoC packets, register file layout, single-port SRAM banks
behind read/write request FIFOs with RAW protection, saturating arithmetic
and byte-accurate access counters.
"""

import json
import logging
import struct
from collections import deque
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Any, Deque, Dict, List, Optional, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

INT16_MIN = -32768
INT16_MAX = 32767

AUX_BASE_OVERRIDE = 0x01
AUX_FINAL_TICK = 0x02

FLAG_FORWARD_VALID = 0x01
FLAG_SOFTMAX = 0x02
FLAG_BIAS_AS_POTENTIAL = 0x04


class SimulationFault(RuntimeError):
    """The modeled hardware reached a state the design forbids"""


# ============================================================================
# ENUMS AND PACKETS
# ============================================================================

class SpikeType(IntEnum):
    DATA_SPIKE = 0
    EOT = 1
    PROG_WRITE = 2
    PROG_COMMIT = 3
    SOFTMAX_FIRST = 4
    SOFTMAX_LAST = 5


class Bank(IntEnum):
    WEIGHTS = 0
    ACCUMULATED = 1
    NEURONS = 2
    SPIKE_ADDRESS = 3
    REGISTERS = 4


class AccessKind(Enum):
    READ = "read"
    READ_INTENT = "read_intent"
    WRITE = "write"


Coords = Tuple[int, int]


def pack_coords(coords: Optional[Coords]) -> int:
    if coords is None:
        return 0
    return ((coords[0] & 0xF) << 4) | (coords[1] & 0xF)


def unpack_coords(byte: int) -> Coords:
    return (byte >> 4) & 0xF, byte & 0xF


@dataclass(frozen=True)
class Packet:
    """40-bit packet: dest x(4) y(4) + payload type(4) neuron_addr(8) base_addr(12) aux(8)"""
    dest_x: int
    dest_y: int
    spike_type: SpikeType
    neuron_addr: int = 0
    base_addr: int = 0
    aux: int = 0

    def __post_init__(self):
        for name, value, bits in (("dest_x", self.dest_x, 4), ("dest_y", self.dest_y, 4),
                                  ("neuron_addr", self.neuron_addr, 8),
                                  ("base_addr", self.base_addr, 12), ("aux", self.aux, 8)):
            if not 0 <= value < (1 << bits):
                raise ValueError(f"{name}={value} does not fit {bits} bits")
        object.__setattr__(self, "spike_type", SpikeType(self.spike_type))

    @property
    def dest(self) -> Coords:
        return self.dest_x, self.dest_y

    @property
    def payload(self) -> int:
        return ((int(self.spike_type) << 28) | (self.neuron_addr << 20)
                | (self.base_addr << 8) | self.aux)

    def encode(self) -> int:
        return (self.dest_x << 36) | (self.dest_y << 32) | self.payload

    @classmethod
    def from_payload(cls, dest: Coords, payload: int) -> "Packet":
        return cls(dest[0], dest[1], SpikeType((payload >> 28) & 0xF),
                   (payload >> 20) & 0xFF, (payload >> 8) & 0xFFF, payload & 0xFF)

    @classmethod
    def decode(cls, word: int) -> "Packet":
        if word >> 40:
            raise ValueError(f"packet word 0x{word:x} wider than 40 bits")
        return cls.from_payload(((word >> 36) & 0xF, (word >> 32) & 0xF), word & 0xFFFFFFFF)

    def with_destination(self, dest: Coords) -> "Packet":
        return Packet(dest[0], dest[1], self.spike_type, self.neuron_addr, self.base_addr, self.aux)


def spike_word(neuron_addr: int, base_addr: int, override: bool = True,
               spike_type: SpikeType = SpikeType.DATA_SPIKE) -> int:
    """32-bit payload stored in the Spike Address SRAM"""
    return Packet(0, 0, spike_type, neuron_addr, base_addr,
                  AUX_BASE_OVERRIDE if override else 0).payload


def prog_write_packet(dest: Coords, bank: Bank, addr: int, data: int) -> Packet:
    """data byte in neuron_addr, addr[11:0] in base_addr, aux = bank | addr[16:12] << 3"""
    if not 0 <= addr < (1 << 17):
        raise ValueError(f"program address {addr} does not fit 17 bits")
    return Packet(dest[0], dest[1], SpikeType.PROG_WRITE, data & 0xFF, addr & 0xFFF,
                  (int(bank) & 0x7) | ((addr >> 12) << 3))


def decode_prog_write(packet: Packet) -> Tuple[Bank, int, int]:
    bank = Bank(packet.aux & 0x7)
    addr = ((packet.aux >> 3) << 12) | packet.base_addr
    return bank, addr, packet.neuron_addr


# ============================================================================
# CONFIGURATION AND REGISTERS
# ============================================================================

@dataclass
class PEConfig:
    """Geometry and access widths of one processing element"""
    max_neurons: int = 256
    weight_bytes: int = 40960
    accumulated_bytes: int = 1024
    neuron_bytes: int = 1024
    spike_address_bytes: int = 2048
    register_bytes: int = 16
    weight_width: int = 1
    accumulated_width: int = 2
    potential_width: int = 2
    spike_word_width: int = 4
    fifo_depth: int = 16
    raw_protection: bool = True

    @property
    def accumulated_slot(self) -> int:
        return self.accumulated_bytes // self.max_neurons

    @property
    def neuron_slot(self) -> int:
        return self.neuron_bytes // self.max_neurons

    @property
    def spike_slot(self) -> int:
        return self.spike_address_bytes // self.max_neurons


_REGISTER_FORMAT = "<HHhBBBBBBH"


@dataclass
class PERegisters:
    """Programmed register file (bank 4)"""
    P: int = 0
    M: int = 1
    theta_q: int = INT16_MAX
    output_destination: Optional[Coords] = None
    forwarding_destination: Optional[Coords] = None
    softmax: bool = False
    bias_as_initial_potential: bool = False
    softmax_first: int = 0
    softmax_last: int = 0
    expected_eots: int = 1
    neuron_count: int = 0

    @property
    def flags(self) -> int:
        return ((FLAG_FORWARD_VALID if self.forwarding_destination is not None else 0)
                | (FLAG_SOFTMAX if self.softmax else 0)
                | (FLAG_BIAS_AS_POTENTIAL if self.bias_as_initial_potential else 0))

    def to_bytes(self, size: int = 16) -> bytes:
        raw = struct.pack(_REGISTER_FORMAT, self.P, self.M, self.theta_q,
                          pack_coords(self.output_destination),
                          pack_coords(self.forwarding_destination), self.flags,
                          self.softmax_first, self.softmax_last, self.expected_eots,
                          self.neuron_count)
        return raw.ljust(size, b"\x00")

    @classmethod
    def from_bytes(cls, raw: bytes) -> "PERegisters":
        (P, M, theta_q, out, fwd, flags, first, last, expected,
         count) = struct.unpack_from(_REGISTER_FORMAT, raw, 0)
        return cls(P=P, M=M, theta_q=theta_q, output_destination=unpack_coords(out),
                   forwarding_destination=unpack_coords(fwd) if flags & FLAG_FORWARD_VALID else None,
                   softmax=bool(flags & FLAG_SOFTMAX),
                   bias_as_initial_potential=bool(flags & FLAG_BIAS_AS_POTENTIAL),
                   softmax_first=first, softmax_last=last, expected_eots=expected,
                   neuron_count=count)


def saturating_add(a: int, b: int, bits: int = 16) -> int:
    hi = (1 << (bits - 1)) - 1
    return max(-hi - 1, min(hi, int(a) + int(b)))


# ============================================================================
# ACCESS COUNTERS
# ============================================================================

@dataclass
class EnergyModel:
    """Per-event costs in pJ; the resulting estimate is model-dependent"""
    sram_read_pj_per_byte: float = 0.0
    sram_write_pj_per_byte: float = 0.0
    spike_address_read_pj_per_byte: float = 0.0
    hop_pj: float = 0.0
    enabled: bool = False

    def energy_uj(self, counters: "AccessCounters") -> float:
        spike_address = counters.read_bytes.get("spike_address", 0)
        reads = sum(counters.read_bytes.get(b, 0) for b in ("spike", "eot"))
        writes = sum(counters.write_bytes.get(b, 0) for b in ("spike", "eot"))
        pj = (reads * self.sram_read_pj_per_byte + writes * self.sram_write_pj_per_byte
              + spike_address * self.spike_address_read_pj_per_byte
              + counters.total_hops * self.hop_pj)
        return pj * 1e-6


@dataclass
class AccessCounters:
    """Bytes moved, bucketed by trigger (spike/eot/spike_address/program), bank and PE"""
    read_bytes: Dict[str, int] = field(default_factory=dict)
    write_bytes: Dict[str, int] = field(default_factory=dict)
    bank_read_bytes: Dict[str, int] = field(default_factory=dict)
    bank_write_bytes: Dict[str, int] = field(default_factory=dict)
    pe_read_bytes: Dict[int, int] = field(default_factory=dict)
    pe_write_bytes: Dict[int, int] = field(default_factory=dict)
    data_spike_events: int = 0
    eot_events: int = 0
    total_packets: int = 0
    total_hops: int = 0
    programming_packets: int = 0
    programming_hops: int = 0
    programming_bytes: int = 0
    cycles: int = 0
    stall_cycles: int = 0

    def record(self, pe: int, bank: Bank, kind: AccessKind, nbytes: int, bucket: str) -> None:
        name = bank.name.lower()
        if kind is AccessKind.WRITE:
            self.write_bytes[bucket] = self.write_bytes.get(bucket, 0) + nbytes
            self.bank_write_bytes[name] = self.bank_write_bytes.get(name, 0) + nbytes
            self.pe_write_bytes[pe] = self.pe_write_bytes.get(pe, 0) + nbytes
        else:
            self.read_bytes[bucket] = self.read_bytes.get(bucket, 0) + nbytes
            self.bank_read_bytes[name] = self.bank_read_bytes.get(name, 0) + nbytes
            self.pe_read_bytes[pe] = self.pe_read_bytes.get(pe, 0) + nbytes

    def _per_event(self, table: Dict[str, int], bucket: str, events: int) -> float:
        return table.get(bucket, 0) / events if events else 0.0

    @property
    def per_spike_read_bytes(self) -> float:
        return self._per_event(self.read_bytes, "spike", self.data_spike_events)

    @property
    def per_spike_write_bytes(self) -> float:
        return self._per_event(self.write_bytes, "spike", self.data_spike_events)

    @property
    def per_eot_read_bytes(self) -> float:
        return self._per_event(self.read_bytes, "eot", self.eot_events)

    @property
    def per_eot_write_bytes(self) -> float:
        return self._per_event(self.write_bytes, "eot", self.eot_events)

    def merge(self, other: "AccessCounters") -> None:
        """Accumulate another run's counters into this one"""
        for mine, theirs in ((self.read_bytes, other.read_bytes), (self.write_bytes, other.write_bytes),
                             (self.bank_read_bytes, other.bank_read_bytes),
                             (self.bank_write_bytes, other.bank_write_bytes),
                             (self.pe_read_bytes, other.pe_read_bytes),
                             (self.pe_write_bytes, other.pe_write_bytes)):
            for key, value in theirs.items():
                mine[key] = mine.get(key, 0) + value
        for name in ("data_spike_events", "eot_events", "total_packets", "total_hops",
                     "programming_packets", "programming_hops", "programming_bytes",
                     "cycles", "stall_cycles"):
            setattr(self, name, getattr(self, name) + getattr(other, name))

    def snapshot(self) -> Dict[str, Any]:
        return {
            'read_bytes': dict(self.read_bytes),
            'write_bytes': dict(self.write_bytes),
            'data_spike_events': self.data_spike_events,
            'eot_events': self.eot_events,
            'total_packets': self.total_packets,
            'total_hops': self.total_hops,
        }

    def to_report(self, energy: Optional[EnergyModel] = None,
                  clock_hz: Optional[float] = None) -> Dict[str, Any]:
        banks = sorted(set(self.bank_read_bytes) | set(self.bank_write_bytes))
        pes = sorted(set(self.pe_read_bytes) | set(self.pe_write_bytes))
        report = {
            'per_spike_read_bytes': self.per_spike_read_bytes,
            'per_spike_write_bytes': self.per_spike_write_bytes,
            'per_eot_read_bytes': self.per_eot_read_bytes,
            'per_eot_write_bytes': self.per_eot_write_bytes,
            'total_packets': self.total_packets,
            'total_hops': self.total_hops,
            'data_spike_events': self.data_spike_events,
            'eot_events': self.eot_events,
            'banks': {b: {'read_bytes': self.bank_read_bytes.get(b, 0),
                          'write_bytes': self.bank_write_bytes.get(b, 0)} for b in banks},
            'pes': {str(p): {'read_bytes': self.pe_read_bytes.get(p, 0),
                             'write_bytes': self.pe_write_bytes.get(p, 0)} for p in pes},
            'spike_address_read_bytes': self.read_bytes.get("spike_address", 0),
            'programming_packets': self.programming_packets,
            'programming_hops': self.programming_hops,
            'programming_bytes': self.programming_bytes,
            'cycles': self.cycles,
            'stall_cycles': self.stall_cycles,
        }
        if clock_hz is not None:
            report['clock_hz_label'] = clock_hz
        if energy is not None and energy.enabled:
            report['energy_uj'] = energy.energy_uj(self)
            report['energy_note'] = "model-dependent estimate from configured per-event costs"
        return report

    def write_json(self, path: Union[str, Path], energy: Optional[EnergyModel] = None,
                   clock_hz: Optional[float] = None) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_report(energy, clock_hz), indent=2, sort_keys=True))
        return path


# ============================================================================
# SRAM BANK
# ============================================================================

@dataclass
class MemoryRequest:
    kind: AccessKind
    addr: int
    width: int
    data: Optional[int] = None
    signed: bool = True
    charged: Optional[int] = None
    bucket: str = "spike"
    tag: Any = None

    @property
    def charged_bytes(self) -> int:
        return self.width if self.charged is None else self.charged


@dataclass
class MemoryResponse:
    tag: Any
    addr: int
    data: int


class SRAMBank:
    """Single-port SRAM serviced one request per cycle from a read FIFO and a write FIFO.

    When both FIFOs hold requests the bank alternates, starting with the write FIFO.
    ``read_intent`` sets the entry's protection bit; any read of a protected entry
    waits at the head of the read FIFO until a write to that entry clears the bit.
    """

    def __init__(self, bank: Bank, size: int, entry_size: int, fifo_depth: int = 16,
                 protected: bool = True, raw_protection: bool = True,
                 counters: Optional[AccessCounters] = None, pe_index: int = 0):
        self.bank = bank
        self.size = size
        self.entry_size = entry_size
        self.fifo_depth = fifo_depth
        self.protected = protected and raw_protection
        self.counters = counters
        self.pe_index = pe_index
        self.memory = bytearray(size)
        self.protection = bytearray(max(size // entry_size, 1))
        self.read_fifo: Deque[MemoryRequest] = deque()
        self.write_fifo: Deque[MemoryRequest] = deque()
        self.responses: Deque[MemoryResponse] = deque()
        self.programming = True
        self.stall_cycles = 0
        self.service_log: Optional[List[str]] = None
        self._last = AccessKind.READ

    # -- functional access -------------------------------------------------

    def _check(self, addr: int, width: int) -> None:
        if addr < 0 or addr + width > self.size:
            raise SimulationFault(
                f"{self.bank.name} access [{addr}, {addr + width}) outside {self.size} bytes")

    def peek(self, addr: int, width: int, signed: bool = True) -> int:
        self._check(addr, width)
        return int.from_bytes(self.memory[addr:addr + width], "little", signed=signed)

    def poke(self, addr: int, width: int, value: int) -> None:
        self._check(addr, width)
        self.memory[addr:addr + width] = int(value).to_bytes(width, "little", signed=value < 0)

    def load_image(self, image: bytes) -> None:
        if len(image) > self.size:
            raise SimulationFault(f"{self.bank.name} image of {len(image)} bytes exceeds {self.size}")
        self.memory[:] = bytes(image).ljust(self.size, b"\x00")
        self.protection[:] = bytes(len(self.protection))

    def dump(self) -> bytes:
        return bytes(self.memory)

    # -- request interface ---------------------------------------------------

    def can_accept(self, kind: AccessKind) -> bool:
        fifo = self.write_fifo if kind is AccessKind.WRITE else self.read_fifo
        return len(fifo) < self.fifo_depth

    def submit(self, request: MemoryRequest) -> bool:
        """Enqueue a request; False when the FIFO is full (caller retries)"""
        self._check(request.addr, request.width)
        if request.kind is AccessKind.WRITE:
            if self.bank is Bank.WEIGHTS and not self.programming:
                raise SimulationFault("write to the Weights bank outside programming mode")
            if len(self.write_fifo) >= self.fifo_depth:
                return False
            self.write_fifo.append(request)
        else:
            if len(self.read_fifo) >= self.fifo_depth:
                return False
            self.read_fifo.append(request)
        return True

    @property
    def pending(self) -> bool:
        return bool(self.read_fifo or self.write_fifo)

    def reset_queues(self) -> None:
        """Drop queued requests and responses; arbitration restarts with the write FIFO"""
        self.read_fifo.clear()
        self.write_fifo.clear()
        self.responses.clear()
        self._last = AccessKind.READ

    def _read_blocked(self) -> bool:
        head = self.read_fifo[0]
        return self.protected and bool(self.protection[head.addr // self.entry_size])

    def _service_write(self) -> None:
        req = self.write_fifo.popleft()
        self.poke(req.addr, req.width, req.data)
        if self.protected:
            self.protection[req.addr // self.entry_size] = 0
        self._account(req)
        self._last = AccessKind.WRITE

    def _service_read(self) -> None:
        req = self.read_fifo.popleft()
        if req.kind is AccessKind.READ_INTENT and self.protected:
            self.protection[req.addr // self.entry_size] = 1
        self.responses.append(MemoryResponse(req.tag, req.addr,
                                             self.peek(req.addr, req.width, req.signed)))
        self._account(req)
        self._last = AccessKind.READ

    def _account(self, req: MemoryRequest) -> None:
        if self.service_log is not None:
            self.service_log.append("W" if req.kind is AccessKind.WRITE else "R")
        if self.counters is not None:
            self.counters.record(self.pe_index, self.bank, req.kind, req.charged_bytes, req.bucket)

    def step(self) -> Optional[AccessKind]:
        """Service at most one request this cycle"""
        can_write = bool(self.write_fifo)
        can_read = bool(self.read_fifo) and not self._read_blocked()
        if can_write and (not can_read or self._last is AccessKind.READ):
            self._service_write()
            return AccessKind.WRITE
        if can_read:
            self._service_read()
            return AccessKind.READ
        if self.read_fifo:
            self.stall_cycles += 1
            if self.counters is not None:
                self.counters.stall_cycles += 1
        return None


def sram_access(bank: SRAMBank, request: MemoryRequest,
                max_cycles: int = 10_000) -> Optional[MemoryResponse]:
    """Submit one request and step the bank until it is serviced; reads return their response"""
    if not bank.submit(request):
        raise SimulationFault(f"{bank.bank.name} FIFO full")
    fifo = bank.write_fifo if request.kind is AccessKind.WRITE else bank.read_fifo
    for _ in range(max_cycles):
        bank.step()
        if not any(r is request for r in fifo):
            break
    else:
        raise SimulationFault(f"{bank.bank.name} request at {request.addr} stalled "
                              f"for {max_cycles} cycles")
    if request.kind is AccessKind.WRITE:
        return None
    return bank.responses[-1]


def make_banks(config: PEConfig, counters: Optional[AccessCounters] = None,
               pe_index: int = 0) -> Dict[Bank, SRAMBank]:
    """The five storage blocks of one PE; Weights and registers carry no RAW protection"""
    def bank(kind: Bank, size: int, entry: int, protected: bool) -> SRAMBank:
        return SRAMBank(kind, size, entry, config.fifo_depth, protected,
                        config.raw_protection, counters, pe_index)

    return {
        Bank.WEIGHTS: bank(Bank.WEIGHTS, config.weight_bytes, config.weight_width, False),
        Bank.ACCUMULATED: bank(Bank.ACCUMULATED, config.accumulated_bytes, config.accumulated_slot, True),
        Bank.NEURONS: bank(Bank.NEURONS, config.neuron_bytes, config.neuron_slot, True),
        Bank.SPIKE_ADDRESS: bank(Bank.SPIKE_ADDRESS, config.spike_address_bytes, config.spike_slot, True),
        Bank.REGISTERS: bank(Bank.REGISTERS, config.register_bytes, config.register_bytes, False),
    }


def int16_slots(values: np.ndarray, slot: int, count: int) -> bytes:
    """Pack int16 values into ``count`` little-endian slots of ``slot`` bytes"""
    image = np.zeros((count, slot), dtype=np.uint8)
    raw = np.asarray(values, dtype="<i2").view(np.uint8).reshape(-1, 2)
    image[:raw.shape[0], :2] = raw
    return image.tobytes()
