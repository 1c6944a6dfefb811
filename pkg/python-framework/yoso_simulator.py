#!/usr/bin/env python3
"""
YOSO Accelerator Simulator
Cycle-stepped processing elements (router interface, load/compute/store core
over RAW-protected SRAM banks) connected by an x-y NoC, with programming,
per-inference reset and tick-barrier inference.
"""

import heapq
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Deque, Dict, List, Optional, Tuple

import numpy as np

from ttfs_network import ABSENT, ForwardResult, NeuronState, SpikeTimeVector
from yoso_hardware import (
    AUX_BASE_OVERRIDE,
    AUX_FINAL_TICK,
    AccessCounters,
    AccessKind,
    Bank,
    Coords,
    MemoryRequest,
    Packet,
    PEConfig,
    PERegisters,
    SimulationFault,
    SpikeType,
    decode_prog_write,
    make_banks,
    prog_write_packet,
    saturating_add,
)
from yoso_mapping import HOST, Placement, hop_count

logger = logging.getLogger(__name__)

HOST_INDEX = -1


def _int16(raw: int) -> int:
    raw &= 0xFFFF
    return raw - 0x10000 if raw & 0x8000 else raw


# ============================================================================
# CORE PIPELINE OPERATIONS
# ============================================================================

@dataclass
class CoreOp:
    """Work item flowing load -> compute -> store"""
    kind: str
    k: int = 0
    tick: int = 0
    final: bool = False
    value: int = 0
    flag: int = 0
    fire: bool = False
    winner_requested: bool = False


class ProcessingElement:
    """One tile: router interface, load/compute/store core and five storage blocks"""

    def __init__(self, index: int, coords: Coords, config: Optional[PEConfig] = None,
                 counters: Optional[AccessCounters] = None):
        self.index = index
        self.coords = coords
        self.config = config or PEConfig()
        self.counters = counters if counters is not None else AccessCounters()
        self.banks = make_banks(self.config, self.counters, index)
        self.registers = PERegisters()
        self.committed = False
        self.softmax_range: Optional[Tuple[int, int]] = None
        self._committed_images: Dict[Bank, bytes] = {}

        self.router_in: Deque[Packet] = deque()
        self.outbox: Deque[Packet] = deque()
        self.emitted: List[Tuple[int, int]] = []
        self._reset_pipeline()

    def _reset_pipeline(self) -> None:
        self.router_in.clear()
        self.outbox.clear()
        self._load: Optional[CoreOp] = None
        self._load_base = 0
        self._eots_seen = 0
        self._compute_q: Deque[CoreOp] = deque()
        self._store_q: Deque[CoreOp] = deque()
        self._awaiting_word: Optional[CoreOp] = None
        self._softmax_values: Dict[int, int] = {}
        for bank in self.banks.values():
            bank.reset_queues()

    # -- programming -----------------------------------------------------------

    def deliver_program(self, packet: Packet) -> None:
        """PROG_WRITE/PROG_COMMIT handling of the router interface in programming mode"""
        if self.committed:
            raise SimulationFault(f"PE {self.index} received {packet.spike_type.name} after commit")
        if packet.spike_type is SpikeType.PROG_WRITE:
            bank, addr, data = decode_prog_write(packet)
            self.banks[bank].poke(addr, 1, data)
            self.counters.programming_bytes += 1
        elif packet.spike_type is SpikeType.PROG_COMMIT:
            self.commit()
        else:
            raise SimulationFault(f"PE {self.index} received {packet.spike_type.name} "
                                  f"in programming mode")

    def commit(self) -> None:
        self.registers = PERegisters.from_bytes(self.banks[Bank.REGISTERS].dump())
        self.softmax_range = None
        if self.registers.softmax:
            if self.registers.forwarding_destination is not None:
                raise SimulationFault(f"PE {self.index}: softmax range may not span PEs")
            self.softmax_range = self._scan_softmax_markers()
        for bank in self.banks.values():
            bank.programming = False
        self._committed_images = {b: self.banks[b].dump() for b in (Bank.ACCUMULATED, Bank.NEURONS)}
        self.committed = True

    def _scan_softmax_markers(self) -> Tuple[int, int]:
        spike_bank = self.banks[Bank.SPIKE_ADDRESS]
        first = last = None
        for k in range(self.registers.neuron_count):
            kind = (spike_bank.peek(k * self.config.spike_slot, 4, signed=False) >> 28) & 0xF
            if kind == SpikeType.SOFTMAX_FIRST:
                first = k
            elif kind == SpikeType.SOFTMAX_LAST:
                last = k
        if first is None:
            first = self.registers.softmax_first
        if last is None:
            last = first if self.registers.softmax_last < first else self.registers.softmax_last
        return first, last

    def reset_inference_state(self) -> None:
        """Restore the committed accumulated/neuron images; weights are left untouched"""
        for bank, image in self._committed_images.items():
            self.banks[bank].load_image(image)
        self._reset_pipeline()

    # -- router interface ------------------------------------------------------

    def accept(self, packet: Packet) -> bool:
        """Router-in FIFO; False means backpressure"""
        if packet.spike_type in (SpikeType.PROG_WRITE, SpikeType.PROG_COMMIT):
            self.deliver_program(packet)
            return True
        if not self.committed:
            raise SimulationFault(f"PE {self.index} received {packet.spike_type.name} "
                                  f"before being programmed")
        if len(self.router_in) >= self.config.fifo_depth:
            return False
        self.router_in.append(packet)
        return True

    @property
    def busy(self) -> bool:
        return bool(self.router_in or self.outbox or self._load or self._compute_q
                    or self._store_q or self._awaiting_word
                    or any(b.pending or b.responses for b in self.banks.values()))

    # -- pipeline --------------------------------------------------------------

    def step(self) -> None:
        """One cycle; stages are evaluated back to front"""
        self._store_step()
        self._compute_step()
        for bank in self.banks.values():
            if bank.pending:
                bank.step()
        self._load_step()

    def _emit(self, payload_packet: Packet) -> None:
        self.outbox.append(payload_packet.with_destination(self.registers.output_destination))

    def _store_step(self) -> None:
        if self._awaiting_word is not None:
            spike_bank = self.banks[Bank.SPIKE_ADDRESS]
            if not spike_bank.responses:
                return
            word = spike_bank.responses.popleft().data
            op = self._awaiting_word
            self._awaiting_word = None
            packet = Packet.from_payload((0, 0), word)
            if packet.spike_type is not SpikeType.DATA_SPIKE:
                packet = Packet(0, 0, SpikeType.DATA_SPIKE, packet.neuron_addr,
                                packet.base_addr, packet.aux)
            self._emit(packet)
            self.emitted.append((op.k, op.tick))
            return
        if not self._store_q:
            return

        op = self._store_q[0]
        cfg = self.config
        if op.kind == "spike":
            accumulated = self.banks[Bank.ACCUMULATED]
            if not accumulated.can_accept(AccessKind.WRITE):
                return
            accumulated.submit(MemoryRequest(AccessKind.WRITE, op.k * cfg.accumulated_slot,
                                             cfg.accumulated_width, data=op.value, bucket="spike"))
            self._store_q.popleft()
        elif op.kind == "eot":
            neurons = self.banks[Bank.NEURONS]
            spike_bank = self.banks[Bank.SPIKE_ADDRESS]
            if not neurons.can_accept(AccessKind.WRITE):
                return
            if op.fire and not spike_bank.can_accept(AccessKind.READ):
                return
            # V in bytes [0, 2), spiked flag in byte 2 of the same slot
            neurons.submit(MemoryRequest(AccessKind.WRITE, op.k * cfg.neuron_slot, 3,
                                         data=(op.flag << 16) | (op.value & 0xFFFF),
                                         charged=cfg.potential_width, bucket="eot"))
            if self.softmax_range is not None:
                first, last = self.softmax_range
                if first <= op.k <= last:
                    self._softmax_values[op.k] = op.value
            if op.fire:
                self._request_word(op)
            self._store_q.popleft()
        elif op.kind == "eot_done":
            if self.softmax_range is not None and op.final and not op.winner_requested:
                if not self.banks[Bank.SPIKE_ADDRESS].can_accept(AccessKind.READ):
                    return
                first, last = self.softmax_range
                winner = first
                for k in range(first, last + 1):
                    if self._softmax_values.get(k, 0) > self._softmax_values.get(winner, 0):
                        winner = k
                op.winner_requested = True
                self._request_word(CoreOp("softmax", k=winner, tick=op.tick))
                return
            self._emit(Packet(0, 0, SpikeType.EOT, 0, op.tick % 4096,
                              AUX_FINAL_TICK if op.final else 0))
            self._store_q.popleft()

    def _request_word(self, op: CoreOp) -> None:
        self.banks[Bank.SPIKE_ADDRESS].submit(MemoryRequest(
            AccessKind.READ, op.k * self.config.spike_slot, self.config.spike_word_width,
            signed=False, bucket="spike_address"))
        self._awaiting_word = op

    def _compute_step(self) -> None:
        if not self._compute_q or len(self._store_q) >= self.config.fifo_depth:
            return
        op = self._compute_q[0]
        accumulated = self.banks[Bank.ACCUMULATED]
        if op.kind == "spike":
            weights = self.banks[Bank.WEIGHTS]
            if not (weights.responses and accumulated.responses):
                return
            w = weights.responses.popleft().data
            a = accumulated.responses.popleft().data
            op.value = saturating_add(a, w)
        elif op.kind == "eot":
            neurons = self.banks[Bank.NEURONS]
            if not (accumulated.responses and neurons.responses):
                return
            a = accumulated.responses.popleft().data
            raw = neurons.responses.popleft().data
            flag = (raw >> 16) & 0x1
            op.value = saturating_add(_int16(raw), a)
            op.fire = (self.softmax_range is None and op.value >= self.registers.theta_q
                       and not flag)
            op.flag = flag | int(op.fire)
        self._compute_q.popleft()
        self._store_q.append(op)

    def _load_step(self) -> None:
        cfg = self.config
        regs = self.registers
        if self._load is None:
            if self._compute_q and len(self._compute_q) >= cfg.fifo_depth:
                return
            if not self.router_in:
                return
            packet = self.router_in.popleft()
            if regs.forwarding_destination is not None:
                self.outbox.append(packet.with_destination(regs.forwarding_destination))
            if packet.spike_type is SpikeType.DATA_SPIKE:
                self.counters.data_spike_events += 1
                source = packet.base_addr if packet.aux & AUX_BASE_OVERRIDE else packet.neuron_addr
                self._load_base = source * regs.P * regs.M
                self._load = CoreOp("spike")
            elif packet.spike_type is SpikeType.EOT:
                self._eots_seen += 1
                if self._eots_seen < regs.expected_eots:
                    return
                self._eots_seen = 0
                self.counters.eot_events += 1
                self._load = CoreOp("eot", tick=packet.base_addr,
                                    final=bool(packet.aux & AUX_FINAL_TICK))
            else:
                raise SimulationFault(f"PE {self.index} cannot process {packet.spike_type.name}")
            return

        op = self._load
        if len(self._compute_q) >= cfg.fifo_depth:
            return
        if op.kind == "spike":
            weights, accumulated = self.banks[Bank.WEIGHTS], self.banks[Bank.ACCUMULATED]
            if not (weights.can_accept(AccessKind.READ) and accumulated.can_accept(AccessKind.READ)):
                return
            weights.submit(MemoryRequest(AccessKind.READ, self._load_base + op.k * regs.M,
                                         cfg.weight_width, bucket="spike"))
            accumulated.submit(MemoryRequest(AccessKind.READ_INTENT, op.k * cfg.accumulated_slot,
                                             cfg.accumulated_width, bucket="spike"))
            self._compute_q.append(CoreOp("spike", k=op.k))
            op.k += 1
            if op.k >= regs.P:
                self._load = None
        else:
            if op.k >= regs.neuron_count:
                self._compute_q.append(CoreOp("eot_done", tick=op.tick, final=op.final))
                self._load = None
                return
            accumulated, neurons = self.banks[Bank.ACCUMULATED], self.banks[Bank.NEURONS]
            if not (accumulated.can_accept(AccessKind.READ) and neurons.can_accept(AccessKind.READ)):
                return
            accumulated.submit(MemoryRequest(AccessKind.READ, op.k * cfg.accumulated_slot,
                                             cfg.accumulated_width, bucket="eot"))
            neurons.submit(MemoryRequest(AccessKind.READ_INTENT, op.k * cfg.neuron_slot, 3,
                                         signed=False, charged=cfg.potential_width, bucket="eot"))
            self._compute_q.append(CoreOp("eot", k=op.k, tick=op.tick, final=op.final))
            op.k += 1

    # -- unit-level drivers ----------------------------------------------------

    def run_until_idle(self, max_cycles: int = 10_000_000) -> List[Packet]:
        """Step an isolated PE until it drains; returns every packet it emitted"""
        sent: List[Packet] = []
        for _ in range(max_cycles):
            if not self.busy:
                return sent
            self.step()
            while self.outbox:
                sent.append(self.outbox.popleft())
        raise SimulationFault(f"PE {self.index} did not drain within {max_cycles} cycles")

    def process_spike(self, packet: Packet) -> List[Packet]:
        if not self.accept(packet):
            raise SimulationFault(f"PE {self.index} router FIFO full")
        return self.run_until_idle()

    def process_eot(self, packet: Packet) -> List[Packet]:
        if not self.accept(packet):
            raise SimulationFault(f"PE {self.index} router FIFO full")
        return self.run_until_idle()

    def potentials(self) -> np.ndarray:
        bank = self.banks[Bank.NEURONS]
        return np.array([bank.peek(k * self.config.neuron_slot, 2)
                         for k in range(self.registers.neuron_count)], dtype=np.int64)

    def slopes(self) -> np.ndarray:
        bank = self.banks[Bank.ACCUMULATED]
        return np.array([bank.peek(k * self.config.accumulated_slot, 2)
                         for k in range(self.registers.neuron_count)], dtype=np.int64)

    def spiked_flags(self) -> np.ndarray:
        bank = self.banks[Bank.NEURONS]
        return np.array([bank.peek(k * self.config.neuron_slot + 2, 1, signed=False) & 1
                         for k in range(self.registers.neuron_count)], dtype=bool)


# ============================================================================
# NETWORK ON CHIP
# ============================================================================

class NetworkOnChip:
    """Deterministic delivery: arrival = send + hops * latency, ties by (source PE, sequence)"""

    def __init__(self, hop_latency: int = 1, counters: Optional[AccessCounters] = None):
        self.hop_latency = hop_latency
        self.counters = counters if counters is not None else AccessCounters()
        self._heap: List[Tuple[int, int, int, Packet]] = []
        self._seq = 0
        self.delivered = 0

    def send(self, src_index: int, src: Coords, packet: Packet, cycle: int) -> None:
        hops = hop_count(src, packet.dest)
        self.counters.total_packets += 1
        self.counters.total_hops += hops
        heapq.heappush(self._heap, (cycle + hops * self.hop_latency, src_index, self._seq, packet))
        self._seq += 1

    @property
    def pending(self) -> bool:
        return bool(self._heap)

    @property
    def next_arrival(self) -> Optional[int]:
        return self._heap[0][0] if self._heap else None

    def deliver(self, cycle: int, sinks: Dict[Coords, Any]) -> None:
        """Hand every packet due by ``cycle`` to its tile; refused packets retry next cycle"""
        retry = []
        while self._heap and self._heap[0][0] <= cycle:
            arrival, src, seq, packet = heapq.heappop(self._heap)
            sink = sinks.get(packet.dest)
            if sink is None:
                raise SimulationFault(f"packet addressed to empty tile {packet.dest}")
            if sink.accept(packet):
                self.delivered += 1
            else:
                retry.append((cycle + 1, src, seq, packet))
        for item in retry:
            heapq.heappush(self._heap, item)


class HostInterface:
    """Tile (0,0): injects input spikes and collects the output layer"""

    def __init__(self):
        self.spikes: List[Tuple[int, int]] = []
        self.eots = 0
        self.current_tick = 0

    def accept(self, packet: Packet) -> bool:
        if packet.spike_type is SpikeType.DATA_SPIKE:
            self.spikes.append((packet.base_addr, self.current_tick))
        elif packet.spike_type is SpikeType.EOT:
            self.eots += 1
        return True


# ============================================================================
# SYSTEM
# ============================================================================

@dataclass
class HardwareRunResult:
    forward: ForwardResult
    counters: AccessCounters
    ticks_run: int = 0
    cycles: int = 0

    @property
    def output(self) -> SpikeTimeVector:
        return self.forward.output

    @property
    def final_potentials(self) -> np.ndarray:
        return self.forward.final_state.potential


class YosoSystem:
    """A PE grid built from a placement"""

    def __init__(self, placement: Placement, pe_config: Optional[PEConfig] = None,
                 hop_latency: int = 1, max_cycles_per_tick: int = 50_000_000):
        self.placement = placement
        self.config = pe_config or placement.grid.pe
        self.max_cycles_per_tick = max_cycles_per_tick
        self.counters = AccessCounters()
        self.noc = NetworkOnChip(hop_latency, self.counters)
        self.host = HostInterface()
        self.pes = [ProcessingElement(a.index, a.coords, self.config, self.counters)
                    for a in placement.pes]
        self.sinks: Dict[Coords, Any] = {pe.coords: pe for pe in self.pes}
        self.sinks[HOST] = self.host
        self.cycle = 0
        self.programmed = False

    def program(self) -> None:
        """Deliver PROG_WRITE packets for every non-zero image byte, then PROG_COMMIT"""
        for assignment, pe in zip(self.placement.pes, self.pes):
            hops = hop_count(HOST, pe.coords)
            packets = 0
            for bank, image in assignment.images.items():
                data = np.frombuffer(image, dtype=np.uint8)
                for addr in np.flatnonzero(data):
                    word = prog_write_packet(pe.coords, bank, int(addr), int(data[addr])).encode()
                    pe.accept(Packet.decode(word))
                    packets += 1
            pe.accept(Packet(pe.coords[0], pe.coords[1], SpikeType.PROG_COMMIT))
            packets += 1
            self.counters.programming_packets += packets
            self.counters.programming_hops += packets * hops
        self.programmed = True
        logger.info(f"Programmed {len(self.pes)} PEs with {self.counters.programming_bytes} bytes")

    def reset_inference_state(self) -> None:
        for pe in self.pes:
            pe.reset_inference_state()
            pe.emitted.clear()
        self.host = HostInterface()
        self.sinks[HOST] = self.host

    def _busy(self) -> List[ProcessingElement]:
        return [pe for pe in self.pes if pe.busy]

    def _drain(self) -> None:
        """Run until the NoC is empty and every PE is idle"""
        deadline = self.cycle + self.max_cycles_per_tick
        while True:
            busy = self._busy()
            if not busy and not self.noc.pending:
                return
            if self.cycle > deadline:
                raise SimulationFault(f"timestep did not drain within {self.max_cycles_per_tick} cycles")
            if not busy and self.noc.next_arrival > self.cycle:
                self.cycle = self.noc.next_arrival
            self.noc.deliver(self.cycle, self.sinks)
            for pe in self.pes:
                if pe.busy:
                    pe.step()
                    while pe.outbox:
                        self.noc.send(pe.index, pe.coords, pe.outbox.popleft(), self.cycle)
            self.cycle += 1

    def _inject(self, sources: np.ndarray, tick: int, final: bool) -> None:
        head = self.placement.head(0).coords
        for j in sources:
            j = int(j)
            self.noc.send(HOST_INDEX, HOST, Packet(head[0], head[1], SpikeType.DATA_SPIKE,
                                                   j & 0xFF, j, AUX_BASE_OVERRIDE), self.cycle)
        self.noc.send(HOST_INDEX, HOST, Packet(head[0], head[1], SpikeType.EOT, 0, tick % 4096,
                                               AUX_FINAL_TICK if final else 0), self.cycle)

    def run_inference(self, inp: SpikeTimeVector, T_max: int,
                      early_stop: bool = False) -> HardwareRunResult:
        """Tick-barrier inference of one encoded input (discrete ticks)"""
        if not self.programmed:
            raise SimulationFault("run_inference on an unprogrammed system")
        first_layer = self.placement.layer_shapes[0][0]
        if len(inp) != first_layer:
            raise SimulationFault(f"input of length {len(inp)} for fan_in {first_layer}")

        self.reset_inference_state()
        before = AccessCounters()
        before.merge(self.counters)
        start_cycle = self.cycle

        order = np.argsort(inp.times, kind="stable")
        order = order[inp.times[order] < T_max]
        ticks = inp.times[order].astype(np.int64)

        ticks_run = 0
        for tick in range(T_max):
            self.host.current_tick = tick
            self._inject(order[ticks == tick], tick, tick == T_max - 1)
            self._drain()
            ticks_run = tick + 1
            if early_stop and any(t == tick for _, t in self.host.spikes):
                break

        run_counters = _difference(self.counters, before)
        run_counters.cycles = self.cycle - start_cycle
        return HardwareRunResult(self._collect(), run_counters, ticks_run, run_counters.cycles)

    def _collect(self) -> ForwardResult:
        times, states = [], []
        for chain, (_, fan_out) in zip(self.placement.layer_pes, self.placement.layer_shapes):
            record = np.full(fan_out, ABSENT)
            potential = np.zeros(fan_out, dtype=np.int64)
            slope = np.zeros(fan_out, dtype=np.int64)
            spiked = np.zeros(fan_out, dtype=bool)
            for index in chain:
                assignment, pe = self.placement.pes[index], self.pes[index]
                lo, hi = assignment.neuron_start, assignment.neuron_stop
                for k, tick in pe.emitted:
                    record[lo + k] = tick
                potential[lo:hi] = pe.potentials()
                slope[lo:hi] = pe.slopes()
                spiked[lo:hi] = pe.spiked_flags()
            spiked |= np.isfinite(record)
            times.append(SpikeTimeVector(record, discrete=True))
            states.append(NeuronState(potential, slope, spiked))
        return ForwardResult(mode="discrete", layer_times=times, states=states)

    def dump_bank(self, pe_index: int, bank: Bank) -> bytes:
        return self.pes[pe_index].banks[bank].dump()


def _difference(after: AccessCounters, before: AccessCounters) -> AccessCounters:
    delta = AccessCounters()
    delta.merge(after)
    for table_name in ("read_bytes", "write_bytes", "bank_read_bytes", "bank_write_bytes",
                       "pe_read_bytes", "pe_write_bytes"):
        table = getattr(delta, table_name)
        for key, value in getattr(before, table_name).items():
            table[key] = table.get(key, 0) - value
    for name in ("data_spike_events", "eot_events", "total_packets", "total_hops",
                 "programming_packets", "programming_hops", "programming_bytes",
                 "cycles", "stall_cycles"):
        setattr(delta, name, getattr(delta, name) - getattr(before, name))
    return delta


def build_system(placement: Placement, pe_config: Optional[PEConfig] = None,
                 hop_latency: int = 1) -> YosoSystem:
    system = YosoSystem(placement, pe_config, hop_latency)
    system.program()
    return system
