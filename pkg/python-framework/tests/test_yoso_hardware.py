import json
from collections import deque

import numpy as np
import pytest

from yoso_hardware import (
    AUX_BASE_OVERRIDE,
    AccessCounters,
    AccessKind,
    Bank,
    EnergyModel,
    MemoryRequest,
    Packet,
    PEConfig,
    PERegisters,
    SimulationFault,
    SpikeType,
    SRAMBank,
    decode_prog_write,
    int16_slots,
    make_banks,
    prog_write_packet,
    saturating_add,
    spike_word,
    sram_access,
)


class TestPacket:
    def test_field_layout(self):
        packet = Packet(3, 2, SpikeType.DATA_SPIKE, 5, 300, AUX_BASE_OVERRIDE)
        word = packet.encode()
        assert word == (3 << 36) | (2 << 32) | (5 << 20) | (300 << 8) | 1
        assert Packet.decode(word) == packet
        assert packet.dest == (3, 2)

    def test_type_nibble(self):
        word = Packet(0, 0, SpikeType.EOT, 0, 17, 0).encode()
        assert (word >> 28) & 0xF == SpikeType.EOT
        assert Packet.decode(word).spike_type is SpikeType.EOT

    @pytest.mark.parametrize("kwargs", [{'dest_x': 16}, {'neuron_addr': 256},
                                        {'base_addr': 4096}, {'aux': -1}])
    def test_fields_must_fit(self, kwargs):
        fields = {'dest_x': 0, 'dest_y': 0, 'spike_type': SpikeType.DATA_SPIKE}
        fields.update(kwargs)
        with pytest.raises(ValueError):
            Packet(**fields)

    def test_decode_rejects_wide_words(self):
        with pytest.raises(ValueError):
            Packet.decode(1 << 40)

    def test_with_destination_keeps_payload(self):
        packet = Packet(1, 0, SpikeType.DATA_SPIKE, 7, 1000, 1)
        moved = packet.with_destination((4, 5))
        assert moved.dest == (4, 5)
        assert moved.payload == packet.payload

    def test_spike_word(self):
        word = spike_word(3, 259)
        packet = Packet.from_payload((0, 0), word)
        assert (packet.neuron_addr, packet.base_addr, packet.aux) == (3, 259, AUX_BASE_OVERRIDE)


class TestProgrammingPacket:
    def test_high_address(self):
        packet = prog_write_packet((2, 1), Bank.WEIGHTS, 40000, 0xAB)
        assert packet.spike_type is SpikeType.PROG_WRITE
        assert decode_prog_write(Packet.decode(packet.encode())) == (Bank.WEIGHTS, 40000, 0xAB)

    def test_register_bank(self):
        assert decode_prog_write(prog_write_packet((1, 0), Bank.REGISTERS, 3, 0x7F)) == \
            (Bank.REGISTERS, 3, 0x7F)

    def test_address_range(self):
        with pytest.raises(ValueError):
            prog_write_packet((1, 0), Bank.WEIGHTS, 1 << 17, 0)


class TestRegisters:
    def test_byte_image(self):
        regs = PERegisters(P=50, M=1, theta_q=127, output_destination=(1, 1),
                           forwarding_destination=(3, 0), expected_eots=6, neuron_count=50)
        raw = regs.to_bytes()
        assert len(raw) == 16
        assert PERegisters.from_bytes(raw) == regs

    def test_no_forwarding(self):
        regs = PERegisters(P=10, theta_q=-5, output_destination=(0, 0), softmax=True,
                           softmax_first=0, softmax_last=9, neuron_count=10)
        loaded = PERegisters.from_bytes(regs.to_bytes())
        assert loaded.forwarding_destination is None
        assert loaded.softmax and loaded.theta_q == -5


class TestSaturatingAdd:
    @pytest.mark.parametrize("a,b,expected", [(32760, 100, 32767), (-32760, -100, -32768),
                                              (5, 7, 12), (32767, -1, 32766)])
    def test_int16(self, a, b, expected):
        assert saturating_add(a, b) == expected

    def test_other_width(self):
        assert saturating_add(100, 100, bits=8) == 127


def protected_bank(raw_protection=True, **kwargs):
    return SRAMBank(Bank.ACCUMULATED, 64, 2, fifo_depth=16, protected=True,
                    raw_protection=raw_protection, **kwargs)


class TestSRAMBank:
    def test_alternation_starts_with_write(self):
        bank = SRAMBank(Bank.WEIGHTS, 64, 1, protected=False)
        bank.service_log = []
        for addr in (0, 1):
            bank.submit(MemoryRequest(AccessKind.READ, addr, 1))
        for addr in (2, 3):
            bank.submit(MemoryRequest(AccessKind.WRITE, addr, 1, data=9))
        while bank.pending:
            bank.step()
        assert bank.service_log == ["W", "R", "W", "R"]

    def test_protected_read_waits_for_write(self):
        bank = protected_bank()
        bank.poke(10, 2, 7)
        bank.submit(MemoryRequest(AccessKind.READ_INTENT, 10, 2))
        assert bank.step() is AccessKind.READ
        assert bank.responses.popleft().data == 7

        bank.submit(MemoryRequest(AccessKind.READ, 10, 2))
        assert bank.step() is None
        assert bank.stall_cycles == 1

        bank.submit(MemoryRequest(AccessKind.WRITE, 10, 2, data=42))
        assert bank.step() is AccessKind.WRITE
        assert bank.step() is AccessKind.READ
        assert bank.responses.popleft().data == 42

    def test_stale_read_without_protection(self):
        bank = protected_bank(raw_protection=False)
        bank.poke(10, 2, 7)
        bank.submit(MemoryRequest(AccessKind.READ_INTENT, 10, 2))
        bank.step()
        bank.submit(MemoryRequest(AccessKind.READ, 10, 2))
        assert bank.step() is AccessKind.READ
        assert bank.responses[-1].data == 7
        assert bank.stall_cycles == 0

    def test_plain_reads_do_not_stall(self):
        bank = protected_bank()
        for _ in range(3):
            bank.submit(MemoryRequest(AccessKind.READ, 10, 2))
        for _ in range(3):
            assert bank.step() is AccessKind.READ
        assert bank.stall_cycles == 0

    def test_other_entries_are_not_blocked(self):
        bank = protected_bank()
        sram_access(bank, MemoryRequest(AccessKind.READ_INTENT, 10, 2))
        bank.poke(12, 2, -3)
        assert sram_access(bank, MemoryRequest(AccessKind.READ, 12, 2)).data == -3

    def test_full_fifo_refuses(self):
        bank = SRAMBank(Bank.NEURONS, 64, 4, fifo_depth=2)
        assert bank.submit(MemoryRequest(AccessKind.READ, 0, 2))
        assert bank.submit(MemoryRequest(AccessKind.READ, 4, 2))
        assert not bank.can_accept(AccessKind.READ)
        assert not bank.submit(MemoryRequest(AccessKind.READ, 8, 2))
        assert bank.can_accept(AccessKind.WRITE)

    def test_out_of_range(self):
        bank = protected_bank()
        with pytest.raises(SimulationFault):
            bank.peek(63, 2)
        with pytest.raises(SimulationFault):
            bank.submit(MemoryRequest(AccessKind.READ, 64, 1))

    def test_weights_are_read_only_after_programming(self):
        banks = make_banks(PEConfig())
        weights = banks[Bank.WEIGHTS]
        weights.submit(MemoryRequest(AccessKind.WRITE, 0, 1, data=5))
        weights.step()
        weights.programming = False
        with pytest.raises(SimulationFault):
            weights.submit(MemoryRequest(AccessKind.WRITE, 0, 1, data=6))

    def test_charged_bytes_are_counted(self):
        counters = AccessCounters()
        bank = SRAMBank(Bank.NEURONS, 64, 4, counters=counters, pe_index=3)
        sram_access(bank, MemoryRequest(AccessKind.READ, 0, 3, charged=2, bucket="eot"))
        sram_access(bank, MemoryRequest(AccessKind.WRITE, 0, 3, data=1, charged=2, bucket="eot"))
        assert counters.read_bytes == {'eot': 2}
        assert counters.write_bytes == {'eot': 2}
        assert counters.bank_read_bytes == {'neurons': 2}
        assert counters.pe_write_bytes == {3: 2}


def run_increment_workload(raw_protection, ops=2000, slots=4, seed=3, plain_reads=0.25):
    """Read-intent/modify/write increments with a variable compute delay, mixed with plain reads.

    ``logical`` is each slot's value with every increment whose read-intent has been
    serviced applied; a read returning anything else is counted as stale.
    """
    rng = np.random.default_rng(seed)
    bank = protected_bank(raw_protection)
    work = deque()
    for _ in range(ops):
        slot = int(rng.integers(0, slots))
        work.append((slot, None if rng.random() < plain_reads else int(rng.integers(-5, 6))))
    expected = np.zeros(slots, dtype=np.int64)
    for slot, delta in work:
        if delta is not None:
            expected[slot] += delta

    logical = np.zeros(slots, dtype=np.int64)
    stale = 0
    delayed = []
    in_flight = 0
    cycle = 0
    while work or bank.pending or delayed:
        for _ in range(int(rng.integers(0, 3))):
            if work and in_flight < 8 and bank.can_accept(AccessKind.READ):
                slot, delta = work.popleft()
                kind = AccessKind.READ if delta is None else AccessKind.READ_INTENT
                bank.submit(MemoryRequest(kind, slot * 2, 2, tag=(slot, delta)))
                if delta is not None:
                    in_flight += 1
        bank.step()
        while bank.responses:
            response = bank.responses.popleft()
            slot, delta = response.tag
            stale += int(response.data != logical[slot])
            if delta is not None:
                logical[slot] += delta
                delayed.append((cycle + int(rng.integers(1, 5)), response))
        for item in [d for d in delayed if d[0] <= cycle]:
            _, response = item
            slot, delta = response.tag
            bank.submit(MemoryRequest(AccessKind.WRITE, slot * 2, 2, data=response.data + delta))
            delayed.remove(item)
            in_flight -= 1
        cycle += 1
        assert cycle < 50 * ops
    final = np.array([bank.peek(s * 2, 2) for s in range(slots)])
    return final, expected, bank, stale


def test_protected_increments_match_sequential_oracle():
    final, expected, bank, stale = run_increment_workload(raw_protection=True)
    np.testing.assert_array_equal(final, expected)
    assert stale == 0
    assert bank.stall_cycles > 0


def test_unprotected_increments_lose_updates():
    final, expected, _, stale = run_increment_workload(raw_protection=False)
    assert not np.array_equal(final, expected)
    assert stale > 0


@pytest.mark.parametrize("plain_reads", [0.0, 0.5, 0.9])
def test_reads_see_every_serviced_increment(plain_reads):
    final, expected, _, stale = run_increment_workload(raw_protection=True, ops=3000, slots=3,
                                                       seed=11, plain_reads=plain_reads)
    np.testing.assert_array_equal(final, expected)
    assert stale == 0


class TestAccessCounters:
    def setup_method(self):
        self.counters = AccessCounters()
        self.counters.record(0, Bank.WEIGHTS, AccessKind.READ, 256, "spike")
        self.counters.record(0, Bank.ACCUMULATED, AccessKind.READ_INTENT, 512, "spike")
        self.counters.record(0, Bank.ACCUMULATED, AccessKind.WRITE, 512, "spike")
        self.counters.data_spike_events = 1

    def test_per_spike(self):
        assert self.counters.per_spike_read_bytes == 768
        assert self.counters.per_spike_write_bytes == 512
        assert self.counters.per_eot_read_bytes == 0.0

    def test_merge(self):
        total = AccessCounters()
        total.merge(self.counters)
        total.merge(self.counters)
        assert total.read_bytes['spike'] == 1536
        assert total.data_spike_events == 2
        assert total.per_spike_read_bytes == 768

    def test_report(self, tmp_path):
        self.counters.total_hops = 10
        energy = EnergyModel(sram_read_pj_per_byte=1.0, hop_pj=100.0, enabled=True)
        path = self.counters.write_json(tmp_path / "counters.json", energy, clock_hz=120e3)
        report = json.loads(path.read_text())
        assert report['banks']['accumulated'] == {'read_bytes': 512, 'write_bytes': 512}
        assert report['pes']['0']['read_bytes'] == 768
        assert report['clock_hz_label'] == 120e3
        assert report['energy_uj'] == pytest.approx((768 + 1000) * 1e-6)

    def test_energy_disabled_by_default(self):
        assert 'energy_uj' not in self.counters.to_report(EnergyModel())


def test_int16_slots():
    image = int16_slots(np.array([1, -2]), 4, 3)
    assert image == bytes([1, 0, 0, 0, 0xFE, 0xFF, 0, 0, 0, 0, 0, 0])


@pytest.mark.slow
def test_million_protected_increments():
    final, expected, _, stale = run_increment_workload(raw_protection=True, ops=1_000_000, slots=32, seed=17)
    np.testing.assert_array_equal(final, expected)
    assert stale == 0
