import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import oracle, random_task
from gemmsim.accel import (AccelError, BufferOverflow, MalformedBuffer, OutputCrossbar,
                           VectorMacAccelerator, crossbar_collect, gemm_unit_compute,
                           ppu_process, stripe_banks)
from gemmsim.config import AccelConfig, ConfigError
from gemmsim.driver import dispatch_pipelined, pack_operands, plan_weight_tiles
from gemmsim.quant import QuantTensor, RequantParams, reference_gemm, requantize_matrix
from gemmsim.sim import Engine

VM = AccelConfig(kind="vm")


def routed(task, config=VM, pack_config=None):
    """Accelerator with the task's first weight tile routed into its buffers."""
    pack_config = pack_config or config
    bufs = pack_operands(task, plan_weight_tiles(task.M, task.N, task.K, pack_config), pack_config)
    accel = VectorMacAccelerator(config)
    eng = Engine(config.bus)
    accel.bind(eng)
    eng.process(accel.input_handler_route(bufs[:3]))
    eng.run()
    return accel, eng


def run(task, config=VM):
    outs, rep = dispatch_pipelined([task], VectorMacAccelerator(config))
    return outs[0].data, rep


# -- input handler -------------------------------------------------------------

def test_route_smallest_task(rng):
    task = random_task(rng, 4, 4, 4)
    accel, _ = routed(task)
    assert accel.global_weight_buffer.nbytes == 16
    assert (accel.global_weight_buffer == task.rhs.data).all()
    local = accel.local_input_buffer(0)
    assert list(local) == [0] and (local[0] == task.lhs.data).all()
    assert all(accel.local_input_buffer(u) == {} for u in (1, 2, 3))


def test_local_buffers_hold_round_robin_strips(rng):
    task = random_task(rng, 20, 4, 3)
    accel, _ = routed(task)
    assert sorted(accel.local_input_buffer(0)) == [0, 4]
    assert sorted(accel.local_input_buffer(1)) == [1]
    assert (accel.local_input_buffer(0)[4] == task.lhs.data[16:20]).all()


def test_global_weight_overflow_names_buffer(rng):
    task = random_task(rng, 4, 16, 8)
    small = VM.replace(**{"vm.global_weight_buffer_bytes": 64})
    with pytest.raises(BufferOverflow, match="global_weight_buffer"):
        routed(task, small, pack_config=VM)


def test_local_input_overflow_names_buffer(rng):
    task = random_task(rng, 8, 4, 64)
    small = VM.replace(**{"vm.local_input_buffer_bytes": 128})
    with pytest.raises(BufferOverflow, match="local_input_buffer"):
        routed(task, small, pack_config=VM)


def test_malformed_order_rejected(rng):
    task = random_task(rng, 4, 4, 4)
    bufs = pack_operands(task, plan_weight_tiles(4, 4, 4, VM), VM)
    accel = VectorMacAccelerator(VM)
    with pytest.raises(MalformedBuffer):
        accel.run([bufs[2]])


def test_bank_striping(rng):
    assert stripe_banks(6, 4).tolist() == [0, 1, 2, 3, 0, 1]
    task = random_task(rng, 4, 4, 4)
    accel, eng = routed(task)
    # inputs 16 B + config 48 B + weights 16 B = 2 + 6 + 2 bus words, each striped from bank 0
    assert accel.bank_words.tolist() == [1 + 2 + 1, 1 + 2 + 1, 1, 1]
    assert eng.counters.component_cycles["vm.input_handler"] == 1 + 2 + 1


def test_vm_tile_dims_fixed():
    with pytest.raises(ConfigError):
        VM.replace(**{"vm.tile_rows": 8}).vm.validate()


# -- scheduler -----------------------------------------------------------------

@pytest.mark.parametrize("broadcast, reads", [(True, 8), (False, 32)])
def test_single_tile_reads(rng, broadcast, reads):
    task = random_task(rng, 4, 4, 8)
    _, rep = run(task, VM.replace(**{"vm.broadcast_enabled": broadcast}))
    assert rep.counters.global_weight_buffer_reads == reads


def test_schedule_covers_every_pair_once():
    accel = VectorMacAccelerator(VM)
    sched = accel.schedule_tiles(4, 8)
    pairs = [(c, s) for c, work in sched for _, s in work]
    assert sorted(pairs) == [(c, s) for c in range(8) for s in range(4)]
    assert [c for c, _ in sched] == list(range(8))  # weight tiles in the outer loop


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_broadcast_law(M, N, K, seed):
    task = random_task(np.random.default_rng(seed), M, N, K)
    on, r_on = run(task)
    off, r_off = run(task, VM.replace(**{"vm.broadcast_enabled": False}))
    assert (on == off).all()
    assert r_off.counters.global_weight_buffer_reads == 4 * r_on.counters.global_weight_buffer_reads


# -- gemm unit -----------------------------------------------------------------

def test_unit_k4_cycles_and_macs():
    _, cycles, macs = gemm_unit_compute(np.ones((4, 4)), np.ones((4, 4)))
    assert (cycles, macs) == (1 + 2, 64)


def test_unit_zero_weights():
    acc, _, _ = gemm_unit_compute(np.zeros((1, 4)), np.full((4, 1), 99))
    assert (acc == 0).all()


def test_unit_matches_oracle_slice(rng):
    a = QuantTensor(rng.integers(0, 256, (8, 12), dtype=np.uint8), 1.0, 5)
    w = QuantTensor(rng.integers(0, 256, (12, 8), dtype=np.uint8), 1.0, 200)
    full = reference_gemm(a, w)
    acc, cycles, _ = gemm_unit_compute(w.adjusted()[:, 4:8], a.adjusted()[4:8])
    assert (acc == full[4:8, 4:8]).all()
    assert cycles == math.ceil(12 / 4) + 2


def test_unit_rejects_k0():
    with pytest.raises(ValueError):
        gemm_unit_compute(np.zeros((0, 4)), np.zeros((4, 0)))


# -- PPU -----------------------------------------------------------------------

def test_ppu_zero_tile():
    p = RequantParams.from_scale(0.5, np.zeros(4), 0)
    assert (ppu_process(np.zeros((4, 4)), p) == 0).all()


def test_ppu_matches_requantize_matrix(rng):
    acc = rng.integers(-30000, 30000, (4, 4)).astype(np.int32)
    p = RequantParams.from_scale(0.003, rng.integers(-99, 99, 4), 128, 10, 250)
    assert (ppu_process(acc, p) == requantize_matrix(acc, p).data).all()


def test_ppu_output_bytes(rng):
    task = random_task(rng, 16, 16, 16)
    _, on = run(task)
    _, off = run(task, VM.replace(**{"vm.ppu_enabled": False}))
    assert (on.counters.dma_bytes_out, off.counters.dma_bytes_out) == (256, 1024)


# -- crossbar ------------------------------------------------------------------

def test_crossbar_in_order_identity():
    tiles = [((r, c), f"t{r}{c}") for r in range(2) for c in range(3)]
    assert crossbar_collect(tiles, 2, 3) == tiles


def test_crossbar_reverse_arrival():
    tiles = [((r, c), f"t{r}{c}") for r in range(2) for c in range(3)]
    assert crossbar_collect(tiles[::-1], 2, 3) == tiles


@settings(max_examples=30)
@given(st.permutations([(r, c) for r in range(3) for c in range(4)]))
def test_crossbar_any_permutation(order):
    got = crossbar_collect([(t, t) for t in order], 3, 4)
    assert [t for t, _ in got] == [(r, c) for r in range(3) for c in range(4)]


def test_crossbar_duplicate_and_missing():
    xbar = OutputCrossbar(1, 2)
    xbar.accept((0, 1), "x")
    with pytest.raises(AccelError, match="duplicate"):
        xbar.accept((0, 1), "y")
    with pytest.raises(AccelError, match="missing"):
        xbar.finish()
    with pytest.raises(AccelError):
        xbar.accept((5, 0), "z")


# -- whole design --------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(1, 64), st.integers(1, 64), st.integers(1, 64), st.integers(0, 2**32 - 1))
def test_vm_exact(M, N, K, seed):
    task = random_task(np.random.default_rng(seed), M, N, K)
    out, rep = run(task)
    assert (out == oracle(task)).all()
    # output stationary: no partial sums leave the design on a full-K plan
    assert rep.counters.partial_sum_bytes_out == 0
    # utilization bound
    assert rep.counters.mac_ops_issued <= 4 * 16 * 4 * rep.accel_cycles


def test_vm_unit_cycle_accounting(rng):
    task = random_task(rng, 16, 8, 10)   # 4 strips, one per unit; 2 weight tiles
    _, rep = run(task)
    per_tile = math.ceil(10 / 4) + 2
    for u in range(4):
        assert rep.counters.component_cycles[f"vm.unit{u}"] == 2 * per_tile
    assert rep.counters.mac_ops_issued == 4 * 2 * 64 * math.ceil(10 / 4)
