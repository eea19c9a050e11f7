import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import oracle, random_task
from gemmsim.accel import (BufferOverflow, SystolicArrayAccelerator, VectorMacAccelerator,
                           ppu_process, run_tile, tile_latency)
from gemmsim.config import AccelConfig, ConfigError
from gemmsim.driver import dispatch_pipelined, pack_operands, plan_weight_tiles
from gemmsim.quant import RequantParams, requantize_matrix


def sa(size, **kw):
    changes = {"sa.rows": size, "sa.cols": size}
    changes.update({f"sa.{k}": v for k, v in kw.items()})
    return AccelConfig(kind="sa").replace(**changes)


def blocks(rng, R, C, K):
    return (rng.integers(-128, 128, (R, K)), rng.integers(-128, 128, (K, C)))


def test_1x1_array():
    a = np.array([[1, 2, 3, 4, 5]])
    w = np.array([[5], [4], [3], [2], [1]])
    acc, cycles, stalls, _ = run_tile(1, 1, a, w)
    assert (cycles, stalls) == (6, 0)
    assert acc[0, 0] == 5 + 8 + 9 + 8 + 5


def test_4x4_k8_takes_15_cycles(rng):
    a, w = blocks(rng, 4, 4, 8)
    acc, cycles, stalls, _ = run_tile(4, 4, a, w)
    assert (cycles, stalls) == (15, 0)
    assert (acc == a @ w).all()


def test_16x16_k32_matches_oracle(rng):
    a, w = blocks(rng, 16, 16, 32)
    acc, cycles, _, _ = run_tile(16, 16, a, w)
    assert (acc == a @ w).all()
    assert cycles == tile_latency(32, 16, 16)


def test_2x2_k1_queues_hold_one_operand_each(rng):
    a, w = blocks(rng, 2, 2, 1)
    _, _, _, arr = run_tile(2, 2, a, w, trace=True)
    assert [q.max_occupancy for q in arr.row_queues + arr.col_queues] == [1, 1, 1, 1]


def test_skew(rng):
    a, w = blocks(rng, 4, 4, 6)
    _, _, stalls, arr = run_tile(4, 4, a, w, trace=True)
    assert stalls == 0
    assert sorted(arr.injections) == sorted((k + r, r, k) for r in range(4) for k in range(6))


def test_shallow_queues_stall_producer(rng):
    a, w = blocks(rng, 4, 4, 16)
    _, _, _, arr = run_tile(4, 4, a, w, queue_depth=1)
    stalls = [q.producer_stalls for q in arr.row_queues + arr.col_queues]
    assert sum(stalls) > 0
    assert all(q.observed_full for q, s in zip(arr.row_queues + arr.col_queues, stalls) if s)


def test_queue_discipline(rng):
    R, C, K = 4, 8, 5
    a, w = blocks(rng, R, C, K)
    _, _, _, arr = run_tile(R, C, a, w, trace=True)
    assert len(arr.injections) == R * K
    assert all(len(q) == 0 for q in arr.row_queues + arr.col_queues)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([4, 8, 16]), st.integers(1, 64), st.integers(0, 2**32 - 1))
def test_tile_latency_closed_form(R, K, seed):
    a, w = blocks(np.random.default_rng(seed), R, R, K)
    acc, cycles, stalls, _ = run_tile(R, R, a, w)
    assert stalls == 0 and cycles == K + 2 * R - 1
    assert (acc == a @ w).all()


def test_k0_rejected():
    with pytest.raises(ValueError):
        run_tile(2, 2, np.zeros((2, 0)), np.zeros((0, 2)))


def test_sa_square_only():
    with pytest.raises(ConfigError):
        AccelConfig(kind="sa").replace(**{"sa.rows": 8}).sa.validate()


def test_sa_ppu_zero_tile_and_consistency(rng):
    p = RequantParams.from_scale(0.01, np.zeros(16), 77)
    assert (ppu_process(np.zeros((16, 16)), p) == 77).all()
    acc = rng.integers(-9999, 9999, (16, 16))
    q = RequantParams.from_scale(0.01, rng.integers(-50, 50, 16), 77)
    assert (ppu_process(acc, q) == requantize_matrix(acc, q).data).all()


def test_sa_output_bytes(rng):
    task = random_task(rng, 16, 16, 9)
    _, on = dispatch_pipelined([task], SystolicArrayAccelerator(sa(16)))
    _, off = dispatch_pipelined([task], SystolicArrayAccelerator(sa(16, ppu_enabled=False)))
    assert (on.counters.dma_bytes_out, off.counters.dma_bytes_out) == (256, 1024)


def test_input_buffer_overflow_names_buffer(rng):
    task = random_task(rng, 32, 4, 64)
    big = sa(16)
    bufs = pack_operands(task, plan_weight_tiles(32, 4, 64, big), big)
    with pytest.raises(BufferOverflow, match="global_input_buffer"):
        SystolicArrayAccelerator(sa(16, global_input_buffer_bytes=1024)).run(bufs)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([4, 8, 16]), st.integers(1, 64), st.integers(1, 64),
       st.integers(1, 64), st.integers(0, 2**32 - 1))
def test_sa_exact_and_matches_vm(size, M, N, K, seed):
    task = random_task(np.random.default_rng(seed), M, N, K)
    s_out, rep = dispatch_pipelined([task], SystolicArrayAccelerator(sa(size)))
    v_out, _ = dispatch_pipelined([task], VectorMacAccelerator(AccelConfig(kind="vm")))
    assert (s_out[0].data == oracle(task)).all()
    assert (s_out[0].data == v_out[0].data).all()
    assert rep.counters.pe_active_cycles <= size * size * rep.accel_cycles
