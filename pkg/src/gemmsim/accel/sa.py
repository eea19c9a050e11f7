"""Output-stationary systolic array accelerator with scheduler-fed operand queues.

Inputs move right and weights move down one cell per cycle. Row r of the input
block enters the array r cycles after row 0 (and column c of the weight block c
cycles after column 0), so element k of row r meets element k of column c in
cell (r, c). Every cycle each cell first multiplies its latched operands into
its accumulator, then the operands shift and the edge cells latch new values
from the queues. One tile therefore takes K + R + C - 1 cycles from the first
injection to the last accumulation, provided no queue runs dry.
"""
from __future__ import annotations

import math

import numpy as np

from .base import Accelerator, BufferOverflow


class SystolicArray:
    """R x C MAC grid plus its R row queues and C column queues."""

    def __init__(self, engine, rows: int, cols: int, queue_depth: int = 8,
                 prefix: str = "sa", trace: bool = False):
        self.engine = engine
        self.rows = rows
        self.cols = cols
        self.prefix = prefix
        self.row_queues = [engine.channel(queue_depth, f"{prefix}.rowq{r}") for r in range(rows)]
        self.col_queues = [engine.channel(queue_depth, f"{prefix}.colq{c}") for c in range(cols)]
        self.trace = trace
        self.injections = []  # (tile cycle, row, k) when tracing
        self.tile_log = []

    @property
    def num_queues(self) -> int:
        return self.rows + self.cols

    def fill_queues(self, pairs):
        """Scheduler process: stream each (R x K inputs, K x C weights) pair into the queues.

        One operand per queue per cycle, running ahead of the array as far as
        queue depth allows; a full queue stalls only that queue's producer slot.
        """
        ctr = self.engine.counters
        seqs = []
        for r in range(self.rows):
            seqs.append(np.concatenate([a[r] for a, _ in pairs]).tolist())
        for c in range(self.cols):
            seqs.append(np.concatenate([w[:, c] for _, w in pairs]).tolist())
        queues = self.row_queues + self.col_queues
        ptr = [0] * len(queues)
        lens = [len(s) for s in seqs]
        live = [i for i in range(len(queues)) if lens[i]]
        cycles = 0
        while live:
            still = []
            for i in live:
                if queues[i].try_put(seqs[i][ptr[i]]):
                    ptr[i] += 1
                if ptr[i] < lens[i]:
                    still.append(i)
            live = still
            cycles += 1
            yield 1
        ctr.component_cycles[f"{self.prefix}.scheduler"] += cycles

    def compute_tile(self, K: int):
        """Array process for one tile; returns (acc, cycles, stall_cycles)."""
        if K <= 0:
            raise ValueError("K must be positive")
        R, C = self.rows, self.cols
        ctr = self.engine.counters
        in_reg = np.zeros((R, C), dtype=np.int64)
        w_reg = np.zeros((R, C), dtype=np.int64)
        in_val = np.zeros((R, C), dtype=bool)
        w_val = np.zeros((R, C), dtype=bool)
        acc = np.zeros((R, C), dtype=np.int64)
        rq = self.row_queues
        cq = self.col_queues
        total = R * C * K
        macs = step = cycles = stalls = 0
        while macs < total:
            r_lo, r_hi = max(0, step - K + 1), min(R, step + 1)
            c_lo, c_hi = max(0, step - K + 1), min(C, step + 1)
            if (any(not rq[r].queue for r in range(r_lo, r_hi))
                    or any(not cq[c].queue for c in range(c_lo, c_hi))):
                stalls += 1
                cycles += 1
                yield 1
                continue
            both = in_val & w_val
            n = int(np.count_nonzero(both))
            if n:
                acc += in_reg * w_reg  # idle registers hold zero
                macs += n
            in_reg[:, 1:] = in_reg[:, :-1]
            in_val[:, 1:] = in_val[:, :-1]
            w_reg[1:, :] = w_reg[:-1, :]
            w_val[1:, :] = w_val[:-1, :]
            in_reg[:, 0] = 0
            in_val[:, 0] = False
            w_reg[0, :] = 0
            w_val[0, :] = False
            for r in range(r_lo, r_hi):
                in_reg[r, 0] = rq[r]._pop()
                in_val[r, 0] = True
                if self.trace:
                    self.injections.append((cycles, r, step - r))
            for c in range(c_lo, c_hi):
                w_reg[0, c] = cq[c]._pop()
                w_val[0, c] = True
            step += 1
            cycles += 1
            yield 1
        ctr.mac_ops_issued += macs
        ctr.pe_active_cycles += macs
        ctr.component_cycles[f"{self.prefix}.array"] += cycles - stalls
        if stalls:
            ctr.stall_cycles[f"{self.prefix}.array"] += stalls
        self.tile_log.append({"K": K, "cycles": cycles, "stalls": stalls})
        return acc, cycles, stalls


def tile_latency(K: int, rows: int, cols: int) -> int:
    """Unstalled cycles for one tile."""
    return K + rows + cols - 1


class SystolicArrayAccelerator(Accelerator):
    kind = "sa"

    def _on_bind(self):
        sa = self.design
        self.array = SystolicArray(self.engine, sa.rows, sa.cols, sa.queue_depth)

    def _check_inputs_capacity(self, m_pad: int, K: int):
        cap = self.design.global_input_buffer_bytes
        if m_pad * K > cap:
            raise BufferOverflow("global_input_buffer", m_pad * K, cap)

    def _check_weights_capacity(self, nbytes: int, K: int):
        cap = self.design.global_weight_buffer_bytes
        if nbytes > cap:
            raise BufferOverflow("global_weight_buffer", nbytes, cap)

    def compute_round(self):
        engine = self.engine
        ctr = engine.counters
        sa = self.design
        R, C = sa.rows, sa.cols
        array = self.array
        a = self.inputs
        w = self._weights_adjusted()
        K = a.shape[1]
        n_rb = a.shape[0] // R
        n_cb = w.shape[1] // C
        M, N = self.M, self.N
        order = self.layout.tile_order(M, N)
        pairs = [(a[r * R:(r + 1) * R], w[:, c * C:(c + 1) * C]) for r, c in order]
        ctr.global_input_buffer_reads += len(pairs) * math.ceil(R * K / 4)
        ctr.global_weight_buffer_reads += len(pairs) * math.ceil(C * K / 4)
        assert len(pairs) == n_rb * n_cb

        to_ppu = engine.channel(1, "sa.ppu_in")
        result = engine.channel(1, "sa.result")

        def compute():
            for tag in order:
                acc, _, _ = yield from array.compute_tile(K)
                yield to_ppu.put((tag, acc))
            yield to_ppu.put(None)

        def ppu():
            chunks = []
            while True:
                item = yield to_ppu.get()
                if item is None:
                    break
                (r, c), acc = item
                # column-by-column drain, then the pipeline latency
                cycles = C + sa.ppu_latency_cycles
                ctr.component_cycles["sa.ppu"] += cycles
                yield cycles
                rows = min(R, M - r * R)
                cols = min(C, N - c * C)
                out = self._finish_tile(acc, c * C)
                chunks.append(self.layout.serialize_tile(out[:rows, :cols]))
            yield result.put(b"".join(chunks))

        engine.process(array.fill_queues(pairs), "sa.scheduler")
        engine.process(compute(), "sa.array")
        engine.process(ppu(), "sa.ppu")
        stream = yield result.get()
        return stream


def run_tile(rows: int, cols: int, a_blk: np.ndarray, w_blk: np.ndarray,
             queue_depth: int = 8, trace: bool = False):
    """Testbench: one tile through scheduler + array on a fresh engine.

    Returns (acc, cycles, stalls, array).
    """
    from ..sim import Engine

    engine = Engine()
    array = SystolicArray(engine, rows, cols, queue_depth, trace=trace)
    out = {}

    def compute():
        out["res"] = yield from array.compute_tile(a_blk.shape[1])

    engine.process(array.fill_queues([(a_blk, w_blk)]), "sa.scheduler")
    engine.process(compute(), "sa.array")
    engine.run()
    acc, cycles, stalls = out["res"]
    return acc, cycles, stalls, array
