"""Vector-MAC accelerator: four GEMM units, per-unit PPUs, output crossbar.

Each GEMM unit produces 4x4 output tiles. Every output owns macs_per_output
MACs working on consecutive k values; their products reduce through an adder
tree, so a tile takes ceil(K / macs_per_output) + adder_tree_latency cycles.
Output row strips (4 rows each) are assigned to units round-robin and stay in
the units' local input buffers for the whole task. The scheduler walks weight
tiles (4 output columns) in the outer loop and broadcasts each one to all
units.
"""
from __future__ import annotations

import math

import numpy as np

from .base import Accelerator, BufferOverflow, OutputCrossbar


def gemm_unit_compute(weight_tile: np.ndarray, input_block: np.ndarray,
                      macs_per_output: int = 4, adder_tree_latency: int = 2):
    """One unit's 4x4 tile from zero-point adjusted operands.

    `input_block` is (4, K), `weight_tile` is (K, 4). Returns (acc, cycles,
    mac_ops) where mac_ops counts every issued MAC lane, padding included.
    """
    k = input_block.shape[1]
    if k == 0:
        raise ValueError("K must be positive")
    if weight_tile.shape[0] != k:
        raise ValueError(f"operand depth mismatch: {weight_tile.shape[0]} vs {k}")
    steps = math.ceil(k / macs_per_output)
    rows, cols = input_block.shape[0], weight_tile.shape[1]
    # per-output lanes hold strided k slices; the adder tree sums the lanes
    a = np.zeros((rows, steps * macs_per_output), dtype=np.int64)
    b = np.zeros((steps * macs_per_output, cols), dtype=np.int64)
    a[:, :k] = input_block
    b[:k] = weight_tile
    a = a.reshape(rows, steps, macs_per_output)
    b = b.reshape(steps, macs_per_output, cols)
    lanes = np.einsum("isl,slj->ijl", a, b)
    acc = lanes.sum(axis=2)
    mac_ops = rows * cols * macs_per_output * steps
    return acc, steps + adder_tree_latency, mac_ops


class VectorMacAccelerator(Accelerator):
    kind = "vm"

    def _strips_of(self, unit: int, n_strips: int) -> list:
        return list(range(unit, n_strips, self.design.num_gemm_units))

    def _check_inputs_capacity(self, m_pad: int, K: int):
        vm = self.design
        n_strips = m_pad // vm.tile_rows
        most = len(self._strips_of(0, n_strips))
        need = most * vm.tile_rows * K
        if need > vm.local_input_buffer_bytes:
            raise BufferOverflow("local_input_buffer", need, vm.local_input_buffer_bytes)
        if vm.tile_cols * K > vm.local_weight_tile_bytes:
            raise BufferOverflow("local_weight_tile", vm.tile_cols * K,
                                 vm.local_weight_tile_bytes)

    def _check_weights_capacity(self, nbytes: int, K: int):
        cap = self.design.global_weight_buffer_bytes
        if nbytes > cap:
            raise BufferOverflow("global_weight_buffer", nbytes, cap)

    @property
    def global_weight_buffer(self) -> np.ndarray:
        return self.weights

    def local_input_buffer(self, unit: int) -> dict:
        """Input rows resident in one unit: {strip index: (4, K) uint8}."""
        rows = self.design.tile_rows
        n_strips = self.inputs_raw.shape[0] // rows
        return {s: self.inputs_raw[s * rows:(s + 1) * rows]
                for s in self._strips_of(unit, n_strips)}

    def schedule_tiles(self, n_strips: int, n_col_tiles: int) -> list:
        """Broadcast schedule: per weight tile, the (unit, strip) pairs computed."""
        units = self.design.num_gemm_units
        return [(c, [(u, s) for u in range(units) for s in self._strips_of(u, n_strips)])
                for c in range(n_col_tiles)]

    def compute_round(self):
        engine = self.engine
        ctr = engine.counters
        vm = self.design
        units = vm.num_gemm_units
        tr, tc = vm.tile_rows, vm.tile_cols
        a = self.inputs
        w = self._weights_adjusted()
        K = a.shape[1]
        n_strips = a.shape[0] // tr
        n_ctiles = w.shape[1] // tc
        M, N = self.M, self.N
        tile_words = K  # one 32-bit word (4 columns) per k
        read_cycles = math.ceil(tile_words / vm.num_banks)

        work = [engine.channel(1, f"vm.work{u}") for u in range(units)]
        done = engine.channel(units, "vm.unit_done")
        to_ppu = [engine.channel(2, f"vm.ppu_in{u}") for u in range(units)]
        to_xbar = engine.channel(2 * units, "vm.xbar_in")
        result = engine.channel(1, "vm.result")
        port = engine.channel(1, "vm.global_weight_port")

        def read_tile(owner):
            # the global weight buffer has one read port shared by all readers
            yield port.put(owner)
            ctr.global_weight_buffer_reads += tile_words
            ctr.component_cycles["vm.weight_reads"] += read_cycles
            yield read_cycles
            yield port.get()

        def scheduler():
            for c in range(n_ctiles):
                if vm.broadcast_enabled:
                    yield from read_tile("scheduler")
                for u in range(units):
                    yield work[u].put(c)
                for _ in range(units):
                    yield done.get()
            for u in range(units):
                yield work[u].put(None)

        def unit(u):
            strips = self._strips_of(u, n_strips)
            while True:
                c = yield work[u].get()
                if c is None:
                    yield to_ppu[u].put(None)
                    return
                if not vm.broadcast_enabled:
                    yield from read_tile(f"unit{u}")
                wt = w[:, c * tc:(c + 1) * tc]
                for s in strips:
                    blk = a[s * tr:(s + 1) * tr]
                    acc, cycles, macs = gemm_unit_compute(
                        wt, blk, vm.macs_per_output, vm.adder_tree_latency_cycles)
                    ctr.local_buffer_reads += 2 * K
                    ctr.mac_ops_issued += macs
                    ctr.pe_active_cycles += macs
                    ctr.component_cycles[f"vm.unit{u}"] += cycles
                    yield cycles
                    # output-stationary: tiles leave the unit only when complete
                    yield to_ppu[u].put(((s, c), acc))
                yield done.put(u)

        def ppu(u):
            while True:
                item = yield to_ppu[u].get()
                if item is None:
                    yield to_xbar.put(None)
                    return
                tag, acc = item
                yield vm.ppu_latency_cycles
                ctr.component_cycles[f"vm.ppu{u}"] += vm.ppu_latency_cycles
                yield to_xbar.put((tag, self._finish_tile(acc, tag[1] * tc)))

        def crossbar():
            xbar = OutputCrossbar(n_strips, n_ctiles)
            chunks = []
            finished = 0
            while finished < units:
                item = yield to_xbar.get()
                if item is None:
                    finished += 1
                    continue
                tag, tile = item
                for (r, c), t in xbar.accept(tag, tile):
                    rows = min(tr, M - r * tr)
                    cols = min(tc, N - c * tc)
                    chunks.append(self.layout.serialize_tile(t[:rows, :cols]))
                    ctr.component_cycles["vm.crossbar"] += 1
                    yield 1
            xbar.finish()
            yield result.put(b"".join(chunks))

        engine.process(scheduler(), "vm.scheduler")
        for u in range(units):
            engine.process(unit(u), f"vm.unit{u}")
        for u in range(units):
            engine.process(ppu(u), f"vm.ppu{u}")
        engine.process(crossbar(), "vm.crossbar")
        stream = yield result.get()
        return stream
