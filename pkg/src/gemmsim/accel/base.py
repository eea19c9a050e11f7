"""Pieces shared by both accelerator models."""
from __future__ import annotations

import math

import numpy as np

from ..config import AccelConfig
from ..driver import (CONFIG_WORDS, KIND_CONFIG, KIND_INPUTS, KIND_WEIGHTS,
                      DriverError, OutputLayout, PackedBuffer, decode_config,
                      unpack_blocks)
from ..quant import RequantParams, requantize_array
from ..sim import Engine


class AccelError(RuntimeError):
    pass


class BufferOverflow(AccelError):
    def __init__(self, buffer: str, need: int, capacity: int):
        self.buffer = buffer
        super().__init__(f"{buffer}: {need} bytes exceed capacity {capacity}")


class MalformedBuffer(AccelError):
    pass


def stripe_banks(n_words: int, num_banks: int) -> np.ndarray:
    """Bank index of each consecutive bus word (round-robin striping)."""
    return np.arange(n_words) % num_banks


def ppu_process(tile: np.ndarray, p: RequantParams) -> np.ndarray:
    """Requantize an accumulator tile; p.bias holds one entry per tile column."""
    if p.bias.shape[0] != tile.shape[1]:
        raise AccelError(f"PPU bias has {p.bias.shape[0]} entries for {tile.shape[1]} columns")
    return requantize_array(tile, p.bias[None, :], p)


class OutputCrossbar:
    """Reorders tagged (row_tile, col_tile) results into row-major tile order."""

    def __init__(self, n_row_tiles: int, n_col_tiles: int):
        self.n_row_tiles = n_row_tiles
        self.n_col_tiles = n_col_tiles
        self.pending = {}
        self.next = 0
        self.total = n_row_tiles * n_col_tiles

    def accept(self, tag, tile) -> list:
        r, c = tag
        if not (0 <= r < self.n_row_tiles and 0 <= c < self.n_col_tiles):
            raise AccelError(f"crossbar: tile tag {tag} out of range")
        idx = r * self.n_col_tiles + c
        if idx < self.next or idx in self.pending:
            raise AccelError(f"crossbar: duplicate tile tag {tag}")
        self.pending[idx] = tile
        out = []
        while self.next in self.pending:
            i = self.next
            out.append((divmod(i, self.n_col_tiles), self.pending.pop(i)))
            self.next += 1
        return out

    def finish(self):
        if self.next != self.total:
            missing = [divmod(i, self.n_col_tiles) for i in range(self.next, self.total)
                       if i not in self.pending]
            raise AccelError(f"crossbar: missing tile tags {missing[:8]}")


def crossbar_collect(tiles, n_row_tiles: int, n_col_tiles: int) -> list:
    """Order (tag, tile) pairs row-major; errors on duplicate or missing tags."""
    xbar = OutputCrossbar(n_row_tiles, n_col_tiles)
    out = []
    for tag, tile in tiles:
        out.extend(xbar.accept(tag, tile))
    xbar.finish()
    return out


class Accelerator:
    """One accelerator instance bound to one engine.

    `execute` consumes the buffer list the driver packed for one task and
    returns one output stream per weight tile.
    """

    kind = ""

    def __init__(self, config: AccelConfig):
        if config.kind != self.kind:
            config = config.replace(kind=self.kind)
        self.config = config
        self.layout = OutputLayout.for_config(config)
        self.engine = None
        # routed state of the current round
        self.inputs = None          # (M_pad, K) int32, zero-point adjusted
        self.inputs_raw = None      # (M_pad, K) uint8 as received
        self.weights = None         # (K, N_pad) uint8
        self.params = None
        self.apply_ppu = True
        self.partial = False
        self.lhs_zp = self.rhs_zp = 0
        self.M = self.N = self.K = 0
        self.bank_words = None

    @property
    def design(self):
        return self.config.vm if self.kind == "vm" else self.config.sa

    def bind(self, engine: Engine):
        if self.engine is not engine:
            self.engine = engine
            self.bank_words = np.zeros(self.design.num_banks, dtype=np.int64)
            self._on_bind()

    def _on_bind(self):
        pass

    def _require_engine(self):
        if self.engine is None:
            self.bind(Engine(self.config.bus))
        return self.engine

    # input handler ---------------------------------------------------------
    def _check_inputs_capacity(self, M_pad: int, K: int):
        raise NotImplementedError

    def _check_weights_capacity(self, nbytes: int, K: int):
        raise NotImplementedError

    def _route_one(self, buf: PackedBuffer):
        rows, width = self.config.native_rows, self.config.native_width
        if buf.kind == KIND_INPUTS:
            M, K = buf.M, buf.K
            m_pad = math.ceil(M / rows) * rows
            if len(buf.payload) < m_pad * K:
                raise MalformedBuffer(f"input payload {len(buf.payload)} < {m_pad * K} bytes")
            self._check_inputs_capacity(m_pad, K)
            self.inputs_raw = unpack_blocks(buf.payload, K, m_pad, rows).T.copy()
            self.M, self.K = M, K
            self.partial = buf.tile_count > 1
        elif buf.kind == KIND_CONFIG:
            if len(buf.payload) < 4 * (CONFIG_WORDS + buf.N):
                raise MalformedBuffer("config payload shorter than its bias array")
            self.lhs_zp, self.rhs_zp, self.params, apply = decode_config(buf.payload, buf.N)
            self.apply_ppu = apply and self.design.ppu_enabled
            self.N = buf.N
        elif buf.kind == KIND_WEIGHTS:
            if self.inputs_raw is None or self.params is None:
                raise MalformedBuffer("weights arrived before inputs/config")
            if buf.K != self.K or buf.N != self.N:
                raise MalformedBuffer(
                    f"weight tile {buf.K}x{buf.N} does not match routed {self.K}x{self.N}")
            n_pad = math.ceil(buf.N / width) * width
            if len(buf.payload) < n_pad * buf.K:
                raise MalformedBuffer(f"weight payload {len(buf.payload)} < {n_pad * buf.K}")
            self._check_weights_capacity(n_pad * buf.K, buf.K)
            self.weights = unpack_blocks(buf.payload, buf.K, n_pad, width).copy()
        else:
            raise MalformedBuffer(f"unknown buffer kind {buf.kind}")
        words = math.ceil(len(buf.payload) / self.config.bus.width_bytes)
        self.bank_words += np.bincount(stripe_banks(words, len(self.bank_words)),
                                       minlength=len(self.bank_words))
        return math.ceil(words / self.design.num_banks)

    def input_handler_route(self, buffers: list):
        """Generator: route buffers into on-chip buffers, one cycle per bus word per bank port."""
        cycles = 0
        for buf in buffers:
            if not isinstance(buf, PackedBuffer):
                raise MalformedBuffer(f"expected PackedBuffer, got {type(buf).__name__}")
            cycles += self._route_one(buf)
        if self.inputs_raw is not None:
            self.inputs = self.inputs_raw.astype(np.int32) - self.lhs_zp
        self.engine.counters.component_cycles[f"{self.kind}.input_handler"] += cycles
        if cycles:
            yield cycles

    # round execution -------------------------------------------------------
    def compute_round(self):
        """Generator returning the output stream for the routed weight tile."""
        raise NotImplementedError

    def execute(self, buffers: list):
        """Generator: transfer, route and compute every weight tile of one task."""
        engine = self._require_engine()
        streams = []
        group = []
        for buf in buffers:
            group.append(buf)
            if buf.kind != KIND_WEIGHTS:
                continue
            yield from engine.dma_parallel([(b.nbytes, b.link) for b in group])
            yield from self.input_handler_route(group)
            group = []
            stream = yield from self.compute_round()
            if self.partial:
                engine.counters.partial_sum_bytes_out += len(stream)
            yield from engine.dma(len(stream), 0, inbound=False)
            streams.append(stream)
        if group:
            raise MalformedBuffer("trailing buffers without a weight tile")
        return streams

    def run(self, buffers: list) -> list:
        """Execute one task's buffers standalone on the bound engine."""
        engine = self._require_engine()
        result = {}

        def proc():
            result["streams"] = yield from self.execute(buffers)

        engine.process(proc(), f"{self.kind}.run")
        engine.run()
        return result["streams"]

    # helpers ---------------------------------------------------------------
    def _bias_slice(self, c0: int, width: int) -> RequantParams:
        bias = np.zeros(width, dtype=np.int64)
        src = self.params.bias[c0:c0 + width]
        bias[:src.shape[0]] = src
        return self.params.with_bias(bias)

    def _finish_tile(self, acc: np.ndarray, c0: int) -> np.ndarray:
        if self.apply_ppu:
            return ppu_process(acc, self._bias_slice(c0, acc.shape[1]))
        return acc.astype(np.int32)

    def _weights_adjusted(self) -> np.ndarray:
        return self.weights.astype(np.int32) - self.rhs_zp


__all__ = ["Accelerator", "AccelError", "BufferOverflow", "MalformedBuffer",
           "OutputCrossbar", "crossbar_collect", "ppu_process", "stripe_banks",
           "DriverError"]
