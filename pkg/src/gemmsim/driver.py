"""Host-side GEMM driver: lowering, packing, weight tiling, pipelined dispatch.

Wire format
-----------
Every buffer starts with eight little-endian uint32 header words::

    [0] magic 0x53454344   [1] kind (0 weights, 1 inputs, 2 config)
    [2] payload bytes      [3] M   [4] N   [5] K
    [6] tile index         [7] tile count

Weight and input payloads are blocked for direct distribution to banks: the
matrix is cut into blocks of ``width`` output columns (weights) or rows
(inputs), and each block is laid out k-major, one ``width``-byte word per k.
Short blocks are padded with the operand zero point, and the payload is padded
to a whole number of bus words, so padding contributes nothing after
zero-point adjustment.

Config payloads are int32 words ``[lhs_zp, rhs_zp, multiplier, right_shift,
out_zp, clamp_min, clamp_max, apply_ppu]`` followed by the bias slice for the
tile's output columns.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .config import AccelConfig
from .quant import QuantError, QuantTensor, RequantParams, requantize_matrix
from .sim import CycleCounters, Engine

HEADER_MAGIC = 0x53454344
HEADER_WORDS = 8
HEADER_BYTES = 4 * HEADER_WORDS
KIND_WEIGHTS, KIND_INPUTS, KIND_CONFIG = 0, 1, 2
CONFIG_WORDS = 8

_HEADER = struct.Struct("<8I")


class DriverError(ValueError):
    pass


class CapacityError(DriverError):
    """Operands do not fit an on-chip buffer."""


# -- tasks and buffers ---------------------------------------------------------

@dataclass(frozen=True)
class GemmTask:
    """One offloaded GEMM: lhs (M x K inputs) times rhs (K x N weights)."""

    lhs: QuantTensor
    rhs: QuantTensor
    requant: RequantParams

    def __post_init__(self):
        if self.lhs.data.ndim != 2 or self.rhs.data.ndim != 2:
            raise DriverError("GEMM operands must be 2-D")
        if self.lhs.shape[1] != self.rhs.shape[0]:
            raise DriverError(f"inner dims differ: {self.lhs.shape} x {self.rhs.shape}")
        if min(self.lhs.shape + self.rhs.shape) < 1:
            raise DriverError("GEMM dims must be positive")
        if self.requant.bias.shape[0] != self.N:
            raise DriverError(f"bias length {self.requant.bias.shape[0]} != N={self.N}")

    @property
    def M(self):
        return self.lhs.shape[0]

    @property
    def K(self):
        return self.lhs.shape[1]

    @property
    def N(self):
        return self.rhs.shape[1]


@dataclass(frozen=True)
class PackedBuffer:
    header: tuple
    payload: bytes
    link: int = 0
    # host-side bookkeeping, not transmitted
    k_range: tuple = field(default=(0, 0), compare=False)
    n_range: tuple = field(default=(0, 0), compare=False)

    def __post_init__(self):
        if len(self.header) != HEADER_WORDS:
            raise DriverError("header must have 8 words")
        if self.header[0] != HEADER_MAGIC:
            raise DriverError(f"bad magic 0x{self.header[0]:08x}")
        if self.header[1] not in (KIND_WEIGHTS, KIND_INPUTS, KIND_CONFIG):
            raise DriverError(f"bad buffer kind {self.header[1]}")
        if self.header[2] != len(self.payload):
            raise DriverError(
                f"header payload size {self.header[2]} != actual {len(self.payload)}")

    kind = property(lambda self: self.header[1])
    M = property(lambda self: self.header[3])
    N = property(lambda self: self.header[4])
    K = property(lambda self: self.header[5])
    tile_index = property(lambda self: self.header[6])
    tile_count = property(lambda self: self.header[7])

    @property
    def nbytes(self) -> int:
        return HEADER_BYTES + len(self.payload)

    def to_bytes(self) -> bytes:
        return _HEADER.pack(*self.header) + self.payload

    @classmethod
    def from_bytes(cls, raw: bytes, link: int = 0) -> "PackedBuffer":
        if len(raw) < HEADER_BYTES:
            raise DriverError("buffer shorter than its header")
        header = _HEADER.unpack_from(raw)
        return cls(header, bytes(raw[HEADER_BYTES:]), link)


def make_header(kind, payload_bytes, M, N, K, tile_index, tile_count) -> tuple:
    return (HEADER_MAGIC, kind, payload_bytes, M, N, K, tile_index, tile_count)


# -- tile planning -------------------------------------------------------------

@dataclass(frozen=True)
class WeightTile:
    k_range: tuple
    n_range: tuple

    @property
    def k_len(self):
        return self.k_range[1] - self.k_range[0]

    @property
    def n_len(self):
        return self.n_range[1] - self.n_range[0]


@dataclass(frozen=True)
class TilePlan:
    M: int
    N: int
    K: int
    native_width: int
    tiles: tuple
    input_blocks: tuple  # per tile: the (m0, m1) row blocks paired with it

    @property
    def k_ranges(self) -> list:
        out = []
        for t in self.tiles:
            if t.k_range not in out:
                out.append(t.k_range)
        return out

    def footprint(self, tile: WeightTile) -> int:
        """Global weight buffer bytes one tile occupies (N padded to blocks)."""
        w = self.native_width
        return tile.k_len * math.ceil(tile.n_len / w) * w

    def validate(self, capacity: int | None = None) -> None:
        cover = np.zeros((self.K, self.N), dtype=np.int32)
        for t in self.tiles:
            cover[t.k_range[0]:t.k_range[1], t.n_range[0]:t.n_range[1]] += 1
            if capacity is not None and self.footprint(t) > capacity:
                raise CapacityError(
                    f"tile {t} needs {self.footprint(t)} bytes > capacity {capacity}")
        if not (cover == 1).all():
            raise DriverError("weight tiles do not exactly cover K x N")


def _split_even(total_units: int, parts: int) -> list:
    base, extra = divmod(total_units, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def _max_k_range(config: AccelConfig) -> int:
    w = config.native_width
    kmax = config.global_weight_buffer_bytes // w
    if config.kind == "vm":
        kmax = min(kmax, config.vm.local_weight_tile_bytes // config.vm.tile_cols)
    return kmax


def plan_weight_tiles(M: int, N: int, K: int, config: AccelConfig) -> TilePlan:
    """Split weights N-first (full K) into buffer-sized tiles; split K if forced."""
    if min(M, N, K) < 1:
        raise DriverError("GEMM dims must be positive")
    w = config.native_width
    cap = config.global_weight_buffer_bytes
    kmax = _max_k_range(config)
    if kmax < 1:
        raise CapacityError(
            f"global_weight_buffer: one native tile ({w} columns x 1 row) exceeds "
            f"capacity {cap} bytes")
    n_k = math.ceil(K / kmax)
    k_ranges = []
    k0 = 0
    for kl in _split_even(K, n_k):
        k_ranges.append((k0, k0 + kl))
        k0 += kl
    n_blocks = math.ceil(N / w)
    rows = config.native_rows
    blocks = tuple((m0, min(M, m0 + rows)) for m0 in range(0, M, rows))
    tiles = []
    for kr in k_ranges:
        kl = kr[1] - kr[0]
        per_tile = max(1, min(n_blocks, cap // (kl * w)))
        n_tiles = math.ceil(n_blocks / per_tile)
        n0 = 0
        for nb in _split_even(n_blocks, n_tiles):
            n1 = min(N, n0 + nb * w)
            tiles.append(WeightTile(kr, (n0, n1)))
            n0 = n1
    plan = TilePlan(M, N, K, w, tuple(tiles), tuple(blocks for _ in tiles))
    plan.validate(cap)
    return plan


def max_rows_per_task(K: int, N: int, config: AccelConfig) -> int:
    """Largest M whose inputs fit the input buffers for the plan's K-ranges."""
    plan = plan_weight_tiles(1, N, K, config)
    kl = max(k1 - k0 for k0, k1 in plan.k_ranges)
    if config.kind == "vm":
        vm = config.vm
        strips_per_unit = vm.local_input_buffer_bytes // (vm.tile_rows * kl)
        rows = strips_per_unit * vm.num_gemm_units * vm.tile_rows
    else:
        rows = (config.sa.global_input_buffer_bytes // kl) // config.sa.rows * config.sa.rows
    if rows < config.native_rows:
        raise CapacityError(
            f"input buffer cannot hold one {config.native_rows}-row block of K={kl}")
    return rows


def split_rows(task: GemmTask, rows: int) -> list:
    """Cut a task into row batches of at most `rows` lhs rows."""
    if task.M <= rows:
        return [task]
    out = []
    for m0 in range(0, task.M, rows):
        lhs = QuantTensor(task.lhs.data[m0:m0 + rows], task.lhs.scale, task.lhs.zero_point)
        out.append(GemmTask(lhs, task.rhs, task.requant))
    return out


# -- packing -------------------------------------------------------------------

def _pad_to(payload: bytearray, multiple: int, fill: int) -> bytes:
    rem = (-len(payload)) % multiple
    if rem:
        payload.extend(bytes([fill]) * rem)
    return bytes(payload)


def pack_blocks(mat: np.ndarray, width: int, zero_point: int) -> bytes:
    """Lay out a (K, X) matrix as X-blocks of `width`, k-major within each block."""
    k, x = mat.shape
    nb = math.ceil(x / width)
    padded = np.full((k, nb * width), zero_point, dtype=np.uint8)
    padded[:, :x] = mat
    return padded.reshape(k, nb, width).transpose(1, 0, 2).tobytes()


def unpack_blocks(payload: bytes, k: int, x: int, width: int) -> np.ndarray:
    """Inverse of pack_blocks; ignores any trailing bus padding."""
    nb = math.ceil(x / width)
    n = nb * width * k
    if len(payload) < n:
        raise DriverError(f"payload holds {len(payload)} bytes, need {n}")
    arr = np.frombuffer(payload[:n], dtype=np.uint8).reshape(nb, k, width)
    return arr.transpose(1, 0, 2).reshape(k, nb * width)[:, :x]


def encode_config(task: GemmTask, n_range: tuple, apply_ppu: bool) -> bytes:
    p = task.requant
    words = [task.lhs.zero_point, task.rhs.zero_point, p.multiplier, p.right_shift,
             p.output_zero_point, p.clamp_min, p.clamp_max, int(apply_ppu)]
    bias = p.bias[n_range[0]:n_range[1]].astype("<i4")
    return np.asarray(words, dtype="<i4").tobytes() + bias.tobytes()


def decode_config(payload: bytes, n: int) -> tuple:
    """Return (lhs_zp, rhs_zp, RequantParams, apply_ppu) from a config payload."""
    words = np.frombuffer(payload[:4 * (CONFIG_WORDS + n)], dtype="<i4")
    lhs_zp, rhs_zp, mult, shift, ozp, cmin, cmax, ppu = (int(v) for v in words[:CONFIG_WORDS])
    params = RequantParams(words[CONFIG_WORDS:CONFIG_WORDS + n], mult, shift, ozp, cmin, cmax)
    return lhs_zp, rhs_zp, params, bool(ppu)


def pack_operands(task: GemmTask, plan: TilePlan, config: AccelConfig) -> list:
    """Serialize a task into the buffers sent for each weight tile, in send order."""
    if (plan.M, plan.N, plan.K) != (task.M, task.N, task.K):
        raise DriverError("plan dims do not match the task")
    cap = config.global_weight_buffer_bytes
    plan.validate(cap)
    width = config.native_width
    rows = config.native_rows
    bus_word = config.bus.width_bytes
    links = config.bus.num_links
    k_ranges = plan.k_ranges
    apply_ppu = config.ppu_enabled and len(k_ranges) == 1
    T = len(plan.tiles)
    out = []
    sent_inputs = set()

    def emit(kind, payload, M, N, K, idx, count, kr, nr):
        hdr = make_header(kind, len(payload), M, N, K, idx, count)
        out.append(PackedBuffer(hdr, payload, len(out) % links, kr, nr))

    for i, tile in enumerate(plan.tiles):
        (k0, k1), (n0, n1) = tile.k_range, tile.n_range
        kl = k1 - k0
        if tile.k_range not in sent_inputs:
            sent_inputs.add(tile.k_range)
            lhs_t = task.lhs.data[:, k0:k1].T
            payload = _pad_to(bytearray(pack_blocks(lhs_t, rows, task.lhs.zero_point)),
                              bus_word, task.lhs.zero_point)
            emit(KIND_INPUTS, payload, task.M, task.N, kl,
                 k_ranges.index(tile.k_range), len(k_ranges), tile.k_range, (0, task.N))
        cfg = _pad_to(bytearray(encode_config(task, tile.n_range, apply_ppu)), bus_word, 0)
        emit(KIND_CONFIG, cfg, task.M, n1 - n0, kl, i, T, tile.k_range, tile.n_range)
        w = task.rhs.data[k0:k1, n0:n1]
        payload = pack_blocks(w, width, task.rhs.zero_point)
        if len(payload) > cap:
            raise CapacityError(
                f"global_weight_buffer: tile {i} needs {len(payload)} bytes > {cap}")
        payload = _pad_to(bytearray(payload), bus_word, task.rhs.zero_point)
        emit(KIND_WEIGHTS, payload, task.M, n1 - n0, kl, i, T, tile.k_range, tile.n_range)
    return out


def unpack_operands(buffers: list, config: AccelConfig) -> tuple:
    """Rebuild (lhs, rhs) uint8 matrices from packed buffers (round-trip check)."""
    width, rows = config.native_width, config.native_rows
    first = buffers[0]
    M = first.M
    inputs = {}
    weights = {}
    for b in buffers:
        if b.kind == KIND_INPUTS:
            inputs[b.k_range] = unpack_blocks(b.payload, b.K, M, rows).T
        elif b.kind == KIND_WEIGHTS:
            weights[(b.k_range, b.n_range)] = unpack_blocks(b.payload, b.K, b.N, width)
    K = max(k1 for k0, k1 in inputs)
    N = max(n1 for (_, (n0, n1)) in weights)
    lhs = np.zeros((M, K), dtype=np.uint8)
    rhs = np.zeros((K, N), dtype=np.uint8)
    for (k0, k1), blk in inputs.items():
        lhs[:, k0:k1] = blk
    for ((k0, k1), (n0, n1)), blk in weights.items():
        rhs[k0:k1, n0:n1] = blk
    return lhs, rhs


# -- output streams ------------------------------------------------------------

@dataclass(frozen=True)
class OutputLayout:
    """Order in which a design streams result tiles back to memory.

    vm: row-major tile order (crossbar), row-major inside a tile.
    sa: column-block-major tile order (production order), column-major inside
    a tile (column drain into the PPU).
    """

    kind: str
    tile_rows: int
    tile_cols: int

    @classmethod
    def for_config(cls, config: AccelConfig) -> "OutputLayout":
        if config.kind == "vm":
            return cls("vm", config.vm.tile_rows, config.vm.tile_cols)
        return cls("sa", config.sa.rows, config.sa.cols)

    def tile_order(self, M: int, N: int) -> list:
        mt = range(math.ceil(M / self.tile_rows))
        nt = range(math.ceil(N / self.tile_cols))
        if self.kind == "vm":
            return [(r, c) for r in mt for c in nt]
        return [(r, c) for c in nt for r in mt]

    def tile_slice(self, tile, M, N):
        r, c = tile
        r0, c0 = r * self.tile_rows, c * self.tile_cols
        return slice(r0, min(M, r0 + self.tile_rows)), slice(c0, min(N, c0 + self.tile_cols))

    def serialize_tile(self, block: np.ndarray) -> bytes:
        """Bytes of one valid (already cropped) tile in stream order."""
        if self.kind == "sa":
            block = block.T
        if block.dtype == np.uint8:
            return np.ascontiguousarray(block).tobytes()
        return np.ascontiguousarray(block, dtype="<i4").tobytes()


def unpack_outputs(stream: bytes, M: int, N: int, layout: OutputLayout) -> np.ndarray:
    """Reorder a design's tile stream into a row-major (M, N) array.

    Returns uint8 for PPU outputs (M*N bytes) or int32 for raw accumulators
    (4*M*N bytes).
    """
    if isinstance(layout, str):
        raise DriverError("layout must be an OutputLayout")
    n = len(stream)
    if n == M * N:
        flat = np.frombuffer(stream, dtype=np.uint8)
    elif n == 4 * M * N:
        flat = np.frombuffer(stream, dtype="<i4")
    else:
        raise DriverError(f"stream holds {n} bytes; expected {M * N} or {4 * M * N}")
    out = np.empty((M, N), dtype=flat.dtype)
    pos = 0
    for tile in layout.tile_order(M, N):
        rs, cs = layout.tile_slice(tile, M, N)
        h, w = rs.stop - rs.start, cs.stop - cs.start
        chunk = flat[pos:pos + h * w]
        pos += h * w
        out[rs, cs] = chunk.reshape(w, h).T if layout.kind == "sa" else chunk.reshape(h, w)
    return out.astype(np.int32) if out.dtype != np.uint8 else out


# -- im2col --------------------------------------------------------------------

def normalize_padding(padding, in_hw, kernel, stride) -> tuple:
    """Return (top, bottom, left, right) for int, pair, 4-tuple, 'same' or 'valid'."""
    if padding in (None, "valid"):
        return (0, 0, 0, 0)
    if padding == "same":
        pads = []
        for size, k, s in zip(in_hw, kernel, stride):
            out = math.ceil(size / s)
            total = max((out - 1) * s + k - size, 0)
            pads += [total // 2, total - total // 2]
        return tuple(pads)
    if isinstance(padding, int):
        return (padding,) * 4
    padding = tuple(int(p) for p in padding)
    if len(padding) == 2:
        return (padding[0], padding[0], padding[1], padding[1])
    if len(padding) == 4:
        return padding
    raise DriverError(f"bad padding spec {padding!r}")


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def conv_output_hw(in_hw, kernel, stride, pads) -> tuple:
    kh, kw = kernel
    sh, sw = stride
    hp = in_hw[0] + pads[0] + pads[1]
    wp = in_hw[1] + pads[2] + pads[3]
    if kh > hp or kw > wp:
        raise DriverError(f"kernel {kernel} larger than padded input {(hp, wp)}")
    return (hp - kh) // sh + 1, (wp - kw) // sw + 1


def im2col(x: QuantTensor, kernel, stride=1, padding=0) -> QuantTensor:
    """Unroll NHWC receptive fields into an (N*H_out*W_out, kh*kw*C) patch matrix.

    Columns are ordered (kh, kw, C) to match filters stored (C_out, kh, kw, C_in).
    Padded positions take the input zero point.
    """
    if x.data.ndim != 4:
        raise DriverError("im2col expects an NHWC tensor")
    kernel, stride = _pair(kernel), _pair(stride)
    if min(kernel) < 1 or min(stride) < 1:
        raise DriverError("kernel and stride must be positive")
    n, h, w, c = x.shape
    pads = normalize_padding(padding, (h, w), kernel, stride)
    ho, wo = conv_output_hw((h, w), kernel, stride, pads)
    xp = np.pad(x.data, ((0, 0), pads[:2], pads[2:], (0, 0)),
                constant_values=x.zero_point)
    win = np.lib.stride_tricks.sliding_window_view(xp, kernel, axis=(1, 2))
    win = win[:, ::stride[0], ::stride[1]][:, :ho, :wo]  # n, ho, wo, c, kh, kw
    patches = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kernel[0] * kernel[1] * c)
    return QuantTensor(np.ascontiguousarray(patches), x.scale, x.zero_point)


# -- dispatch ------------------------------------------------------------------

@dataclass
class CycleReport:
    """Result of one dispatch: makespan plus modeled CPU and accelerator time."""

    elapsed_cycles: int = 0
    pack_cycles: int = 0
    unpack_cycles: int = 0
    accel_cycles: int = 0
    num_tasks: int = 0
    pipelined: bool = True
    counters: CycleCounters = field(default_factory=CycleCounters)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["counters"] = self.counters.to_dict()
        return d


def _cpu_cycles(nbytes: int, per_byte: float) -> int:
    return math.ceil(nbytes * per_byte)


def finish_outputs(task: GemmTask, plan: TilePlan, streams: list, layout: OutputLayout):
    """Assemble per-tile streams into the task's requantized output tensor."""
    M, N = task.M, task.N
    final = None
    partial = np.zeros((M, N), dtype=np.int64)
    raw_seen = False
    for tile, stream in zip(plan.tiles, streams):
        n0, n1 = tile.n_range
        block = unpack_outputs(stream, M, n1 - n0, layout)
        if block.dtype == np.uint8:
            if final is None:
                final = np.empty((M, N), dtype=np.uint8)
            final[:, n0:n1] = block
        else:
            raw_seen = True
            partial[:, n0:n1] += block
    if raw_seen:
        if final is not None:
            raise DriverError("mixed raw and post-processed tiles in one task")
        p = task.requant
        return requantize_matrix(partial.astype(np.int32), p, p.output_scale)
    return QuantTensor(final, task.requant.output_scale, task.requant.output_zero_point)


def dispatch_pipelined(tasks: list, accel, engine: Engine | None = None,
                       pipelined: bool | None = None) -> tuple:
    """Run tasks through pack -> transfer/compute -> unpack on one engine.

    The modeled CPU packs task i+1 and unpacks finished tasks while the
    accelerator computes; with ``pipelined=False`` each task completes before
    the next is packed.
    """
    config = accel.config
    host = config.host
    if pipelined is None:
        pipelined = host.pipelined
    engine = engine or Engine(config.bus)
    accel.bind(engine)
    layout = OutputLayout.for_config(config)
    plans = [plan_weight_tiles(t.M, t.N, t.K, config) for t in tasks]
    outputs = [None] * len(tasks)
    report = CycleReport(num_tasks=len(tasks), pipelined=pipelined)
    start_counters = engine.snapshot_counters()
    start_cycle = engine.now

    to_accel = engine.channel(host.in_flight_tasks if pipelined else 1, "driver.to_accel")
    from_accel = engine.channel(max(1, len(tasks)), "driver.from_accel")

    def unpack(i, streams):
        nbytes = sum(len(s) for s in streams)
        cyc = _cpu_cycles(nbytes, host.unpack_cycles_per_byte)
        report.unpack_cycles += cyc
        outputs[i] = finish_outputs(tasks[i], plans[i], streams, layout)
        return cyc

    def cpu():
        done = 0
        for i, task in enumerate(tasks):
            bufs = pack_operands(task, plans[i], config)
            cyc = _cpu_cycles(sum(b.nbytes for b in bufs), host.pack_cycles_per_byte)
            report.pack_cycles += cyc
            if cyc:
                yield cyc
            yield to_accel.put((i, bufs))
            if not pipelined:
                j, streams = yield from_accel.get()
                cyc = unpack(j, streams)
                done += 1
                if cyc:
                    yield cyc
                continue
            while len(from_accel):
                j, streams = from_accel.try_get()
                cyc = unpack(j, streams)
                done += 1
                if cyc:
                    yield cyc
        yield to_accel.put(None)
        while done < len(tasks):
            j, streams = yield from_accel.get()
            cyc = unpack(j, streams)
            done += 1
            if cyc:
                yield cyc

    def device():
        while True:
            item = yield to_accel.get()
            if item is None:
                return
            i, bufs = item
            t0 = engine.now
            streams = yield from accel.execute(bufs)
            yield from_accel.put((i, streams))
            # completion signal: the host sees the result one cycle later
            yield 1
            report.accel_cycles += engine.now - t0

    engine.process(cpu(), "driver.cpu")
    engine.process(device(), f"{config.kind}.device")
    engine.run()
    report.elapsed_cycles = engine.now - start_cycle
    counters = engine.snapshot_counters()
    delta = CycleCounters()
    for k, v in counters.__dict__.items():
        base = getattr(start_counters, k)
        if isinstance(v, dict):
            getattr(delta, k).update({n: c - base.get(n, 0) for n, c in v.items()
                                      if c - base.get(n, 0)})
        else:
            setattr(delta, k, v - base)
    report.counters = delta
    return outputs, report
