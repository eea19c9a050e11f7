"""Cycle-quantized, deterministic transaction-level simulation kernel.

Processes are generators. Each one yields a command and is resumed by the
engine:

* an ``int`` n >= 1 sleeps n cycles (``yield 1`` ends the current cycle),
* ``chan.put(item)`` blocks until the channel has room,
* ``chan.get()`` blocks until an item is available and evaluates to it.

Within a cycle, processes run in registration order. A blocked process retries
once per cycle in its slot, so a put that fails in cycle t because a later
process only frees the slot in cycle t succeeds in t + 1. Retries are resolved
lazily (waiters are woken by channel activity) but the counted stall cycles are
exactly those of the eager retry-every-cycle semantics.
"""
from __future__ import annotations

import copy
import heapq
import math
from collections import Counter, deque
from dataclasses import dataclass, field


class SimError(RuntimeError):
    pass


class DeadlockError(SimError):
    def __init__(self, cycle, blocked):
        self.cycle = cycle
        self.blocked = blocked
        desc = ", ".join(f"{proc} on {op} {chan}" for proc, op, chan in blocked)
        super().__init__(f"deadlock at cycle {cycle}: {desc}")


@dataclass
class CycleCounters:
    """Global counters for one engine. Buffer reads are in 32-bit words."""

    component_cycles: Counter = field(default_factory=Counter)
    stall_cycles: Counter = field(default_factory=Counter)
    dma_bytes_in: int = 0
    dma_bytes_out: int = 0
    global_weight_buffer_reads: int = 0
    global_input_buffer_reads: int = 0
    local_buffer_reads: int = 0
    mac_ops_issued: int = 0
    pe_active_cycles: int = 0
    partial_sum_bytes_out: int = 0

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items()}
        d["component_cycles"] = dict(sorted(self.component_cycles.items()))
        d["stall_cycles"] = dict(sorted(self.stall_cycles.items()))
        return d

    def merge(self, other: "CycleCounters") -> None:
        for k, v in other.__dict__.items():
            if isinstance(v, Counter):
                getattr(self, k).update(v)
            else:
                setattr(self, k, getattr(self, k) + v)


class _Put:
    __slots__ = ("chan", "item")

    def __init__(self, chan, item):
        self.chan = chan
        self.item = item


class _Get:
    __slots__ = ("chan",)

    def __init__(self, chan):
        self.chan = chan


class FifoChannel:
    """Bounded FIFO between processes with producer/consumer stall counters."""

    def __init__(self, capacity: int, name: str = "chan", engine: "Engine | None" = None):
        if capacity < 1:
            raise ValueError("channel capacity must be >= 1")
        self.capacity = capacity
        self.name = name
        self.engine = engine
        self.queue = deque()
        self.producer_stalls = 0
        self.consumer_stalls = 0
        self.max_occupancy = 0
        self.observed_full = False
        self._put_waiters = deque()
        self._get_waiters = deque()

    def __len__(self):
        return len(self.queue)

    def __repr__(self):
        return f"FifoChannel({self.name!r}, {len(self.queue)}/{self.capacity})"

    @property
    def full(self) -> bool:
        return len(self.queue) >= self.capacity

    def put(self, item) -> _Put:
        return _Put(self, item)

    def get(self) -> _Get:
        return _Get(self)

    def _push(self, item):
        self.queue.append(item)
        n = len(self.queue)
        if n > self.max_occupancy:
            self.max_occupancy = n
        if n >= self.capacity:
            self.observed_full = True
        if self.engine is not None and self._get_waiters:
            self.engine._wake(self._get_waiters)

    def _pop(self):
        item = self.queue.popleft()
        if self.engine is not None and self._put_waiters:
            self.engine._wake(self._put_waiters)
        return item

    # non-blocking forms for processes that poll several channels per cycle
    def try_put(self, item) -> bool:
        if self.full:
            self.observed_full = True
            self.producer_stalls += 1
            return False
        self._push(item)
        return True

    def try_get(self):
        """Pop the head or return None (counts a consumer stall)."""
        if not self.queue:
            self.consumer_stalls += 1
            return None
        return self._pop()

    def peek(self):
        return self.queue[0] if self.queue else None


@dataclass(frozen=True)
class BusModel:
    """DMA links between host memory and the accelerator."""

    width_bytes: int = 8
    num_links: int = 2
    setup_cycles: int = 10

    def __post_init__(self):
        if self.width_bytes < 1 or self.num_links < 1 or self.setup_cycles < 0:
            raise ValueError("bus needs width_bytes >= 1, num_links >= 1, setup >= 0")

    def transfer_cycles(self, nbytes: int) -> int:
        return self.setup_cycles + math.ceil(nbytes / self.width_bytes)


def dma_transfer(nbytes: int, link: int, bus: BusModel) -> int:
    """Cycles one transfer occupies its link."""
    if nbytes < 0:
        raise ValueError("negative transfer size")
    if not 0 <= link < bus.num_links:
        raise ValueError(f"link {link} out of range for {bus.num_links} links")
    return bus.transfer_cycles(nbytes)


class _Proc:
    __slots__ = ("gen", "name", "pid", "send", "blocked_on", "blocked_since", "done")

    def __init__(self, gen, name, pid):
        self.gen = gen
        self.name = name
        self.pid = pid
        self.send = None
        self.blocked_on = None
        self.blocked_since = 0
        self.done = False

    def __repr__(self):
        return self.name


class Engine:
    """Single-threaded discrete-cycle scheduler."""

    def __init__(self, bus: BusModel | None = None):
        self.now = 0
        self.bus = bus or BusModel()
        self.counters = CycleCounters()
        self.channels: list[FifoChannel] = []
        self._heap = []
        self._procs: list[_Proc] = []
        self._current: _Proc | None = None
        # AXI-style links have independent read and write channels
        self._link_free = {True: [0] * self.bus.num_links, False: [0] * self.bus.num_links}

    # construction ---------------------------------------------------------
    def channel(self, capacity: int, name: str) -> FifoChannel:
        ch = FifoChannel(capacity, name, self)
        self.channels.append(ch)
        return ch

    def process(self, gen, name: str | None = None) -> _Proc:
        p = _Proc(gen, name or f"proc{len(self._procs)}", len(self._procs))
        self._procs.append(p)
        heapq.heappush(self._heap, (self.now, p.pid))
        return p

    # DMA ---------------------------------------------------------------------
    def reserve_link(self, nbytes: int, link: int, inbound: bool = True) -> int:
        """Book a transfer on `link` starting no earlier than now; return its end cycle."""
        cycles = dma_transfer(nbytes, link, self.bus)
        free = self._link_free[inbound]
        start = max(self.now, free[link])
        free[link] = start + cycles
        if inbound:
            self.counters.dma_bytes_in += nbytes
        else:
            self.counters.dma_bytes_out += nbytes
        direction = "in" if inbound else "out"
        self.counters.component_cycles[f"dma_{direction}{link}"] += cycles
        return start + cycles

    def dma(self, nbytes: int, link: int, inbound: bool = True):
        """Generator: move nbytes over `link`; transfers on one link serialize."""
        end = self.reserve_link(nbytes, link, inbound)
        if end > self.now:
            yield end - self.now

    def dma_parallel(self, transfers, inbound: bool = True):
        """Generator: issue (nbytes, link) transfers together, wait for the last."""
        end = self.now
        for nbytes, link in transfers:
            end = max(end, self.reserve_link(nbytes, link, inbound))
        if end > self.now:
            yield end - self.now

    def snapshot_counters(self) -> CycleCounters:
        snap = copy.deepcopy(self.counters)
        for ch in self.channels:
            if ch.producer_stalls:
                snap.stall_cycles[f"{ch.name}.producer"] += ch.producer_stalls
            if ch.consumer_stalls:
                snap.stall_cycles[f"{ch.name}.consumer"] += ch.consumer_stalls
        return snap

    # scheduling ------------------------------------------------------------
    def _wake(self, waiters: deque):
        cur = self._current
        while waiters:
            p = waiters.popleft()
            if p.done:
                continue
            # a waiter earlier in the order already failed its retry this cycle
            t = self.now if cur is None or p.pid > cur.pid else self.now + 1
            heapq.heappush(self._heap, (t, p.pid))

    def _step(self, p: _Proc):
        self._current = p
        while True:
            if p.blocked_on is not None:
                cmd = p.blocked_on
                p.blocked_on = None
                stalled = self.now - p.blocked_since
                ch = cmd.chan
                if isinstance(cmd, _Put):
                    if ch.full:
                        p.blocked_on = cmd
                        ch._put_waiters.append(p)
                        return
                    ch.producer_stalls += stalled
                    ch._push(cmd.item)
                    p.send = None
                else:
                    if not ch.queue:
                        p.blocked_on = cmd
                        ch._get_waiters.append(p)
                        return
                    ch.consumer_stalls += stalled
                    p.send = ch._pop()
            try:
                cmd = p.gen.send(p.send)
            except StopIteration:
                p.done = True
                return
            p.send = None
            if isinstance(cmd, int):
                if cmd < 0:
                    raise SimError(f"{p.name} yielded negative delay {cmd}")
                if cmd == 0:
                    continue
                heapq.heappush(self._heap, (self.now + cmd, p.pid))
                return
            if isinstance(cmd, _Put):
                ch = cmd.chan
                if not ch.full:
                    ch._push(cmd.item)
                    continue
                ch.observed_full = True
            elif isinstance(cmd, _Get):
                ch = cmd.chan
                if ch.queue:
                    p.send = ch._pop()
                    continue
            else:
                raise SimError(f"{p.name} yielded unsupported command {cmd!r}")
            p.blocked_on = cmd
            p.blocked_since = self.now
            (ch._put_waiters if isinstance(cmd, _Put) else ch._get_waiters).append(p)
            return

    def run(self) -> int:
        """Run until every process has finished or waits on an empty channel.

        Returns the final cycle. Raises DeadlockError if some process is stuck
        on a full channel with nothing left to drain it.
        """
        heap = self._heap
        procs = self._procs
        while heap:
            t, pid = heapq.heappop(heap)
            p = procs[pid]
            if p.done:
                continue
            # stale entries: a process is scheduled at most once per cycle
            if heap and heap[0] == (t, pid):
                continue
            self.now = t
            self._step(p)
        self._current = None
        blocked = [(p.name, "put" if isinstance(p.blocked_on, _Put) else "get",
                    p.blocked_on.chan.name)
                   for p in procs if not p.done and p.blocked_on is not None]
        if any(op == "put" for _, op, _ in blocked):
            raise DeadlockError(self.now, blocked)
        return self.now


def run_until_idle(processes, engine: Engine | None = None) -> int:
    """Register generator processes on an engine and run it to quiescence."""
    engine = engine or Engine()
    for i, gen in enumerate(processes):
        engine.process(gen, f"proc{i}")
    return engine.run()
