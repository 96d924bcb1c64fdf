"""Simulated one-sided RDMA between the frontend plane and ring memory.

Transfers move bytes directly between a registered region and frontend
buffers; nothing in the device plane runs to service them.  Timing follows a
fixed-plus-per-byte cost model on a caller-supplied clock (a runtime's
``now``), so the same transport serves virtual and wall-clock runs.
"""

from __future__ import annotations

import enum
import itertools
import logging
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Protocol

import numpy as np

from .ring_buffer import Plane
from .runtime import At

logger = logging.getLogger(__name__)


class Clock(Protocol):
    def now(self) -> float: ...


class TransportError(Exception):
    pass


class DoubleRegistration(TransportError):
    pass


class TaskKind(enum.Enum):
    READ = "read"
    WRITE = "write"


@dataclass(eq=False)
class RegionHandle:
    region_id: int
    name: str
    base: int
    length: int
    readable: bool
    writable: bool
    plane: Plane
    memory: np.ndarray = field(repr=False)
    hooks: list[tuple[Callable[["TransferTask"], None], Plane]] = field(default_factory=list, repr=False)


@dataclass(eq=False)
class TransferTask:
    task_id: int
    kind: TaskKind
    region: RegionHandle
    offset: int
    length: int
    payload: Optional[bytes] = None
    dest: Optional[np.ndarray] = None
    simulated_latency: float = 0.0
    posted_at: float = 0.0
    completes_at: float = 0.0
    done: bool = False


@dataclass(eq=False)
class CompletionQueue:
    depth: int
    pending: deque = field(default_factory=deque)
    lock: threading.Lock = field(default_factory=threading.Lock)


@dataclass(eq=False)
class QueuePair:
    name: str
    cq: CompletionQueue
    inflight: deque = field(default_factory=deque)
    link_free_at: float = 0.0
    lock: threading.Lock = field(default_factory=threading.Lock)


class Transport:
    def __init__(self, clock: Clock, c_fixed_us: float = 2.0, c_byte_ns: float = 5.0,
                 cq_depth: int = 4096, task_pool: int = 8192) -> None:
        self.clock = clock
        self.c_fixed = c_fixed_us * 1e-6
        self.c_byte = c_byte_ns * 1e-9
        self.cq_depth = cq_depth
        self.task_pool = task_pool
        self._regions: dict[tuple[int, Plane], RegionHandle] = {}
        self._qps: list[QueuePair] = []
        self._ids = itertools.count(1)
        self._pool_used = 0
        self._lock = threading.Lock()
        self._next_base = 0x1000
        self.charged = 0.0  # cumulative simulated link time
        self.posted = 0
        self.completed = 0
        self._violations = 0

    # -- setup -----------------------------------------------------------------
    def register_region(self, memory: np.ndarray, length: Optional[int] = None, *, name: str = "",
                        plane: Plane = Plane.DEVICE, readable: bool = True,
                        writable: bool = True) -> RegionHandle:
        mem = memory.reshape(-1).view(np.uint8)
        length = mem.nbytes if length is None else length
        if length <= 0:
            raise TransportError("region length must be positive")
        if length > mem.nbytes:
            raise TransportError("region length exceeds backing memory")
        key = (mem.ctypes.data, plane)
        if key in self._regions:
            raise DoubleRegistration(f"memory at {mem.ctypes.data:#x} already registered")
        handle = RegionHandle(len(self._regions) + 1, name, self._next_base, length,
                              readable, writable, plane, mem[:length])
        self._next_base += (length + 0xFFF) & ~0xFFF
        self._regions[key] = handle
        return handle

    def add_hook(self, region: RegionHandle, fn: Callable[[TransferTask], None], plane: Plane) -> None:
        """Attach a completion callback; device-plane hooks break one-sidedness."""
        region.hooks.append((fn, plane))

    def create_qp(self, name: str, cq: Optional[CompletionQueue] = None) -> QueuePair:
        qp = QueuePair(name, cq or CompletionQueue(self.cq_depth))
        self._qps.append(qp)
        return qp

    # -- task construction -----------------------------------------------------
    def write_task(self, region: RegionHandle, offset: int, payload: bytes) -> TransferTask:
        return self._task(TaskKind.WRITE, region, offset, len(payload), payload=bytes(payload))

    def read_task(self, region: RegionHandle, offset: int, length: int,
                  dest: Optional[np.ndarray] = None) -> TransferTask:
        if dest is None:
            dest = np.empty(length, dtype=np.uint8)
        return self._task(TaskKind.READ, region, offset, length, dest=dest)

    def _task(self, kind: TaskKind, region: RegionHandle, offset: int, length: int,
              **kw) -> TransferTask:
        if length <= 0:
            raise TransportError("transfer length must be positive")
        if offset < 0 or offset + length > region.length:
            raise TransportError(f"[{offset}, {offset + length}) outside region {region.name!r}")
        if kind is TaskKind.WRITE and not region.writable:
            raise TransportError(f"region {region.name!r} is not writable")
        if kind is TaskKind.READ and not region.readable:
            raise TransportError(f"region {region.name!r} is not readable")
        return TransferTask(next(self._ids), kind, region, offset, length, **kw)

    # -- data path -------------------------------------------------------------
    def post(self, qp: QueuePair, tasks: list[TransferTask]) -> int:
        """Queue ``tasks`` as one coalesced batch; returns how many were accepted."""
        if not tasks:
            return 0
        with self._lock:
            free = self.task_pool - self._pool_used
            accepted = tasks[:max(0, free)]
            self._pool_used += len(accepted)
        if len(accepted) < len(tasks):
            logger.warning("task pool exhausted on %s: %d of %d accepted", qp.name,
                           len(accepted), len(tasks))
        if not accepted:
            return 0
        with qp.lock:
            now = self.clock.now()
            t = max(now, qp.link_free_at) + self.c_fixed
            charge = self.c_fixed
            for task in accepted:
                cost = task.length * self.c_byte
                t += cost
                charge += cost
                task.posted_at = now
                task.completes_at = t
                task.simulated_latency = t - now
                qp.inflight.append(task)
            qp.link_free_at = t
            self.charged += charge
            self.posted += len(accepted)
        return len(accepted)

    def _complete(self, task: TransferTask) -> None:
        mem = task.region.memory
        if task.kind is TaskKind.WRITE:
            mem[task.offset:task.offset + task.length] = np.frombuffer(task.payload, dtype=np.uint8)
        else:
            task.dest[:task.length] = mem[task.offset:task.offset + task.length]
        for fn, plane in task.region.hooks:
            if plane is Plane.DEVICE:
                self._violations += 1
            fn(task)
        task.done = True

    def poll(self, cq: CompletionQueue, max_completions: int) -> list[int]:
        """Nonblocking: return up to ``max_completions`` finished task ids, FIFO per queue pair."""
        out = []
        with cq.lock:  # several threads may drain one queue in wall mode
            now = self.clock.now()
            for qp in self._qps:
                if qp.cq is not cq:
                    continue
                with qp.lock:
                    while qp.inflight and len(cq.pending) < cq.depth and qp.inflight[0].completes_at <= now:
                        task = qp.inflight.popleft()
                        self._complete(task)
                        cq.pending.append(task.task_id)
            while cq.pending and len(out) < max_completions:
                out.append(cq.pending.popleft())
        if out:
            with self._lock:
                self._pool_used -= len(out)
                self.completed += len(out)
        return out

    def wait(self, qp: QueuePair, tasks: Iterable[TransferTask]):
        """Generator: drive completions on ``qp`` until every task in ``tasks`` is done."""
        tasks = list(tasks)
        while True:
            self.poll(qp.cq, qp.cq.depth)
            if all(t.done for t in tasks):
                return
            yield At(max(t.completes_at for t in tasks if not t.done))

    def one_sided_guarantee_audit(self) -> int:
        """Number of transfers that ran code registered by the device plane."""
        return self._violations
