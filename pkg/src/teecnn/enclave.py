"""Simulated SGX-style secure memory.

The enclave tracks residency of fixed-size pages.  Touching a page that is not
resident is a fault: the page is transferred in (``cost_fault``) and, when the
resident set is full, the policy picks a victim that is written back if it is
dirty (``cost_evict``).  Buffers live in an unbounded page-aligned virtual
space; only residency is constrained.  Nothing here stores data -- executors
compute with numpy and report their access order to the enclave.
"""

from __future__ import annotations

import io
import itertools
from collections import OrderedDict
from dataclasses import dataclass, fields
from typing import Callable, Iterable, TextIO

from .errors import BoundsError

MiB = 1 << 20


@dataclass(frozen=True)
class EnclaveConfig:
    secure_bytes: int = 28 * MiB
    page_bytes: int = 4096
    cost_fault: float = 1.0
    cost_evict: float = 1.0
    link_pages_per_unit: float = 1.0

    def __post_init__(self):
        p = self.page_bytes
        if p < 1 or p & (p - 1):
            raise ValueError(f"page size {p} is not a power of two")
        if self.secure_bytes < 2 * p:
            raise ValueError(
                f"secure memory of {self.secure_bytes} bytes holds fewer than two {p}-byte pages")
        if self.cost_fault < 0 or self.cost_evict < 0 or self.link_pages_per_unit <= 0:
            raise ValueError("costs must be non-negative and link bandwidth positive")

    @property
    def capacity(self) -> int:
        """Resident page capacity."""
        return self.secure_bytes // self.page_bytes


@dataclass
class PagingStats:
    faults: int = 0
    evictions: int = 0
    clean_evictions: int = 0
    dirty_evictions: int = 0
    resident_peak: int = 0
    total_cost: float = 0.0
    touches: int = 0

    def __sub__(self, other: "PagingStats") -> "PagingStats":
        delta = PagingStats(**{f.name: getattr(self, f.name) - getattr(other, f.name)
                               for f in fields(self)})
        delta.resident_peak = self.resident_peak
        return delta

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class BufferHandle:
    id: int
    base: int
    length: int
    label: str = ""


class LRUPolicy:
    """Strict least-recently-used ordering over resident pages."""

    def __init__(self):
        self._order: OrderedDict[int, None] = OrderedDict()

    def insert(self, page: int) -> None:
        self._order[page] = None

    def touch(self, page: int) -> None:
        self._order.move_to_end(page)

    def victim(self) -> int:
        return self._order.popitem(last=False)[0]

    def remove(self, page: int) -> None:
        self._order.pop(page, None)

    def __len__(self) -> int:
        return len(self._order)


class Enclave:
    def __init__(self, config: EnclaveConfig | None = None,
                 policy_factory: Callable[[], LRUPolicy] = LRUPolicy):
        self.config = config or EnclaveConfig()
        self.policy = policy_factory()
        self.capacity = self.config.capacity
        self._resident: dict[int, bool] = {}      # page -> dirty
        self._handles: dict[int, BufferHandle] = {}
        self._next_page = 0
        self._ids = itertools.count(1)
        self._stats = PagingStats()
        self.handle_faults: dict[int, int] = {}
        self.handle_bytes_read: dict[int, int] = {}
        self.handle_bytes_written: dict[int, int] = {}
        self.trace: list[tuple[str, int]] | None = None
        self._round: set[int] | None = None

    # -- buffers -----------------------------------------------------------
    def alloc(self, length: int, label: str = "") -> BufferHandle:
        if length <= 0:
            raise ValueError(f"cannot allocate {length} bytes")
        p = self.config.page_bytes
        pages = -(-length // p)
        handle = BufferHandle(next(self._ids), self._next_page * p, int(length), label)
        self._next_page += pages
        self._handles[handle.id] = handle
        self.handle_faults[handle.id] = 0
        self.handle_bytes_read[handle.id] = 0
        self.handle_bytes_written[handle.id] = 0
        return handle

    def pages_of(self, handle: BufferHandle) -> range:
        p = self.config.page_bytes
        first = handle.base // p
        return range(first, first + -(-handle.length // p))

    def free(self, handle: BufferHandle) -> None:
        """Drop a buffer's resident pages without write-back."""
        for page in self.pages_of(handle):
            if self._resident.pop(page, None) is not None:
                self.policy.remove(page)
        self._handles.pop(handle.id, None)

    # -- accesses ----------------------------------------------------------
    def access(self, handle: BufferHandle, offset: int, length: int, kind: str = "r") -> None:
        if length <= 0:
            return
        if offset < 0 or offset + length > handle.length:
            raise BoundsError(
                f"access [{offset}, {offset + length}) outside buffer "
                f"{handle.label or handle.id!r} of {handle.length} bytes")
        p = self.config.page_bytes
        start = handle.base + offset
        self._count_bytes(handle, kind, length)
        self._touch_range(start // p, (start + length - 1) // p + 1, kind != "r", handle.id)

    def access_pages(self, handle: BufferHandle, pages: Iterable[int], kind: str = "r",
                     nbytes: int = 0) -> None:
        """Touch page indices relative to the buffer start, in the given order."""
        first = handle.base // self.config.page_bytes
        n = -(-handle.length // self.config.page_bytes)
        self._count_bytes(handle, kind, nbytes)
        write = kind != "r"
        for rel in pages:
            if not 0 <= rel < n:
                raise BoundsError(f"page {rel} outside buffer {handle.label or handle.id!r}")
            self._touch_range(first + rel, first + rel + 1, write, handle.id)

    def _count_bytes(self, handle, kind, length):
        if kind in ("r", "rw"):
            self.handle_bytes_read[handle.id] += length
        if kind in ("w", "rw"):
            self.handle_bytes_written[handle.id] += length

    def _touch_range(self, p0: int, p1: int, write: bool, hid: int) -> None:
        res = self._resident
        touch = self.policy.touch
        st = self._stats
        st.touches += p1 - p0
        if self.trace is not None:
            tag = "W" if write else "R"
            self.trace.extend((tag, q) for q in range(p0, p1))
        if self._round is not None:
            self._round.update(range(p0, p1))
        for page in range(p0, p1):
            if page in res:
                touch(page)
                if write:
                    res[page] = True
            else:
                self._fault(page, write, hid)

    def _fault(self, page: int, write: bool, hid: int) -> None:
        st = self._stats
        cfg = self.config
        st.faults += 1
        st.total_cost += cfg.cost_fault
        self.handle_faults[hid] = self.handle_faults.get(hid, 0) + 1
        if len(self._resident) >= self.capacity:
            victim = self.policy.victim()
            dirty = self._resident.pop(victim)
            st.evictions += 1
            if dirty:
                st.dirty_evictions += 1
                st.total_cost += cfg.cost_evict
            else:
                st.clean_evictions += 1
        self._resident[page] = write
        self.policy.insert(page)
        if len(self._resident) > st.resident_peak:
            st.resident_peak = len(self._resident)

    # -- bookkeeping -------------------------------------------------------
    def stats(self) -> PagingStats:
        return PagingStats(**self._stats.as_dict())

    def reset_stats(self) -> None:
        self._stats = PagingStats(resident_peak=len(self._resident))
        for d in (self.handle_faults, self.handle_bytes_read, self.handle_bytes_written):
            for k in d:
                d[k] = 0

    @property
    def resident_pages(self) -> int:
        return len(self._resident)

    def warm(self) -> BufferHandle:
        """Fill secure memory with clean background pages and zero the counters.

        Models the steady state of a busy enclave: every later fault has to
        evict something.
        """
        bg = self.alloc(self.capacity * self.config.page_bytes, "background")
        self.access(bg, 0, bg.length, "r")
        self.reset_stats()
        return bg

    def begin_round(self) -> None:
        self._round = set()

    def end_round(self) -> int:
        """Distinct pages touched since ``begin_round``."""
        n = len(self._round or ())
        self._round = None
        return n

    def record(self, enabled: bool = True) -> None:
        self.trace = [] if enabled else None

    def dump_trace(self, out: TextIO) -> None:
        for kind, page in self.trace or ():
            out.write(f"{kind} {page}\n")


def load_trace(src: TextIO | str) -> list[tuple[str, int]]:
    """Parse the newline-delimited ``<R|W> <page>`` trace format."""
    if isinstance(src, str):
        src = io.StringIO(src)
    records = []
    for lineno, line in enumerate(src, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        kind, _, page = line.partition(" ")
        if kind not in ("R", "W") or not page.strip().isdigit():
            raise ValueError(f"bad trace record on line {lineno}: {line!r}")
        records.append((kind, int(page)))
    return records


def replay_trace(records: Iterable[tuple[str, int]], config: EnclaveConfig,
                 policy_factory: Callable[[], LRUPolicy] = LRUPolicy,
                 warm: bool = False) -> PagingStats:
    """Replay a trace; ``warm`` starts from memory full of clean pages that no
    record refers to, as after :meth:`Enclave.warm`."""
    enclave = Enclave(config, policy_factory)
    if warm:
        for page in range(-enclave.capacity, 0):
            enclave._touch_range(page, page + 1, False, 0)
        enclave.reset_stats()
    for kind, page in records:
        enclave._touch_range(page, page + 1, kind == "W", 0)
    return enclave.stats()


@dataclass
class LayerBuffers:
    input: BufferHandle
    weights: BufferHandle | None
    bias: BufferHandle | None
    output: BufferHandle


def run_layer_traced(executor: Callable, enclave: Enclave, buffers: LayerBuffers | None,
                     *args, **kwargs):
    """Run ``executor(*args, enclave=..., buffers=...)`` and return
    ``(output, stats delta)``."""
    before = enclave.stats()
    out = executor(*args, enclave=enclave, buffers=buffers, **kwargs)
    return out, enclave.stats() - before


def link_time(pages: int, workers: int, decode_pages_per_unit_per_worker: float,
              link_pages_per_unit: float) -> float:
    """Time to stream ``pages`` through the decryption link followed by a
    pool of decoders: the slower of the two stages sets the rate."""
    if workers < 1:
        raise ValueError("need at least one worker")
    if decode_pages_per_unit_per_worker <= 0 or link_pages_per_unit <= 0:
        raise ValueError("rates must be positive")
    return pages / min(link_pages_per_unit, workers * decode_pages_per_unit_per_worker)
