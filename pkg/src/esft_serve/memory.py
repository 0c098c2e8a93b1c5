"""Virtual-memory-backed expert weight store over a simulated page pool.

A :class:`VirtualWeightTensor` reserves a contiguous virtual span of
``num_slots * expert_size`` bytes. Nothing is physically backed until a slot
range is mapped; mapping pulls fixed-size pages from a
:class:`PhysicalMemoryPool`. Expert boundaries need not align with page
boundaries, so a page may be shared by neighbouring experts (possibly of
different adapters). Each mapped page carries a reference count equal to the
number of loaded experts whose byte range intersects it.
"""
from __future__ import annotations

import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import AllocationError, ConfigError, MemoryFault, UsageError
from .moe import F32, ExpertWeights, WeightView


def page_cover(start: int, stop: int, page_size: int) -> range:
    """Page indices touched by the half-open byte interval ``[start, stop)``."""
    if stop <= start:
        return range(0)
    return range(start // page_size, (stop - 1) // page_size + 1)


def count_cover(start: int, stop: int, page_size: int) -> int:
    """``floor((stop-1)/P) - floor(start/P) + 1`` for non-empty intervals."""
    if stop <= start:
        return 0
    return (stop - 1) // page_size - start // page_size + 1


class PhysicalMemoryPool:
    """Bounded pool of fixed-size pages standing in for device memory.

    Pages are created lazily up to ``capacity``. Released pages go to a free
    list and are handed out again before any new page is created. Page
    buffers are only materialized when someone writes to them, so pure
    accounting runs cost no memory.
    """

    def __init__(self, page_size: int, capacity: int):
        if page_size <= 0:
            raise ConfigError(f"page_size must be positive, got {page_size}")
        self.page_size = page_size
        self.capacity = capacity
        self.allocated: set[int] = set()
        self.free_list: list[int] = []
        self._buffers: dict[int, bytearray | None] = {}
        self._next_handle = 0
        self._lock = threading.Lock()
        self.pages_created = 0

    @property
    def num_created(self) -> int:
        return len(self._buffers)

    @property
    def available(self) -> int:
        return len(self.free_list) + self.capacity - len(self._buffers)

    def acquire(self, n: int) -> list[int]:
        with self._lock:
            if n > self.available:
                raise AllocationError(n, self.available)
            handles = []
            while len(handles) < n and self.free_list:
                handles.append(self.free_list.pop())
            while len(handles) < n:
                h = self._next_handle
                self._next_handle += 1
                self._buffers[h] = None
                self.pages_created += 1
                handles.append(h)
            self.allocated.update(handles)
            return handles

    def release(self, handles: Iterable[int]) -> None:
        with self._lock:
            for h in handles:
                if h not in self.allocated:
                    raise UsageError(f"page {h} released twice or never allocated")
                self.allocated.remove(h)
                self.free_list.append(h)

    def trim(self) -> int:
        """Return every free page to the device; returns how many."""
        with self._lock:
            n = len(self.free_list)
            for h in self.free_list:
                del self._buffers[h]
            self.free_list.clear()
            return n

    def buffer(self, handle: int) -> bytearray:
        if handle not in self.allocated:
            raise MemoryFault(f"page {handle} is not allocated")
        buf = self._buffers[handle]
        if buf is None:
            buf = self._buffers[handle] = bytearray(self.page_size)
        return buf


class VirtualAddressSpace:
    """Hands out non-overlapping, page-aligned virtual base addresses."""

    def __init__(self, start: int = 1 << 32):
        self._next = start
        self._lock = threading.Lock()

    def reserve(self, nbytes: int, align: int) -> int:
        with self._lock:
            base = -(-self._next // align) * align
            self._next = base + max(nbytes, 1)
            return base


_DEFAULT_SPACE = VirtualAddressSpace()


@dataclass
class PageEntry:
    handle: int
    refcount: int


@dataclass(frozen=True)
class SlotRange:
    layer: int
    first_slot: int
    count: int

    @property
    def stop(self) -> int:
        return self.first_slot + self.count


@dataclass
class VirtualWeightTensor:
    base_addr: int
    num_slots: int
    expert_size: int
    page_size: int
    layer: int = 0
    page_map: dict[int, PageEntry] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.loaded = np.zeros(self.num_slots, dtype=bool)

    @property
    def span(self) -> int:
        return self.num_slots * self.expert_size

    @property
    def pages_mapped(self) -> int:
        return len(self.page_map)

    @property
    def mapped_bytes(self) -> int:
        return len(self.page_map) * self.page_size

    def slot_addr(self, slot: int) -> int:
        return self.base_addr + slot * self.expert_size

    def slot_pages(self, slot: int) -> range:
        lo = slot * self.expert_size
        return page_cover(lo, lo + self.expert_size, self.page_size)

    def _check_range(self, r: SlotRange) -> None:
        if r.count < 0 or r.first_slot < 0 or r.stop > self.num_slots:
            raise UsageError(
                f"slot range [{r.first_slot}, {r.stop}) outside tensor of {self.num_slots} slots"
            )

    def map_experts(self, r: SlotRange, pool: PhysicalMemoryPool) -> int:
        """Back slots ``[first_slot, first_slot+count)``; returns new pages taken."""
        self._check_range(r)
        if self.loaded[r.first_slot : r.stop].any():
            raise UsageError(f"layer {self.layer}: slots [{r.first_slot}, {r.stop}) overlap a loaded range")
        incs: Counter[int] = Counter()
        for s in range(r.first_slot, r.stop):
            incs.update(self.slot_pages(s))
        new_pages = sorted(p for p in incs if p not in self.page_map)
        handles = pool.acquire(len(new_pages))
        for p, h in zip(new_pages, handles):
            self.page_map[p] = PageEntry(h, 0)
        for p, n in incs.items():
            self.page_map[p].refcount += n
        self.loaded[r.first_slot : r.stop] = True
        return len(new_pages)

    def unmap_experts(self, r: SlotRange, pool: PhysicalMemoryPool) -> int:
        """Drop slots from the mapping; returns pages given back to the pool."""
        self._check_range(r)
        if not self.loaded[r.first_slot : r.stop].all():
            raise UsageError(f"layer {self.layer}: slots [{r.first_slot}, {r.stop}) are not all loaded")
        decs: Counter[int] = Counter()
        for s in range(r.first_slot, r.stop):
            decs.update(self.slot_pages(s))
        freed = []
        for p, n in decs.items():
            entry = self.page_map[p]
            entry.refcount -= n
            if entry.refcount == 0:
                freed.append(entry.handle)
                del self.page_map[p]
        pool.release(freed)
        self.loaded[r.first_slot : r.stop] = False
        return len(freed)

    def _segments(self, slot: int):
        lo = slot * self.expert_size
        hi = lo + self.expert_size
        for p in self.slot_pages(slot):
            entry = self.page_map.get(p)
            if entry is None:
                raise MemoryFault(
                    f"layer {self.layer}: page {p} of slot {slot} is not mapped", self.layer, slot
                )
            a = max(lo, p * self.page_size)
            b = min(hi, (p + 1) * self.page_size)
            yield entry.handle, a - p * self.page_size, a - lo, b - a

    def write_expert(self, slot: int, data: bytes | ExpertWeights, pool: PhysicalMemoryPool) -> None:
        if not 0 <= slot < self.num_slots or not self.loaded[slot]:
            raise MemoryFault(f"layer {self.layer}: write to unbacked slot {slot}", self.layer, slot)
        payload = data.to_bytes() if isinstance(data, ExpertWeights) else bytes(data)
        if len(payload) != self.expert_size:
            raise ConfigError(f"expert payload is {len(payload)} bytes, expected {self.expert_size}")
        for handle, page_off, src_off, n in self._segments(slot):
            pool.buffer(handle)[page_off : page_off + n] = payload[src_off : src_off + n]

    def read_expert(self, slot: int, pool: PhysicalMemoryPool) -> bytes:
        if not 0 <= slot < self.num_slots or not self.loaded[slot]:
            raise MemoryFault(f"layer {self.layer}: read of unbacked slot {slot}", self.layer, slot)
        out = bytearray(self.expert_size)
        for handle, page_off, src_off, n in self._segments(slot):
            out[src_off : src_off + n] = pool.buffer(handle)[page_off : page_off + n]
        return bytes(out)


def reserve(
    num_slots: int,
    expert_size: int,
    page_size: int,
    layer: int = 0,
    space: VirtualAddressSpace | None = None,
) -> VirtualWeightTensor:
    """Reserve a virtual span for ``num_slots`` experts; maps nothing."""
    if num_slots < 0 or expert_size <= 0:
        raise ConfigError("num_slots must be >= 0 and expert_size > 0")
    space = space or _DEFAULT_SPACE
    base = space.reserve(num_slots * expert_size, page_size)
    return VirtualWeightTensor(base, num_slots, expert_size, page_size, layer)


class ExpertMemoryManager:
    """Per-layer virtual weight tensors sharing one page pool.

    Besides load/unload it maintains a decoded :class:`WeightView` per layer
    for the GMM. Views are rebuilt copy-on-write after mutations, so a view
    obtained for one inference step never changes underneath it.
    """

    def __init__(
        self,
        num_layers: int,
        num_slots: int,
        hidden: int,
        intermediate: int,
        page_size: int,
        pool_capacity: int,
        dtype_bytes: int = 4,
    ):
        self.hidden = hidden
        self.intermediate = intermediate
        self.expert_size = 3 * hidden * intermediate * dtype_bytes
        self.pool = PhysicalMemoryPool(page_size, pool_capacity)
        space = VirtualAddressSpace()
        self.tensors = [
            reserve(num_slots, self.expert_size, page_size, layer=l, space=space)
            for l in range(num_layers)
        ]
        self._views: list[WeightView | None] = [None] * num_layers
        self._dirty: list[set[int]] = [set() for _ in range(num_layers)]

    @property
    def num_slots(self) -> int:
        return self.tensors[0].num_slots

    @property
    def pages_mapped(self) -> int:
        return sum(t.pages_mapped for t in self.tensors)

    def load(self, layer: int, first_slot: int, experts: Sequence[ExpertWeights]) -> None:
        t = self.tensors[layer]
        r = SlotRange(layer, first_slot, len(experts))
        t.map_experts(r, self.pool)
        for k, w in enumerate(experts):
            t.write_expert(first_slot + k, w, self.pool)
        self._dirty[layer].update(range(first_slot, r.stop))

    def unload(self, layer: int, first_slot: int, count: int) -> None:
        self.tensors[layer].unmap_experts(SlotRange(layer, first_slot, count), self.pool)
        self._dirty[layer].update(range(first_slot, first_slot + count))

    def view(self, layer: int) -> WeightView:
        old = self._views[layer]
        dirty = self._dirty[layer]
        if old is not None and not dirty:
            return old
        t = self.tensors[layer]
        s, h, i = t.num_slots, self.hidden, self.intermediate
        if old is None:
            gate = np.zeros((s, h, i), F32)
            up = np.zeros((s, h, i), F32)
            down = np.zeros((s, i, h), F32)
            backed = np.zeros(s, bool)
            dirty = set(range(s))
        else:
            gate, up, down, backed = (old.gate_t.copy(), old.up_t.copy(), old.down_t.copy(), old.backed.copy())
        for slot in sorted(dirty):
            if t.loaded[slot]:
                w = ExpertWeights.from_bytes(t.read_expert(slot, self.pool), h, i)
                gate[slot], up[slot], down[slot] = w.gate_proj.T, w.up_proj.T, w.down_proj.T
                backed[slot] = True
            else:
                gate[slot] = up[slot] = down[slot] = np.nan
                backed[slot] = False
        for a in (gate, up, down, backed):
            a.flags.writeable = False
        view = WeightView(gate, up, down, backed, layer)
        self._views[layer] = view
        self._dirty[layer] = set()
        return view
