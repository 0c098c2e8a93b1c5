import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esft_serve.errors import AllocationError, ConfigError, MemoryFault, UsageError
from esft_serve.memory import (
    ExpertMemoryManager,
    PhysicalMemoryPool,
    SlotRange,
    VirtualAddressSpace,
    count_cover,
    page_cover,
    reserve,
)
from esft_serve.moe import ExpertWeights


def oracle_pages(loaded_slots, expert_size, page_size):
    """Pages overlapping any loaded slot, by direct interval intersection."""
    out = set()
    for s in loaded_slots:
        lo, hi = s * expert_size, (s + 1) * expert_size
        for p in range(lo // page_size - 1, hi // page_size + 2):
            if p >= 0 and p * page_size < hi and (p + 1) * page_size > lo:
                out.add(p)
    return out


def test_one_and_a_half_page_experts_map_three_pages():
    pool = PhysicalMemoryPool(4096, 16)
    t = reserve(8, 6144, 4096)
    assert t.map_experts(SlotRange(0, 0, 2), pool) == 3
    assert t.pages_mapped == 3
    assert {p: e.refcount for p, e in t.page_map.items()} == {0: 1, 1: 2, 2: 1}


def test_straddling_page_survives_partial_unload():
    pool = PhysicalMemoryPool(4096, 16)
    t = reserve(8, 6144, 4096)
    t.map_experts(SlotRange(0, 0, 1), pool)
    t.map_experts(SlotRange(0, 1, 1), pool)
    assert t.unmap_experts(SlotRange(0, 0, 1), pool) == 1  # page 1 still holds half of slot 1
    assert sorted(t.page_map) == [1, 2]
    assert t.unmap_experts(SlotRange(0, 1, 1), pool) == 2
    assert t.pages_mapped == 0
    assert not pool.allocated


def test_page_cover_examples():
    assert list(page_cover(0, 6144, 4096)) == [0, 1]
    assert list(page_cover(6144, 12288, 4096)) == [1, 2]
    assert list(page_cover(4096, 8192, 4096)) == [1]
    assert count_cover(5, 5, 4096) == 0
    assert count_cover(0, 17_301_504, 2 << 20) == 9


def test_reserve_maps_nothing():
    t = reserve(1000, 17_301_504, 2 << 20)
    assert t.pages_mapped == 0 and t.span == 1000 * 17_301_504
    assert t.base_addr % (2 << 20) == 0


def test_reservations_do_not_overlap():
    space = VirtualAddressSpace()
    a = reserve(4, 100, 256, space=space)
    b = reserve(4, 100, 256, space=space)
    assert b.base_addr >= a.base_addr + a.span and b.base_addr % 256 == 0


def test_overlapping_load_is_refused():
    pool = PhysicalMemoryPool(256, 64)
    t = reserve(10, 100, 256)
    t.map_experts(SlotRange(0, 2, 3), pool)
    with pytest.raises(UsageError):
        t.map_experts(SlotRange(0, 4, 2), pool)
    with pytest.raises(UsageError):
        t.unmap_experts(SlotRange(0, 1, 2), pool)
    with pytest.raises(UsageError):
        t.map_experts(SlotRange(0, 9, 2), pool)


def test_pool_exhaustion_is_all_or_nothing():
    pool = PhysicalMemoryPool(256, 3)
    t = reserve(10, 256, 256)
    t.map_experts(SlotRange(0, 0, 2), pool)
    with pytest.raises(AllocationError) as exc:
        t.map_experts(SlotRange(0, 2, 2), pool)
    assert (exc.value.requested, exc.value.available) == (2, 1)
    assert t.pages_mapped == 2 and not t.loaded[2:].any()
    assert len(pool.allocated) == 2


def test_pool_reuses_freed_pages_before_creating():
    pool = PhysicalMemoryPool(256, 10)
    a = pool.acquire(4)
    pool.release(a[:2])
    b = pool.acquire(3)
    assert set(a[:2]) <= set(b) and pool.pages_created == 5
    with pytest.raises(UsageError):
        pool.release([a[0], a[0]])


def test_trim_returns_free_pages():
    pool = PhysicalMemoryPool(256, 4)
    h = pool.acquire(4)
    pool.release(h[:3])
    assert pool.trim() == 3
    assert pool.num_created == 1 and pool.available == 3


def test_read_write_across_page_boundaries():
    pool = PhysicalMemoryPool(256, 64)
    t = reserve(5, 384, 256)
    t.map_experts(SlotRange(0, 0, 5), pool)
    blobs = [bytes([s]) * 100 + bytes(range(256)) + bytes([s]) * 28 for s in range(5)]
    for s, b in enumerate(blobs):
        t.write_expert(s, b, pool)
    for s, b in enumerate(blobs):
        assert t.read_expert(s, pool) == b


def test_access_to_unloaded_slot_faults():
    pool = PhysicalMemoryPool(256, 64)
    t = reserve(5, 384, 256, layer=3)
    t.map_experts(SlotRange(3, 0, 1), pool)
    with pytest.raises(MemoryFault) as exc:
        t.read_expert(1, pool)  # page 1 is mapped (shared with slot 0) but slot 1 is padding
    assert (exc.value.layer, exc.value.slot) == (3, 1)
    with pytest.raises(MemoryFault):
        t.write_expert(4, bytes(384), pool)
    with pytest.raises(ConfigError):
        t.write_expert(0, bytes(10), pool)


def test_manager_view_tracks_loads(rng):
    mgr = ExpertMemoryManager(1, 4, hidden=3, intermediate=2, page_size=64, pool_capacity=32)
    experts = [
        ExpertWeights(*(rng.standard_normal(s).astype(np.float32) for s in ((2, 3), (2, 3), (3, 2))))
        for _ in range(2)
    ]
    mgr.load(0, 1, experts)
    v1 = mgr.view(0)
    assert v1.backed.tolist() == [False, True, True, False]
    assert np.array_equal(v1.gate_t[2], experts[1].gate_proj.T)
    assert np.isnan(v1.gate_t[0]).all()
    mgr.unload(0, 2, 1)
    v2 = mgr.view(0)
    assert v2.backed.tolist() == [False, True, False, False]
    assert v1.backed[2]  # earlier view is unchanged
    assert not v1.gate_t.flags.writeable


@pytest.mark.parametrize("page_size", [256, 4096, 2 << 20])
@settings(max_examples=25, deadline=None)
@given(data=st.data())
def test_random_load_evict_matches_interval_oracle(page_size, data):
    expert_size = data.draw(
        st.sampled_from([page_size // 3 + 1, page_size, 3 * page_size // 2, 2 * page_size + 7]
                        + ([17_301_504] if page_size == 2 << 20 else []))
    )
    num_slots = 24
    pool = PhysicalMemoryPool(page_size, 1 << 40)
    t = reserve(num_slots, expert_size, page_size)
    ranges: list[tuple[int, int]] = []
    for _ in range(data.draw(st.integers(5, 40))):
        if ranges and data.draw(st.booleans()):
            lo, n = ranges.pop(data.draw(st.integers(0, len(ranges) - 1)))
            t.unmap_experts(SlotRange(0, lo, n), pool)
        else:
            lo = data.draw(st.integers(0, num_slots - 1))
            n = data.draw(st.integers(1, 5))
            if lo + n > num_slots or t.loaded[lo : lo + n].any():
                continue
            t.map_experts(SlotRange(0, lo, n), pool)
            ranges.append((lo, n))
        loaded = [s for lo, n in ranges for s in range(lo, lo + n)]
        expect = oracle_pages(loaded, expert_size, page_size)
        assert set(t.page_map) == expect
        assert len(pool.allocated) == len(expect)
        if not ranges:
            assert not pool.allocated
    for lo, n in ranges:
        t.unmap_experts(SlotRange(0, lo, n), pool)
    assert not pool.allocated and t.pages_mapped == 0
    # freed pages are reused before any new page is created
    created = pool.pages_created
    t.map_experts(SlotRange(0, 0, num_slots), pool)
    assert pool.pages_created == max(created, t.pages_mapped)
