import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esft_serve.checkpoint import BaseModel
from esft_serve.config import ModelConfig
from esft_serve.engine import Engine
from esft_serve.errors import (
    AdapterInUseError,
    AllocationError,
    CapacityError,
    ConfigError,
    ManifestError,
    UsageError,
)
from esft_serve.memory import count_cover
from esft_serve.registry import (
    AdapterManifest,
    build_expert_map,
    generate_synthetic_adapter,
    read_adapter,
    save_adapter,
)

TINY = ModelConfig(num_layers=2, num_experts=8, top_k=2, hidden=4, intermediate=2, vocab_size=16, max_positions=32)


def _manifest(per_layer, name="x", config=TINY):
    return AdapterManifest(name, config.fingerprint(), tuple(tuple(l) for l in per_layer))


def test_expert_map_worked_example():
    m = ModelConfig(num_layers=1, num_experts=64, top_k=6, hidden=4, intermediate=2)
    a0 = _manifest([[3, 17, 42]], "a0", m)
    a1 = _manifest([[1, 5, 9, 20, 33, 50, 63]], "a1", m)
    table = build_expert_map([a0, a1], 0, 64, 8)
    assert table[0, [3, 17, 42]].tolist() == [64, 65, 66]
    assert table[1, [1, 5, 9, 20, 33, 50, 63]].tolist() == list(range(72, 79))
    untouched = np.setdiff1d(np.arange(64), [3, 17, 42])
    assert np.array_equal(table[0, untouched], untouched)


def test_registry_map_matches_reference_construction():
    model = BaseModel.generate(TINY, 0)
    eng = Engine(model, max_adapters=3, e_max=3, page_size=256)
    mans = []
    for s in range(3):
        man, w = generate_synthetic_adapter(s, TINY, max_experts=3, avg_experts=2.0, name=f"a{s}")
        eng.load_adapter(man, w)
        mans.append(man)
    for l in range(TINY.num_layers):
        assert np.array_equal(eng.registry.expert_map(l), build_expert_map(mans, l, 8, 3))


def test_load_refusals():
    model = BaseModel.generate(TINY, 0)
    eng = Engine(model, max_adapters=1, e_max=2, page_size=256)
    man, w = generate_synthetic_adapter(0, TINY, counts=[2, 1], name="ok")
    other = ModelConfig(num_layers=2, num_experts=8, top_k=2, hidden=4, intermediate=3)
    with pytest.raises(ManifestError):
        eng.load_adapter(AdapterManifest("bad", other.fingerprint(), man.per_layer), w)
    with pytest.raises(ManifestError):
        eng.load_adapter(_manifest([[0, 1, 2], [0]]), [[w[0][0]] * 3, w[1]])  # exceeds E_max
    with pytest.raises(ManifestError):
        eng.load_adapter(_manifest([[1, 0], [0]]), w)  # not ascending
    with pytest.raises(ManifestError):
        eng.load_adapter(_manifest([[0], [0]]), w)  # weights do not match counts
    eng.load_adapter(man, w)
    with pytest.raises(CapacityError):
        eng.load_adapter(man, w)
    assert eng.registry.version == 1


def test_pinned_adapter_cannot_be_evicted():
    model = BaseModel.generate(TINY, 0)
    eng = Engine(model, max_adapters=1, e_max=2, page_size=256)
    man, w = generate_synthetic_adapter(0, TINY, counts=[2, 1])
    i = eng.load_adapter(man, w)
    eng.registry.pin(i)
    with pytest.raises(AdapterInUseError):
        eng.evict_adapter(i)
    eng.registry.unpin(i)
    eng.evict_adapter(i)
    with pytest.raises(UsageError):
        eng.evict_adapter(i)
    with pytest.raises(UsageError):
        eng.registry.unpin(i)


def test_pool_exhaustion_rolls_back_partial_load():
    model = BaseModel.generate(TINY, 0)
    esize = TINY.expert_size  # 96 B
    base_pages = TINY.num_layers * count_cover(0, 8 * esize, 256)
    eng = Engine(model, max_adapters=1, e_max=4, page_size=256, pool_capacity=base_pages + 1)
    man, w = generate_synthetic_adapter(0, TINY, counts=[4, 4])
    before = eng.memory.pages_mapped
    with pytest.raises(AllocationError):
        eng.load_adapter(man, w)
    assert eng.memory.pages_mapped == before
    assert not eng.registry.loaded and eng.registry.version == 0
    assert np.array_equal(eng.registry.expert_map(0), np.tile(np.arange(8), (1, 1)))


def test_pool_too_small_for_base_is_a_config_error():
    with pytest.raises(ConfigError):
        Engine(BaseModel.generate(TINY, 0), max_adapters=1, e_max=1, page_size=256, pool_capacity=2)


def test_adapter_directory_round_trip(tmp_path):
    man, w = generate_synthetic_adapter(3, TINY, counts=[1, 2], name="rt")
    save_adapter(tmp_path / "rt", man, w)
    man2, w2 = read_adapter(tmp_path / "rt", TINY)
    assert man2 == man
    assert all(np.array_equal(a.down_proj, b.down_proj) for la, lb in zip(w, w2) for a, b in zip(la, lb))
    (tmp_path / "rt" / "weights.bin").write_bytes(b"\0" * 5)
    with pytest.raises(ManifestError):
        read_adapter(tmp_path / "rt", TINY)
    (tmp_path / "rt" / "manifest.json").write_text("{")
    with pytest.raises(ManifestError):
        read_adapter(tmp_path / "rt", TINY)


def test_evict_then_reload_restores_identical_outputs():
    model = BaseModel.generate(TINY, 0)
    eng = Engine(model, max_adapters=2, e_max=3, page_size=256)
    adapters = [generate_synthetic_adapter(s, TINY, max_experts=3, avg_experts=2.0) for s in range(2)]
    for man, w in adapters:
        eng.load_adapter(man, w)
    tokens, pos, aid = np.arange(12) % 16, np.arange(12), np.array([-1, 0, 1] * 4)
    first = eng.forward(tokens, pos, aid)
    pages = eng.memory.pages_mapped
    eng.evict_adapter(0)
    eng.load_adapter(*adapters[0], index=0)
    assert eng.memory.pages_mapped == pages
    assert eng.forward(tokens, pos, aid).tobytes() == first.tobytes()


@settings(max_examples=30, deadline=None)
@given(ops=st.lists(st.tuples(st.booleans(), st.integers(0, 3), st.integers(0, 10_000)), min_size=1, max_size=30))
def test_random_lifecycle_keeps_map_and_pages_consistent(ops):
    model = BaseModel.generate(TINY, 0)
    eng = Engine(model, max_adapters=4, e_max=3, page_size=256)
    esize = TINY.expert_size
    resident: list = [None] * 4
    for is_load, idx, seed in ops:
        if is_load and resident[idx] is None:
            man, w = generate_synthetic_adapter(seed, TINY, max_experts=3, avg_experts=1.5)
            eng.load_adapter(man, w, index=idx)
            resident[idx] = man
        elif not is_load and resident[idx] is not None:
            eng.evict_adapter(idx)
            resident[idx] = None
        for l in range(TINY.num_layers):
            assert np.array_equal(eng.registry.expert_map(l), build_expert_map(resident, l, 8, 3))
            slots = list(range(8)) + [
                8 + i * 3 + k for i, m in enumerate(resident) if m for k in range(m.counts[l])
            ]
            pages = {p for s in slots for p in range(s * esize // 256, ((s + 1) * esize - 1) // 256 + 1)}
            assert set(eng.memory.tensors[l].page_map) == pages
    assert len(eng.memory.pool.allocated) == eng.memory.pages_mapped
