import json

import numpy as np
import pytest

from esft_serve.checkpoint import BaseModel
from esft_serve.config import EngineConfig, ModelConfig, PageConfig
from esft_serve.engine import Engine
from esft_serve.errors import ConfigError, ValidationError
from esft_serve.oracle import MergedModel
from esft_serve.serving.verify import bits_equal, merged_generate, verify_equivalence

from .conftest import SMALL


def test_model_round_trip(tmp_path, small_model):
    small_model.save(tmp_path / "m")
    back = BaseModel.load(tmp_path / "m")
    assert back.config == small_model.config
    tokens, pos = np.arange(5), np.arange(5)
    assert np.array_equal(back.embed(tokens, pos), small_model.embed(tokens, pos))
    assert np.array_equal(back.experts[1][3].up_proj, small_model.experts[1][3].up_proj)
    meta = json.loads((tmp_path / "m" / "model.json").read_text())
    assert meta["format_version"] == 1


def test_model_load_rejects_truncated_blob(tmp_path, small_model):
    small_model.save(tmp_path / "m")
    blob = tmp_path / "m" / "lm_head.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(ConfigError):
        BaseModel.load(tmp_path / "m")


def test_generation_is_seeded(small_model):
    again = BaseModel.generate(SMALL, seed=1)
    assert np.array_equal(again.routers[0], small_model.routers[0])
    assert not np.array_equal(BaseModel.generate(SMALL, seed=2).routers[0], small_model.routers[0])


def test_fingerprint_tracks_geometry():
    a = ModelConfig()
    assert a.fingerprint() == ModelConfig().fingerprint()
    assert a.fingerprint() != ModelConfig(intermediate=33).fingerprint()
    assert a.expert_size == 3 * 64 * 32 * 4


@pytest.mark.parametrize(
    "kwargs", [dict(top_k=0), dict(top_k=65), dict(hidden=0), dict(dtype="int8"), dict(num_layers=0)]
)
def test_model_config_validation(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs)


def test_engine_config_round_trip_and_checks():
    cfg = EngineConfig(max_adapters=3, e_max=5)
    assert EngineConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.num_slots == 64 + 15
    with pytest.raises(ConfigError):
        EngineConfig.from_dict({"max_adapter": 3})
    with pytest.raises(ConfigError):
        EngineConfig(e_max=0)
    with pytest.raises(ConfigError):
        PageConfig(page_size=0)


def test_base_only_engine_matches_base_model(small_model):
    eng = Engine(small_model, max_adapters=0, e_max=1, page_size=256)
    tokens, pos = np.arange(20) % SMALL.vocab_size, np.arange(20)
    fast = eng.forward(tokens, pos, np.full(20, -1))
    ref = MergedModel(small_model).forward(tokens, pos)
    assert bits_equal(fast, ref).all()
    assert np.array_equal(eng.forward(tokens, pos, np.full(20, -1), reroute=False), fast)


def test_unknown_adapter_id_is_rejected(toy_engine):
    with pytest.raises(ValidationError):
        toy_engine.forward(np.array([1]), np.array([0]), np.array([3]))


def test_mixed_batch_equals_merged_models(toy_engine, toy_adapters):
    rep = verify_equivalence(toy_engine, toy_adapters, seeds=range(3), max_batch=64)
    assert rep.passed and rep.tokens > 0


def test_adapter_actually_changes_outputs(toy_engine):
    tokens, pos = np.arange(64), np.arange(64)
    base = toy_engine.forward(tokens, pos, np.full(64, -1))
    tuned = toy_engine.forward(tokens, pos, np.zeros(64, np.int64))
    assert not bits_equal(base, tuned).all()


def test_corrupted_adapter_is_caught_and_triaged(toy_model, toy_adapters):
    from esft_serve.toy import build_engine

    eng = build_engine(toy_model, toy_adapters, page_size=4096)
    t = eng.memory.tensors[0]
    slot = eng.registry.delta(0)
    bad = bytearray(t.read_expert(slot, eng.memory.pool))
    bad[:4] = np.float32(7.0).tobytes()
    t.write_expert(slot, bytes(bad), eng.memory.pool)
    eng.memory._dirty[0].add(slot)
    eng.registry.version += 1
    rep = verify_equivalence(eng, toy_adapters, seeds=range(4), max_batch=128, base_fraction=0.0)
    assert not rep.passed
    m = rep.mismatches[0]
    assert m.layer == 0 and slot in m.slots


def test_merged_generate_is_greedy(toy_model):
    merged = MergedModel(toy_model)
    out = merged_generate(merged, np.array([5, 6, 7]), 3)
    h = merged.forward(np.array([7]), np.array([2]))
    assert out[0] == int(np.argmax(toy_model.logits(h)[0])) and len(out) == 3
