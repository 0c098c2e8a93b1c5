"""Bit-exact equivalence between multi-adapter serving and merged models."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..checkpoint import BaseModel
from ..config import SchedulerConfig
from ..engine import Engine
from ..moe import forward_layer
from ..oracle import MergedModel
from ..registry import AdapterManifest, AdapterWeights
from .scheduler import serve
from .workload import Request


@dataclass
class Mismatch:
    seed: int
    adapter: int
    token: int
    layer: Optional[int]
    slots: Optional[list[int]]
    max_abs_dev: float

    def to_dict(self) -> dict:
        return {
            "record": "mismatch",
            "seed": self.seed,
            "adapter": self.adapter,
            "token": self.token,
            "layer": self.layer,
            "slots": self.slots,
            "max_abs_dev": self.max_abs_dev,
        }


@dataclass
class VerifyReport:
    cases: int = 0
    tokens: int = 0
    max_abs_dev: float = 0.0
    mismatches: list[Mismatch] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.mismatches and self.max_abs_dev == 0.0

    def to_dict(self) -> dict:
        return {
            "record": "verify",
            "cases": self.cases,
            "tokens": self.tokens,
            "max_abs_dev": self.max_abs_dev,
            "mismatches": len(self.mismatches),
            "passed": self.passed,
        }


def bits_equal(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise bitwise equality of float32 arrays (distinguishes -0.0, NaN payloads)."""
    return (np.ascontiguousarray(a, np.float32).view(np.uint32) == np.ascontiguousarray(b, np.float32).view(np.uint32)).all(axis=-1)


def merged_models(model: BaseModel, adapters: Sequence[tuple[AdapterManifest, AdapterWeights]]) -> dict[int, MergedModel]:
    out = {-1: MergedModel(model)}
    for i, (man, w) in enumerate(adapters):
        out[i] = MergedModel.for_adapter(model, man.per_layer, w)
    return out


def _triage(engine: Engine, merged: MergedModel, tokens, positions, aid, token: int) -> tuple[Optional[int], Optional[list[int]]]:
    """First layer where token ``token`` diverges, and the slots it was sent to."""
    snap = engine.snapshot()
    sel = np.array([token])
    h_fast = engine.model.embed(tokens[sel], positions[sel]).astype(np.float32)
    h_ref = h_fast.copy()
    for l, layer in enumerate(snap.layers):
        hook = engine._hook(snap.tables[l])
        slots = []

        def spy(ids, a, _hook=hook):
            out = _hook(ids, a)
            slots.extend(int(x) for x in out[0])
            return out

        h_fast = h_fast + forward_layer(h_fast, aid[sel], layer, spy)
        h_ref = h_ref + merged._layer(h_ref, l)
        if not bits_equal(h_fast, h_ref).all():
            return l, slots
    return None, None


def verify_equivalence(
    engine: Engine,
    adapters: Sequence[tuple[AdapterManifest, AdapterWeights]],
    seeds: Sequence[int] = range(100),
    max_batch: int = 256,
    base_fraction: float = 0.25,
    merged: Optional[dict[int, MergedModel]] = None,
) -> VerifyReport:
    """Random mixed batches through the engine vs. per-adapter merged models.

    ``adapters[i]`` must be loaded in engine slot ``i``.
    """
    model = engine.model
    cfg = model.config
    merged = merged or merged_models(model, adapters)
    n = len(adapters)
    report = VerifyReport()
    for seed in seeds:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
        b = int(rng.integers(1, max_batch + 1))
        tokens = rng.integers(0, cfg.vocab_size, size=b)
        positions = rng.integers(0, cfg.max_positions, size=b)
        aid = np.where(rng.random(b) < base_fraction, -1, rng.integers(0, max(n, 1), size=b)) if n else np.full(b, -1)
        aid = aid.astype(np.int64)
        fast = engine.forward(tokens, positions, aid)
        report.cases += 1
        report.tokens += b
        for a in np.unique(aid):
            sel = np.flatnonzero(aid == a)
            ref = merged[int(a)].forward(tokens[sel], positions[sel])
            dev = float(np.max(np.abs(ref.astype(np.float64) - fast[sel])))
            report.max_abs_dev = max(report.max_abs_dev, dev)
            bad = sel[~bits_equal(fast[sel], ref)]
            for t in bad[:3]:
                layer, slots = _triage(engine, merged[int(a)], tokens, positions, aid, int(t))
                row = int(np.flatnonzero(sel == t)[0])
                report.mismatches.append(
                    Mismatch(seed, int(a), int(t), layer, slots, float(np.max(np.abs(ref[row] - fast[t]))))
                )
    return report


def merged_generate(merged: MergedModel, prompt: np.ndarray, max_new: int) -> list[int]:
    """Greedy decode with the merged model, one token at a time."""
    prompt = np.asarray(prompt, dtype=np.int64)
    # no cross-token mixing in this model: only the last prompt position matters
    h = merged.forward(prompt[-1:], np.array([prompt.size - 1]))
    out = [int(np.argmax(merged.model.logits(h)[0]))]
    while len(out) < max_new:
        pos = prompt.size + len(out) - 1
        h = merged.forward(np.array([out[-1]]), np.array([pos]))
        out.append(int(np.argmax(merged.model.logits(h)[0])))
    return out


def verify_batching_transparency(
    engine: Engine,
    trace: Sequence[Request],
    config: SchedulerConfig = SchedulerConfig(),
    merged: Optional[dict[int, MergedModel]] = None,
) -> dict:
    """Serve ``trace`` with continuous batching, then each request alone.

    Returns counts of requests whose token sequences differ between the two
    runs and, when ``merged`` is given, from greedy merged-model decoding.
    """
    batched = serve(trace, engine, config)
    by_id = {r.request_id: r for r in batched.requests}
    diff_isolated = diff_merged = 0
    for req in trace:
        alone = serve([req], engine, config).requests[0]
        if alone.output_tokens != by_id[req.request_id].output_tokens:
            diff_isolated += 1
        if merged is not None:
            ref = merged_generate(merged[req.adapter_id], req.prompt_tokens, req.max_output_tokens)
            if ref != by_id[req.request_id].output_tokens:
                diff_merged += 1
    return {
        "record": "batching_transparency",
        "requests": len(trace),
        "differs_from_isolated": diff_isolated,
        "differs_from_merged": diff_merged if merged is not None else None,
        "steps": batched.num_steps,
    }
