"""Batched rerouting of router top-k ids into virtual slot ids.

For a token with adapter id ``a`` and base expert ``j`` the target slot is
``table[a, j]``, where ``table`` is the ``[N, M]`` expert map with an
identity row appended. The appended row sits at index ``N`` which is also
index ``-1``, so the base-model marker needs no special case: the whole
operator is one gather.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .errors import InvariantViolation, ValidationError


def extend_map(expert_map: np.ndarray) -> np.ndarray:
    """Append the identity row used by base-model tokens."""
    n, m = expert_map.shape
    table = np.empty((n + 1, m), dtype=np.int64)
    table[:n] = expert_map
    table[n] = np.arange(m)
    return table


def validate_aid(aid: np.ndarray, num_adapters: int) -> None:
    """Reject AIDs outside ``{-1} U [0, N)``; call once per batch."""
    aid = np.asarray(aid)
    bad = (aid < -1) | (aid >= num_adapters)
    if bad.any():
        t = int(np.flatnonzero(bad)[0])
        raise ValidationError(f"token {t} has adapter id {int(aid[t])}, valid ids are -1..{num_adapters - 1}")


def batched_reroute(
    topk_ids: np.ndarray,
    aid: np.ndarray,
    expert_map: Optional[np.ndarray] = None,
    *,
    table: Optional[np.ndarray] = None,
    debug: bool = False,
) -> np.ndarray:
    """Rewrite ``[B, K]`` base-expert ids to slot ids, single fused gather.

    Pass a precomputed ``table`` (from :func:`extend_map`) to keep the
    per-call work to the gather itself. Gate weights are not touched.
    """
    if table is None:
        table = extend_map(expert_map)
    if debug:
        validate_aid(aid, table.shape[0] - 1)
        if topk_ids.size and (topk_ids.min() < 0 or topk_ids.max() >= table.shape[1]):
            raise InvariantViolation("top-k id outside the base expert range")
    return table[aid[:, None], topk_ids]


def naive_reroute(topk_ids: np.ndarray, aid: np.ndarray, expert_map: np.ndarray) -> np.ndarray:
    """Unfused composition: broadcast, mask, offset, flat gather, select."""
    n, m = expert_map.shape
    aid_b = np.broadcast_to(aid[:, None], topk_ids.shape).copy()
    is_base = aid_b == -1
    safe_aid = np.where(is_base, 0, aid_b)
    offsets = safe_aid * m + topk_ids
    if n == 0:
        return topk_ids.copy()
    gathered = np.take(expert_map.reshape(-1), offsets)
    return np.where(is_base, topk_ids, gathered)


def reference_reroute(topk_ids, aid, expert_map) -> np.ndarray:
    """Scalar per-token loop; the semantic reference."""
    b, k = np.shape(topk_ids)
    out = np.empty((b, k), dtype=np.int64)
    for t in range(b):
        a = int(aid[t])
        for j in range(k):
            e = int(topk_ids[t][j])
            out[t, j] = e if a == -1 else int(expert_map[a][e])
    return out


@dataclass
class RerouteTiming:
    batch: int
    top_k: int
    num_adapters: int
    e_max: int
    fused_s: float
    naive_s: float
    identical: bool

    @property
    def fused_ns_per_token(self) -> float:
        return 1e9 * self.fused_s / max(self.batch, 1)

    @property
    def naive_ns_per_token(self) -> float:
        return 1e9 * self.naive_s / max(self.batch, 1)

    def to_dict(self) -> dict:
        return {
            "record": "reroute_bench",
            "batch": self.batch,
            "top_k": self.top_k,
            "num_adapters": self.num_adapters,
            "e_max": self.e_max,
            "fused_s": self.fused_s,
            "naive_s": self.naive_s,
            "fused_ns_per_token": self.fused_ns_per_token,
            "naive_ns_per_token": self.naive_ns_per_token,
            "identical": self.identical,
        }


def random_expert_map(
    rng: np.random.Generator, num_adapters: int, num_experts: int, e_max: int
) -> np.ndarray:
    """Random valid expert map: each adapter fine-tunes up to ``e_max`` experts."""
    table = np.tile(np.arange(num_experts, dtype=np.int64), (num_adapters, 1))
    for i in range(num_adapters):
        e = int(rng.integers(0, e_max + 1))
        ids = np.sort(rng.choice(num_experts, size=e, replace=False))
        table[i, ids] = num_experts + i * e_max + np.arange(e)
    return table


def random_case(
    rng: np.random.Generator, batch: int, top_k: int, num_adapters: int, num_experts: int, e_max: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    expert_map = random_expert_map(rng, num_adapters, num_experts, e_max)
    # distinct ids per row, like a real top-k
    ids = np.argsort(rng.random((batch, num_experts)), axis=1)[:, :top_k].astype(np.int64)
    aid = rng.integers(-1, num_adapters, size=batch).astype(np.int64)
    return ids, aid, expert_map


def _best_time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def fused_reroute_bench(
    batch_sizes: Iterable[int] = (1, 4, 16, 64, 256, 1024, 4096, 16384),
    top_k: int = 6,
    num_experts: int = 64,
    num_adapters: int = 20,
    e_max: int = 13,
    repeats: int = 50,
    seed: int = 0,
) -> list[RerouteTiming]:
    """Time the fused gather against the unfused composition over batch sizes.

    The extended table is built once per expert-map version in the engine,
    so it is built outside the timed region here as well.
    """
    rng = np.random.default_rng(seed)
    out = []
    for b in batch_sizes:
        ids, aid, expert_map = random_case(rng, b, top_k, num_adapters, num_experts, e_max)
        table = extend_map(expert_map)
        fused = batched_reroute(ids, aid, table=table)
        naive = naive_reroute(ids, aid, expert_map)
        # interleave the two timings so drift hits both equally
        tf, tn = float("inf"), float("inf")
        for _ in range(repeats):
            tf = min(tf, _best_time(lambda: batched_reroute(ids, aid, table=table), 1))
            tn = min(tn, _best_time(lambda: naive_reroute(ids, aid, expert_map), 1))
        out.append(RerouteTiming(b, top_k, num_adapters, e_max, tf, tn, bool(np.array_equal(fused, naive))))
    return out
