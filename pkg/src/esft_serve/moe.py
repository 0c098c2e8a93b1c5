"""MoE layer compute path: route, dispatch, grouped expert matmul, combine.

Everything here is adapter-agnostic. Slot indices handed to :func:`dispatch`
may point anywhere in a (virtual) stacked weight tensor; the adapter logic
lives entirely in the rerouting hook passed to :func:`forward_layer`.

All contractions accumulate sequentially over the contraction dimension in
float32, one rounded multiply and one rounded add per term. Each output row
therefore depends only on its own input row and weights, which makes results
bit-identical across batch compositions and group orderings.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, InvariantViolation, MemoryFault

F32 = np.float32


@dataclass(frozen=True)
class ExpertWeights:
    gate_proj: np.ndarray  # [I, H]
    up_proj: np.ndarray  # [I, H]
    down_proj: np.ndarray  # [H, I]

    def to_bytes(self) -> bytes:
        return b"".join(
            np.ascontiguousarray(m, dtype="<f4").tobytes()
            for m in (self.gate_proj, self.up_proj, self.down_proj)
        )

    @classmethod
    def from_bytes(cls, buf: bytes | memoryview, hidden: int, intermediate: int) -> "ExpertWeights":
        flat = np.frombuffer(buf, dtype="<f4").astype(F32, copy=False)
        n = hidden * intermediate
        if flat.size != 3 * n:
            raise ConfigError(f"expert blob has {flat.size} floats, expected {3 * n}")
        return cls(
            flat[:n].reshape(intermediate, hidden),
            flat[n : 2 * n].reshape(intermediate, hidden),
            flat[2 * n :].reshape(hidden, intermediate),
        )

    def is_finite(self) -> bool:
        return all(np.isfinite(m).all() for m in (self.gate_proj, self.up_proj, self.down_proj))


@dataclass
class TokenBatch:
    hidden: np.ndarray  # [B, H]
    aid: np.ndarray  # [B], -1 = base model
    token_origin: np.ndarray  # [B] request ids


@dataclass(frozen=True)
class TopKAssignment:
    ids: np.ndarray  # [B, K] slot indices
    weights: np.ndarray  # [B, K] gate weights, rows sum to 1


@dataclass(frozen=True)
class PermutedTokens:
    """Token rows replicated K times and grouped by target slot.

    ``source[r]`` is the flat ``t * K + j`` index that permuted row ``r``
    came from; ``inverse[t * K + j]`` is where it went.
    """

    hidden: np.ndarray  # [B*K, H]
    slot_ids: np.ndarray  # [B*K], ascending
    group_sizes: np.ndarray  # [num_slots]
    source: np.ndarray  # [B*K]
    inverse: np.ndarray  # [B*K]


@dataclass(frozen=True)
class WeightView:
    """Read-only snapshot of a stacked expert tensor for the GMM.

    Projections are stored transposed (``[S, in, out]``) so that the
    sequential contraction reads contiguous rows. ``backed[s]`` is False for
    slots with no physical memory behind them.
    """

    gate_t: np.ndarray  # [S, H, I]
    up_t: np.ndarray  # [S, H, I]
    down_t: np.ndarray  # [S, I, H]
    backed: np.ndarray  # [S] bool
    layer: int = 0

    @property
    def num_slots(self) -> int:
        return self.backed.shape[0]

    @classmethod
    def from_stacked(cls, experts: list[ExpertWeights], layer: int = 0) -> "WeightView":
        gate_t = np.stack([e.gate_proj.T for e in experts]).astype(F32)
        up_t = np.stack([e.up_proj.T for e in experts]).astype(F32)
        down_t = np.stack([e.down_proj.T for e in experts]).astype(F32)
        return cls(
            np.ascontiguousarray(gate_t),
            np.ascontiguousarray(up_t),
            np.ascontiguousarray(down_t),
            np.ones(len(experts), dtype=bool),
            layer,
        )


def seq_matmul(x: np.ndarray, w_t: np.ndarray) -> np.ndarray:
    """``x @ w_t`` for ``x [R, C]`` and ``w_t [C, O]``, sequential over C."""
    if x.shape[1] != w_t.shape[0]:
        raise ConfigError(f"contraction mismatch: {x.shape} @ {w_t.shape}")
    if x.shape[0] == 0:
        return np.zeros((0, w_t.shape[1]), dtype=F32)
    acc = x[:, 0, None] * w_t[0]
    for c in range(1, x.shape[1]):
        acc += x[:, c, None] * w_t[c]
    return acc


def seq_matmul_rows(x: np.ndarray, w_t: np.ndarray) -> np.ndarray:
    """Per-row weights: ``out[r] = x[r] @ w_t[r]`` with ``w_t [R, C, O]``."""
    if x.shape[0] == 0:
        return np.zeros((0, w_t.shape[2]), dtype=F32)
    acc = x[:, 0, None] * w_t[:, 0]
    for c in range(1, x.shape[1]):
        acc += x[:, c, None] * w_t[:, c]
    return acc


def seq_sum_rows(x: np.ndarray) -> np.ndarray:
    """Row sums of ``x [R, C]`` accumulated left to right."""
    acc = x[:, 0].copy()
    for c in range(1, x.shape[1]):
        acc += x[:, c]
    return acc


def silu(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return x / (F32(1.0) + np.exp(-x))


def route(hidden: np.ndarray, router_weights: np.ndarray, top_k: int) -> TopKAssignment:
    """Softmax router with top-k selection and renormalized weights.

    Ties in probability are broken toward the smaller expert index.
    """
    if hidden.ndim != 2 or router_weights.ndim != 2 or hidden.shape[1] != router_weights.shape[1]:
        raise ConfigError(
            f"router shape mismatch: hidden {hidden.shape}, router {router_weights.shape}"
        )
    num_experts = router_weights.shape[0]
    if not 1 <= top_k <= num_experts:
        raise ConfigError(f"top_k={top_k} out of range for {num_experts} experts")
    b = hidden.shape[0]
    if b == 0:
        return TopKAssignment(np.zeros((0, top_k), np.int64), np.zeros((0, top_k), F32))
    logits = seq_matmul(hidden.astype(F32, copy=False), np.ascontiguousarray(router_weights.T))
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / seq_sum_rows(e)[:, None]
    ids = np.argsort(-probs, axis=1, kind="stable")[:, :top_k]
    sel = np.take_along_axis(probs, ids, axis=1)
    weights = sel / seq_sum_rows(sel)[:, None]
    return TopKAssignment(ids.astype(np.int64), weights.astype(F32, copy=False))


def dispatch(hidden: np.ndarray, ids: np.ndarray, num_slots: int) -> PermutedTokens:
    """Replicate each token K times and group the copies by target slot.

    Groups come out in ascending slot order; inside a group the original
    token order is kept.
    """
    b, k = ids.shape
    flat = ids.reshape(-1)
    if flat.size and (flat.min() < 0 or flat.max() >= num_slots):
        raise InvariantViolation(
            f"slot id out of range [0, {num_slots}): min={flat.min()}, max={flat.max()}"
        )
    source = np.argsort(flat, kind="stable")
    inverse = np.empty_like(source)
    inverse[source] = np.arange(source.size)
    rows = hidden[source // k] if b else np.zeros((0, hidden.shape[1]), F32)
    group_sizes = np.bincount(flat, minlength=num_slots).astype(np.int64)
    return PermutedTokens(rows, flat[source], group_sizes, source, inverse)


def grouped_matmul(
    permuted: PermutedTokens, weights: WeightView, group_sizes: Optional[np.ndarray] = None
) -> np.ndarray:
    """SiLU-gated expert FFN over token groups, one weight set per group."""
    sizes = permuted.group_sizes if group_sizes is None else np.asarray(group_sizes)
    if sizes.shape[0] != weights.num_slots:
        raise ConfigError(
            f"group_sizes covers {sizes.shape[0]} slots, tensor has {weights.num_slots}"
        )
    if int(sizes.sum()) != permuted.hidden.shape[0]:
        raise ConfigError("group sizes do not add up to the number of permuted rows")
    unbacked = np.flatnonzero((sizes > 0) & ~weights.backed)
    if unbacked.size:
        slot = int(unbacked[0])
        raise MemoryFault(
            f"layer {weights.layer}: slot {slot} has {int(sizes[slot])} tokens but no backing pages",
            layer=weights.layer,
            slot=slot,
        )
    x = permuted.hidden
    if x.shape[0] == 0:
        return np.zeros((0, weights.down_t.shape[2]), dtype=F32)
    row_slot = np.repeat(np.arange(weights.num_slots), sizes)
    gate = seq_matmul_rows(x, weights.gate_t[row_slot])
    up = seq_matmul_rows(x, weights.up_t[row_slot])
    return seq_matmul_rows(silu(gate) * up, weights.down_t[row_slot])


def combine(expert_out: np.ndarray, topk: TopKAssignment, inverse: np.ndarray) -> np.ndarray:
    b, k = topk.weights.shape
    if expert_out.shape[0] != b * k:
        raise ConfigError(f"expected {b * k} expert rows, got {expert_out.shape[0]}")
    if b == 0:
        return np.zeros((0, expert_out.shape[1]), dtype=F32)
    unperm = expert_out[inverse].reshape(b, k, -1)
    out = topk.weights[:, 0, None] * unperm[:, 0]
    for j in range(1, k):
        out += topk.weights[:, j, None] * unperm[:, j]
    return out


RerouteHook = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class LayerState:
    router: np.ndarray  # [M, H]
    weights: WeightView
    top_k: int


def forward_layer(
    hidden: np.ndarray,
    aid: np.ndarray,
    layer: LayerState,
    reroute: Optional[RerouteHook] = None,
) -> np.ndarray:
    """route -> reroute hook -> dispatch -> grouped matmul -> combine."""
    topk = route(hidden, layer.router, layer.top_k)
    ids = topk.ids if reroute is None else reroute(topk.ids, aid)
    routed = TopKAssignment(ids, topk.weights)
    permuted = dispatch(hidden, routed.ids, layer.weights.num_slots)
    expert_out = grouped_matmul(permuted, layer.weights)
    return combine(expert_out, routed, permuted.inverse)


def validate_shapes(config: ModelConfig, hidden: np.ndarray) -> None:
    if hidden.ndim != 2 or hidden.shape[1] != config.hidden:
        raise ConfigError(f"hidden must be [B, {config.hidden}], got {hidden.shape}")
