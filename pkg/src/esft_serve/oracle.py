"""Merged-model reference: the base model with one adapter's experts
substituted in place, evaluated token by token without dispatch, virtual
slots or rerouting.

The arithmetic order (left-to-right float32 accumulation, probabilities
renormalized in rank order, combine in rank order) is the same contract the
fast path promises, so agreement is expected to the bit.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .checkpoint import BaseModel
from .moe import F32, ExpertWeights


class MergedModel:
    def __init__(self, model: BaseModel, replacements: Optional[Sequence[dict[int, ExpertWeights]]] = None):
        self.model = model
        cfg = model.config
        self.gate, self.up, self.down = [], [], []
        for l in range(cfg.num_layers):
            experts = model.with_experts(l, replacements[l] if replacements else {})
            self.gate.append(np.stack([e.gate_proj for e in experts]).astype(F32))  # [M, I, H]
            self.up.append(np.stack([e.up_proj for e in experts]).astype(F32))
            self.down.append(np.stack([e.down_proj for e in experts]).astype(F32))  # [M, H, I]

    @classmethod
    def for_adapter(cls, model: BaseModel, per_layer_ids, per_layer_weights) -> "MergedModel":
        repl = [dict(zip(ids, ws)) for ids, ws in zip(per_layer_ids, per_layer_weights)]
        return cls(model, repl)

    def forward(self, tokens, positions) -> np.ndarray:
        h = self.model.embed(tokens, positions).astype(F32)
        for l in range(self.model.config.num_layers):
            h = h + self._layer(h, l)
        return h

    def _layer(self, h: np.ndarray, l: int) -> np.ndarray:
        cfg = self.model.config
        k = cfg.top_k
        router = self.model.routers[l]
        logits = h[:, 0, None] * router[None, :, 0]
        for c in range(1, cfg.hidden):
            logits = logits + h[:, c, None] * router[None, :, c]
        m = logits.max(axis=1, keepdims=True)
        e = np.exp(logits - m)
        total = e[:, 0]
        for j in range(1, cfg.num_experts):
            total = total + e[:, j]
        probs = e / total[:, None]
        idx = np.broadcast_to(np.arange(cfg.num_experts), probs.shape)
        order = np.lexsort((idx, -probs), axis=-1)[:, :k]  # [B, K] descending prob, low id first
        sel = np.take_along_axis(probs, order, axis=1)
        norm = sel[:, 0]
        for j in range(1, k):
            norm = norm + sel[:, j]
        w = sel / norm[:, None]
        g = self.gate[l][order]  # [B, K, I, H]
        u = self.up[l][order]
        d = self.down[l][order]  # [B, K, H, I]
        x = h[:, None, :]
        gx = x[:, :, 0, None] * g[..., 0]
        ux = x[:, :, 0, None] * u[..., 0]
        for c in range(1, cfg.hidden):
            gx = gx + x[:, :, c, None] * g[..., c]
            ux = ux + x[:, :, c, None] * u[..., c]
        with np.errstate(over="ignore"):
            act = gx / (F32(1.0) + np.exp(-gx)) * ux  # [B, K, I]
        y = act[:, :, 0, None] * d[..., 0]
        for c in range(1, cfg.intermediate):
            y = y + act[:, :, c, None] * d[..., c]
        out = w[:, 0, None] * y[:, 0]
        for j in range(1, k):
            out = out + w[:, j, None] * y[:, j]
        return out
