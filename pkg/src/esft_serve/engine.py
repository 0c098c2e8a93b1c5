"""Multi-adapter inference engine: base model + expert store + registry.

The engine owns one epoch lock. A forward step holds it for its whole
duration and works on a :class:`StepSnapshot` (weight views plus rerouting
tables) taken under the lock, so adapter loads and evictions from other
threads only ever land between steps.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .checkpoint import BaseModel
from .config import EngineConfig, PageConfig
from .errors import ConfigError, InvariantViolation
from .memory import ExpertMemoryManager, count_cover
from .moe import F32, LayerState, forward_layer
from .registry import AdapterManifest, AdapterRegistry, AdapterWeights
from .rerouting import batched_reroute, extend_map, validate_aid


@dataclass(frozen=True)
class StepSnapshot:
    version: int
    layers: tuple[LayerState, ...]
    tables: tuple[np.ndarray, ...]  # per layer, [N+1, M] with identity last row

    @property
    def num_adapters(self) -> int:
        return self.tables[0].shape[0] - 1


def default_pool_capacity(config: EngineConfig) -> int:
    """Pages for every slot of every layer fully loaded, plus straddle slack."""
    m = config.model
    per_layer = count_cover(0, config.num_slots * m.expert_size, config.pages.page_size)
    return m.num_layers * (per_layer + 1)


class Engine:
    def __init__(
        self,
        model: BaseModel,
        max_adapters: int = 4,
        e_max: int = 8,
        page_size: int = PageConfig().page_size,
        pool_capacity: Optional[int] = None,
        debug: bool = False,
    ):
        cfg = model.config
        self.config = EngineConfig(
            model=cfg,
            pages=PageConfig(page_size, pool_capacity if pool_capacity is not None else 0),
            max_adapters=max_adapters,
            e_max=e_max,
        )
        if pool_capacity is None:
            pool_capacity = default_pool_capacity(self.config)
        base_pages = cfg.num_layers * count_cover(0, cfg.num_experts * cfg.expert_size, page_size)
        if pool_capacity < base_pages:
            raise ConfigError(f"pool of {pool_capacity} pages cannot hold the base model ({base_pages} pages)")
        self.model = model
        self.debug = debug
        self.lock = threading.RLock()
        self.memory = ExpertMemoryManager(
            cfg.num_layers, self.config.num_slots, cfg.hidden, cfg.intermediate, page_size, pool_capacity
        )
        for l in range(cfg.num_layers):
            self.memory.load(l, 0, model.experts[l])
        self.registry = AdapterRegistry(cfg, self.memory, max_adapters, e_max, lock=self.lock)
        self._snapshot: Optional[StepSnapshot] = None

    @classmethod
    def from_config(cls, config: EngineConfig, model: BaseModel, debug: bool = False) -> "Engine":
        if model.config.fingerprint() != config.model.fingerprint():
            raise ConfigError("engine config does not match the model checkpoint")
        return cls(
            model,
            max_adapters=config.max_adapters,
            e_max=config.e_max,
            page_size=config.pages.page_size,
            pool_capacity=config.pages.pool_capacity,
            debug=debug,
        )

    # -- adapter lifecycle (epoch-fenced through the registry lock) --------

    def load_adapter(self, manifest: AdapterManifest, weights: AdapterWeights | bytes, index: Optional[int] = None) -> int:
        return self.registry.load_adapter(manifest, weights, index)

    def evict_adapter(self, index: int) -> None:
        self.registry.evict_adapter(index)

    # -- forward ------------------------------------------------------------

    def snapshot(self) -> StepSnapshot:
        with self.lock:
            snap = self._snapshot
            if snap is not None and snap.version == self.registry.version:
                return snap
            cfg = self.model.config
            layers = tuple(
                LayerState(self.model.routers[l], self.memory.view(l), cfg.top_k)
                for l in range(cfg.num_layers)
            )
            tables = tuple(extend_map(self.registry.expert_map(l)) for l in range(cfg.num_layers))
            for t in tables:
                t.flags.writeable = False
            snap = StepSnapshot(self.registry.version, layers, tables)
            self._snapshot = snap
            return snap

    def forward(
        self,
        tokens: np.ndarray,
        positions: np.ndarray,
        aid: np.ndarray,
        *,
        reroute: bool = True,
        snapshot: Optional[StepSnapshot] = None,
    ) -> np.ndarray:
        """Final hidden states ``[B, H]`` for a flat token batch."""
        aid = np.asarray(aid, dtype=np.int64)
        with self.lock:
            snap = snapshot or self.snapshot()
            if reroute:
                validate_aid(aid, snap.num_adapters)
            h = self.model.embed(tokens, positions).astype(F32, copy=False)
            for l, layer in enumerate(snap.layers):
                hook = self._hook(snap.tables[l]) if reroute else None
                h = h + forward_layer(h, aid, layer, hook)
            return h

    def _hook(self, table: np.ndarray):
        m = self.model.config.num_experts
        e_max = self.config.e_max

        def hook(ids: np.ndarray, aid: np.ndarray) -> np.ndarray:
            out = batched_reroute(ids, aid, table=table, debug=self.debug)
            if self.debug:
                base = aid == -1
                if (out[base] >= m).any():
                    raise InvariantViolation("base-model token routed to an adapter slot")
                lo = (m + aid[~base] * e_max)[:, None]
                own = out[~base]
                if ((own >= m) & ((own < lo) | (own >= lo + e_max))).any():
                    raise InvariantViolation("adapter token routed outside its own slot range")
            return out

        return hook

    def next_tokens(self, hidden: np.ndarray) -> np.ndarray:
        """Greedy next token per row (lowest id wins ties)."""
        if hidden.shape[0] == 0:
            return np.zeros(0, dtype=np.int64)
        return np.argmax(self.model.logits(hidden), axis=1).astype(np.int64)
