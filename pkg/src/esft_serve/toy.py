"""Desk-scale model and adapter sets used by the CLI, benches and tests."""
from __future__ import annotations

from .analytics import reference_profiles
from .checkpoint import BaseModel
from .config import ModelConfig
from .engine import Engine
from .registry import AdapterManifest, AdapterWeights, generate_synthetic_adapter

TOY_CONFIG = ModelConfig(num_layers=4, num_experts=64, top_k=6, hidden=64, intermediate=32)


def reference_like_adapters(
    config: ModelConfig, count: int, seed: int = 0
) -> list[tuple[AdapterManifest, AdapterWeights]]:
    """``count`` synthetic adapters whose count profiles cycle through the
    reference summaries (replicated past ten, with fresh weights)."""
    profiles = reference_profiles()
    out = []
    for i in range(count):
        p = profiles[i % len(profiles)]
        e = min(p.max_count, config.num_experts)
        name = p.name if i < len(profiles) else f"{p.name}-{i // len(profiles)}"
        out.append(
            generate_synthetic_adapter(
                seed * 7919 + i, config, max_experts=e, avg_experts=min(p.avg_count, e), name=name
            )
        )
    return out


def build_engine(
    model: BaseModel,
    adapters: list[tuple[AdapterManifest, AdapterWeights]],
    e_max: int | None = None,
    page_size: int = 4096,
    max_adapters: int | None = None,
    debug: bool = False,
) -> Engine:
    if e_max is None:
        e_max = max((max(m.counts) for m, _ in adapters), default=1) or 1
    eng = Engine(
        model,
        max_adapters=len(adapters) if max_adapters is None else max_adapters,
        e_max=e_max,
        page_size=page_size,
        debug=debug,
    )
    for man, w in adapters:
        eng.load_adapter(man, w)
    return eng
