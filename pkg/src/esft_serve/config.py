"""Configuration records for the model, the page pool and the engine."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any

from .errors import ConfigError

DTYPE_BYTES = {"float32": 4, "float16": 2, "bfloat16": 2}

MIB = 1 << 20


@dataclass(frozen=True)
class ModelConfig:
    """Shape of the MoE base model.

    ``num_layers`` MoE layers, each with ``num_experts`` routed experts of
    which ``top_k`` are activated per token. ``vocab_size`` and
    ``max_positions`` size the pseudo-embedding and the output head.
    """

    num_layers: int = 4
    num_experts: int = 64
    top_k: int = 6
    hidden: int = 64
    intermediate: int = 32
    dtype: str = "float32"
    vocab_size: int = 256
    max_positions: int = 1024

    def __post_init__(self) -> None:
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(
                f"top_k must satisfy 1 <= K <= M, got K={self.top_k}, M={self.num_experts}"
            )
        if self.hidden < 1 or self.intermediate < 1:
            raise ConfigError("hidden and intermediate must be >= 1")
        if self.dtype not in DTYPE_BYTES:
            raise ConfigError(f"unknown dtype {self.dtype!r}")
        if self.vocab_size < 2 or self.max_positions < 1:
            raise ConfigError("vocab_size must be >= 2 and max_positions >= 1")

    @property
    def dtype_bytes(self) -> int:
        return DTYPE_BYTES[self.dtype]

    @property
    def expert_size(self) -> int:
        """Bytes of one expert: gate, up and down projections packed."""
        return 3 * self.hidden * self.intermediate * self.dtype_bytes

    def fingerprint(self) -> str:
        keys = ("num_layers", "num_experts", "top_k", "hidden", "intermediate", "dtype")
        payload = json.dumps({k: getattr(self, k) for k in keys}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass(frozen=True)
class PageConfig:
    page_size: int = 2 * MIB
    pool_capacity: int = 1 << 16

    def __post_init__(self) -> None:
        if self.page_size <= 0:
            raise ConfigError(f"page_size must be positive, got {self.page_size}")
        if self.pool_capacity < 0:
            raise ConfigError("pool_capacity must be non-negative")


@dataclass(frozen=True)
class SchedulerConfig:
    """Knobs for the continuous-batching loop.

    In ``simulated`` clock mode a step costs ``quantum + step_base +
    step_per_token * tokens`` seconds; in ``wall`` mode the measured forward
    time replaces the cost model.
    """

    token_budget: int = 512
    max_num_seqs: int = 64
    clock: str = "simulated"
    quantum: float = 1e-3
    step_base: float = 5e-3
    step_per_token: float = 1e-4

    def __post_init__(self) -> None:
        if self.token_budget < 1 or self.max_num_seqs < 1:
            raise ConfigError("token_budget and max_num_seqs must be >= 1")
        if self.max_num_seqs > self.token_budget:
            raise ConfigError("max_num_seqs cannot exceed token_budget")
        if self.clock not in ("simulated", "wall"):
            raise ConfigError(f"clock must be 'simulated' or 'wall', got {self.clock!r}")


@dataclass(frozen=True)
class EngineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    pages: PageConfig = field(default_factory=PageConfig)
    max_adapters: int = 4
    e_max: int = 8
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.e_max < 1:
            raise ConfigError(f"e_max must be >= 1, got {self.e_max}")
        if self.max_adapters < 0:
            raise ConfigError(f"max_adapters must be >= 0, got {self.max_adapters}")
        if self.e_max > self.model.num_experts:
            raise ConfigError("e_max cannot exceed the number of base experts")

    @property
    def num_slots(self) -> int:
        return self.model.num_experts + self.max_adapters * self.e_max

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EngineConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown engine config keys: {sorted(unknown)}")
        model = ModelConfig.from_dict(data.pop("model", {}))
        pages = PageConfig(**data.pop("pages", {}))
        sched = SchedulerConfig(**data.pop("scheduler", {}))
        return cls(model=model, pages=pages, scheduler=sched, **data)
