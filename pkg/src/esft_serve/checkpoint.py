"""Base model container, synthetic generation and on-disk checkpoint format.

Checkpoint directory layout::

    model.json                 ModelConfig fields + format version
    layer_000.experts.bin      M experts, ascending ID, each gate|up|down
    layer_000.router.bin       router weights [M, H]
    ...
    embedding.bin              token table [V, H] then position table [P, H]
    lm_head.bin                output head [V, H]

All blobs are row-major little-endian float32.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import ConfigError
from .moe import F32, ExpertWeights, seq_matmul

FORMAT_VERSION = 1


def random_expert(rng: np.random.Generator, config: ModelConfig) -> ExpertWeights:
    h, i = config.hidden, config.intermediate
    return ExpertWeights(
        (rng.standard_normal((i, h)) / np.sqrt(h)).astype(F32),
        (rng.standard_normal((i, h)) / np.sqrt(h)).astype(F32),
        (rng.standard_normal((h, i)) / np.sqrt(i)).astype(F32),
    )


@dataclass
class BaseModel:
    config: ModelConfig
    token_embedding: np.ndarray  # [V, H]
    position_embedding: np.ndarray  # [P, H]
    routers: list[np.ndarray]  # L x [M, H]
    experts: list[list[ExpertWeights]]  # L x M
    lm_head: np.ndarray  # [V, H]

    def __post_init__(self) -> None:
        self._lm_head_t = np.ascontiguousarray(self.lm_head.T)

    @classmethod
    def generate(cls, config: ModelConfig, seed: int = 0) -> "BaseModel":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA5E]))
        h = config.hidden
        tok = rng.standard_normal((config.vocab_size, h)).astype(F32)
        pos = (0.1 * rng.standard_normal((config.max_positions, h))).astype(F32)
        routers, experts = [], []
        for _ in range(config.num_layers):
            routers.append((rng.standard_normal((config.num_experts, h)) / np.sqrt(h)).astype(F32))
            experts.append([random_expert(rng, config) for _ in range(config.num_experts)])
        head = (rng.standard_normal((config.vocab_size, h)) / np.sqrt(h)).astype(F32)
        return cls(config, tok, pos, routers, experts, head)

    def embed(self, tokens: np.ndarray, positions: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        positions = np.asarray(positions, dtype=np.int64)
        return (
            self.token_embedding[tokens % self.config.vocab_size]
            + self.position_embedding[positions % self.config.max_positions]
        )

    def logits(self, hidden: np.ndarray) -> np.ndarray:
        return seq_matmul(hidden, self._lm_head_t)

    def with_experts(self, layer: int, replacements: dict[int, ExpertWeights]) -> list[ExpertWeights]:
        """Layer ``layer``'s expert list with some experts substituted."""
        stacked = list(self.experts[layer])
        for j, w in replacements.items():
            stacked[j] = w
        return stacked

    # -- persistence -------------------------------------------------------

    def save(self, directory: str | Path) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        meta = dict(self.config.to_dict(), format_version=FORMAT_VERSION)
        (d / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        for l in range(self.config.num_layers):
            blob = b"".join(e.to_bytes() for e in self.experts[l])
            (d / f"layer_{l:03d}.experts.bin").write_bytes(blob)
            (d / f"layer_{l:03d}.router.bin").write_bytes(_f32(self.routers[l]))
        (d / "embedding.bin").write_bytes(_f32(self.token_embedding) + _f32(self.position_embedding))
        (d / "lm_head.bin").write_bytes(_f32(self.lm_head))
        return d

    @classmethod
    def load(cls, directory: str | Path) -> "BaseModel":
        d = Path(directory)
        meta_path = d / "model.json"
        if not meta_path.is_file():
            raise ConfigError(f"{d} is not a model checkpoint (missing model.json)")
        meta = json.loads(meta_path.read_text())
        if meta.get("format_version") != FORMAT_VERSION:
            raise ConfigError(f"unsupported checkpoint format {meta.get('format_version')!r}")
        config = ModelConfig.from_dict(meta)
        h, v, p = config.hidden, config.vocab_size, config.max_positions
        esize = config.expert_size
        routers, experts = [], []
        for l in range(config.num_layers):
            blob = (d / f"layer_{l:03d}.experts.bin").read_bytes()
            if len(blob) != esize * config.num_experts:
                raise ConfigError(f"layer {l}: expert blob has {len(blob)} bytes, expected {esize * config.num_experts}")
            experts.append([
                ExpertWeights.from_bytes(blob[j * esize : (j + 1) * esize], h, config.intermediate)
                for j in range(config.num_experts)
            ])
            routers.append(_read(d / f"layer_{l:03d}.router.bin", (config.num_experts, h)))
        emb = _read(d / "embedding.bin", (v + p, h))
        head = _read(d / "lm_head.bin", (v, h))
        return cls(config, emb[:v].copy(), emb[v:].copy(), routers, experts, head)


def _f32(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _read(path: Path, shape: tuple[int, ...]) -> np.ndarray:
    arr = np.frombuffer(path.read_bytes(), dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise ConfigError(f"{path.name}: {arr.size} floats, expected shape {shape}")
    return arr.astype(F32).reshape(shape)
