"""Adapter manifests, slot assignment, the expert map and the load/evict lifecycle.

Adapter directory layout::

    manifest.json   {"name", "base_model_fingerprint", "dtype",
                     "per_layer": [[expert ids, ascending], ...],
                     "format_version"}
    weights.bin     per layer (ascending), per fine-tuned expert (ascending
                    id): gate|up|down row-major little-endian float32

Adapter ``i`` owns virtual slots ``[M + i*E_max, M + (i+1)*E_max)`` in every
layer. Within a layer its fine-tuned experts are packed from the start of
that range in ascending base-expert order.
"""
from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .analytics import counts_from_summary
from .checkpoint import random_expert
from .config import ModelConfig
from .errors import (
    AdapterInUseError,
    AllocationError,
    CapacityError,
    ManifestError,
    UsageError,
)
from .memory import ExpertMemoryManager
from .moe import ExpertWeights

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class AdapterManifest:
    name: str
    base_model_fingerprint: str
    per_layer: tuple[tuple[int, ...], ...]
    dtype: str = "float32"

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(len(ids) for ids in self.per_layer)

    def validate(self, config: ModelConfig, e_max: Optional[int] = None) -> None:
        if len(self.per_layer) != config.num_layers:
            raise ManifestError(
                f"{self.name}: {len(self.per_layer)} layers in manifest, model has {config.num_layers}"
            )
        if self.dtype != config.dtype:
            raise ManifestError(f"{self.name}: dtype {self.dtype} does not match model {config.dtype}")
        for l, ids in enumerate(self.per_layer):
            if any(b <= a for a, b in zip(ids, ids[1:])):
                raise ManifestError(f"{self.name}: layer {l} ids not strictly ascending: {list(ids)}")
            if ids and (ids[0] < 0 or ids[-1] >= config.num_experts):
                raise ManifestError(f"{self.name}: layer {l} ids outside [0, {config.num_experts})")
            if e_max is not None and len(ids) > e_max:
                raise ManifestError(
                    f"{self.name}: layer {l} fine-tunes {len(ids)} experts, E_max is {e_max}"
                )

    def to_json(self) -> str:
        return json.dumps(
            {
                "name": self.name,
                "base_model_fingerprint": self.base_model_fingerprint,
                "dtype": self.dtype,
                "per_layer": [list(ids) for ids in self.per_layer],
                "format_version": MANIFEST_VERSION,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "AdapterManifest":
        try:
            d = json.loads(text)
            if d.get("format_version", MANIFEST_VERSION) != MANIFEST_VERSION:
                raise ManifestError(f"unsupported manifest version {d['format_version']!r}")
            return cls(
                name=str(d["name"]),
                base_model_fingerprint=str(d["base_model_fingerprint"]),
                per_layer=tuple(tuple(int(x) for x in ids) for ids in d["per_layer"]),
                dtype=d.get("dtype", "float32"),
            )
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ManifestError(f"malformed manifest: {exc}") from None


AdapterWeights = list[list[ExpertWeights]]  # [layer][k] in ascending expert-id order


def weights_to_bytes(weights: AdapterWeights) -> bytes:
    return b"".join(w.to_bytes() for layer in weights for w in layer)


def weights_from_bytes(blob: bytes, manifest: AdapterManifest, config: ModelConfig) -> AdapterWeights:
    esize = config.expert_size
    expected = esize * sum(manifest.counts)
    if len(blob) != expected:
        raise ManifestError(f"{manifest.name}: weights blob has {len(blob)} bytes, expected {expected}")
    out, off = [], 0
    for ids in manifest.per_layer:
        layer = []
        for _ in ids:
            layer.append(ExpertWeights.from_bytes(blob[off : off + esize], config.hidden, config.intermediate))
            off += esize
        out.append(layer)
    return out


def save_adapter(directory: str | Path, manifest: AdapterManifest, weights: AdapterWeights) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "manifest.json").write_text(manifest.to_json() + "\n")
    (d / "weights.bin").write_bytes(weights_to_bytes(weights))
    return d


def read_adapter(directory: str | Path, config: ModelConfig) -> tuple[AdapterManifest, AdapterWeights]:
    d = Path(directory)
    if not (d / "manifest.json").is_file():
        raise ManifestError(f"{d}: missing manifest.json")
    manifest = AdapterManifest.from_json((d / "manifest.json").read_text())
    manifest.validate(config)
    return manifest, weights_from_bytes((d / "weights.bin").read_bytes(), manifest, config)


def generate_synthetic_adapter(
    seed: int,
    config: ModelConfig,
    *,
    counts: Optional[Sequence[int]] = None,
    target_sparsity: Optional[float] = None,
    max_experts: Optional[int] = None,
    avg_experts: Optional[float] = None,
    name: Optional[str] = None,
) -> tuple[AdapterManifest, AdapterWeights]:
    """Random adapter with a chosen per-layer expert-count profile.

    Give exactly one of: explicit ``counts``; ``max_experts`` plus
    ``avg_experts`` (a Table-style summary); or ``max_experts`` plus
    ``target_sparsity``. Expert ids and weights are drawn from ``seed``.
    """
    L, M = config.num_layers, config.num_experts
    if counts is None:
        if max_experts is None:
            raise ManifestError("need counts, or max_experts with avg_experts/target_sparsity")
        if avg_experts is None:
            if target_sparsity is None:
                raise ManifestError("need avg_experts or target_sparsity")
            avg_experts = (1.0 - target_sparsity) * max_experts
            avg_experts = min(max(avg_experts, max_experts / L), max_experts)
        counts = counts_from_summary(max_experts, avg_experts, L)
    counts = list(counts)
    if len(counts) != L or any(not 0 <= c <= M for c in counts):
        raise ManifestError(f"counts must be {L} values in [0, {M}], got {counts}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xADA]))
    order = rng.permutation(L)
    counts = [counts[k] for k in order]  # spread the busiest layer around
    per_layer = tuple(tuple(sorted(int(x) for x in rng.choice(M, size=c, replace=False))) for c in counts)
    weights = [[random_expert(rng, config) for _ in ids] for ids in per_layer]
    manifest = AdapterManifest(name or f"adapter-{seed}", config.fingerprint(), per_layer, config.dtype)
    return manifest, weights


@dataclass
class LoadedAdapter:
    index: int
    manifest: AdapterManifest
    weights: AdapterWeights = field(repr=False)
    pins: int = 0


class AdapterRegistry:
    """Fixed set of ``max_adapters`` slots over an :class:`ExpertMemoryManager`.

    Mutations are serialized by ``lock``; the serving engine holds the same
    lock for a whole inference step so loads and evictions land between
    steps.
    """

    def __init__(
        self,
        config: ModelConfig,
        memory: ExpertMemoryManager,
        max_adapters: int,
        e_max: int,
        lock: Optional[threading.RLock] = None,
    ):
        self.config = config
        self.memory = memory
        self.max_adapters = max_adapters
        self.e_max = e_max
        self.lock = lock or threading.RLock()
        self.slots: list[Optional[LoadedAdapter]] = [None] * max_adapters
        ident = np.arange(config.num_experts, dtype=np.int64)
        self._maps = np.tile(ident, (config.num_layers, max_adapters, 1))
        self.version = 0

    def delta(self, index: int) -> int:
        return self.config.num_experts + index * self.e_max

    def index_of(self, name: str) -> Optional[int]:
        for s in self.slots:
            if s is not None and s.manifest.name == name:
                return s.index
        return None

    def is_loaded(self, index: int) -> bool:
        return 0 <= index < self.max_adapters and self.slots[index] is not None

    @property
    def loaded(self) -> list[LoadedAdapter]:
        return [s for s in self.slots if s is not None]

    def load_adapter(
        self, manifest: AdapterManifest, weights: AdapterWeights | bytes, index: Optional[int] = None
    ) -> int:
        """Map, write and expose an adapter; returns its slot index."""
        with self.lock:
            if manifest.base_model_fingerprint != self.config.fingerprint():
                raise ManifestError(f"{manifest.name}: built for a different base model")
            manifest.validate(self.config, self.e_max)
            if isinstance(weights, (bytes, bytearray)):
                weights = weights_from_bytes(bytes(weights), manifest, self.config)
            if [len(w) for w in weights] != list(manifest.counts):
                raise ManifestError(f"{manifest.name}: weights do not match per-layer counts")
            if index is None:
                free = [i for i, s in enumerate(self.slots) if s is None]
                if not free:
                    raise CapacityError(f"all {self.max_adapters} adapter slots are in use")
                index = free[0]
            elif not 0 <= index < self.max_adapters or self.slots[index] is not None:
                raise CapacityError(f"adapter slot {index} is not free")
            delta = self.delta(index)
            done = []
            try:
                for l, layer_w in enumerate(weights):
                    if layer_w:
                        self.memory.load(l, delta, layer_w)
                        done.append((l, len(layer_w)))
            except AllocationError:
                for l, n in done:
                    self.memory.unload(l, delta, n)
                raise
            for l, ids in enumerate(manifest.per_layer):
                row = self._maps[l, index]
                row[:] = np.arange(self.config.num_experts)
                row[list(ids)] = delta + np.arange(len(ids))
            self.slots[index] = LoadedAdapter(index, manifest, weights)
            self.version += 1
            return index

    def evict_adapter(self, index: int) -> None:
        with self.lock:
            if not self.is_loaded(index):
                raise UsageError(f"no adapter loaded at index {index}")
            entry = self.slots[index]
            if entry.pins:
                raise AdapterInUseError(
                    f"adapter {index} ({entry.manifest.name}) has {entry.pins} in-flight requests"
                )
            delta = self.delta(index)
            for l, n in enumerate(entry.manifest.counts):
                if n:
                    self.memory.unload(l, delta, n)
            self._maps[:, index] = np.arange(self.config.num_experts)
            self.slots[index] = None
            self.version += 1

    def pin(self, index: int) -> None:
        with self.lock:
            if not self.is_loaded(index):
                raise UsageError(f"cannot pin unloaded adapter {index}")
            self.slots[index].pins += 1

    def unpin(self, index: int) -> None:
        with self.lock:
            entry = self.slots[index] if 0 <= index < self.max_adapters else None
            if entry is None or entry.pins == 0:
                raise UsageError(f"adapter {index} is not pinned")
            entry.pins -= 1

    def expert_map(self, layer: int) -> np.ndarray:
        """Read-only snapshot of the ``[N, M]`` map for ``layer``."""
        snap = self._maps[layer].copy()
        snap.flags.writeable = False
        return snap

    def merged_experts(self, base_experts: list[ExpertWeights], index: int, layer: int) -> list[ExpertWeights]:
        entry = self.slots[index]
        stacked = list(base_experts)
        for j, w in zip(entry.manifest.per_layer[layer], entry.weights[layer]):
            stacked[j] = w
        return stacked


def build_expert_map(
    manifests: Sequence[Optional[AdapterManifest]], layer: int, num_experts: int, e_max: int
) -> np.ndarray:
    """Reference reconstruction of the expert map for one layer.

    ``manifests[i]`` is the adapter in slot ``i`` or None for an empty slot.
    """
    table = np.tile(np.arange(num_experts, dtype=np.int64), (len(manifests), 1))
    for i, m in enumerate(manifests):
        if m is None:
            continue
        for delta_off, j in enumerate(m.per_layer[layer]):
            table[i, j] = num_experts + i * e_max + delta_off
    return table
