"""Padding-layout fragmentation analytics and dry-run page accounting."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .errors import InputError
from .memory import PhysicalMemoryPool, SlotRange, reserve


@dataclass(frozen=True)
class AdapterProfile:
    """Per-layer fine-tuned expert counts of one adapter.

    Either ``counts`` (one entry per layer) or the ``(max_experts,
    avg_experts)`` summary must be present. When both are present they
    describe the same adapter and ``counts`` wins.
    """

    name: str
    counts: Optional[tuple[int, ...]] = None
    max_experts: Optional[int] = None
    avg_experts: Optional[float] = None

    def __post_init__(self) -> None:
        if self.counts is None and (self.max_experts is None or self.avg_experts is None):
            raise InputError(f"profile {self.name!r} needs per-layer counts or a max/avg summary")
        if self.counts is not None and any(c < 0 for c in self.counts):
            raise InputError(f"profile {self.name!r} has negative expert counts")
        if self.counts is None and not 0 <= self.avg_experts <= self.max_experts:
            raise InputError(f"profile {self.name!r}: avg={self.avg_experts} must lie in [0, max={self.max_experts}]")

    @property
    def max_count(self) -> int:
        return max(self.counts) if self.counts is not None else int(self.max_experts)

    @property
    def avg_count(self) -> float:
        if self.counts is not None:
            return sum(self.counts) / len(self.counts)
        return float(self.avg_experts)

    def expand(self, num_layers: int) -> tuple[int, ...]:
        """Per-layer counts; summaries are expanded with :func:`counts_from_summary`."""
        if self.counts is not None:
            if len(self.counts) != num_layers:
                raise InputError(f"profile {self.name!r} has {len(self.counts)} layers, expected {num_layers}")
            return self.counts
        return counts_from_summary(self.max_count, self.avg_count, num_layers)


def counts_from_summary(max_experts: int, avg_experts: float, num_layers: int) -> tuple[int, ...]:
    """Deterministic per-layer counts with the given maximum and (rounded) mean.

    Layer 0 carries the maximum; the remaining total is spread as evenly as
    possible over the other layers, larger shares first.
    """
    total = round(avg_experts * num_layers)
    if max_experts < 0 or not (max_experts <= total <= max_experts * num_layers or num_layers == 1):
        raise InputError(
            f"no {num_layers}-layer profile has max {max_experts} and average {avg_experts}"
        )
    if num_layers == 1:
        return (max_experts,)
    rest = total - max_experts
    q, r = divmod(rest, num_layers - 1)
    return (max_experts,) + tuple(q + 1 if k < r else q for k in range(num_layers - 1))


def sparsity_factor(profile: AdapterProfile) -> float:
    """Mean per-layer shortfall from the adapter's own busiest layer, in [0, 1)."""
    if profile.counts is not None:
        e = max(profile.counts)
        if e == 0:
            raise InputError(f"profile {profile.name!r} fine-tunes no experts; sparsity undefined")
        return sum(e - c for c in profile.counts) / (len(profile.counts) * e)
    if profile.max_experts is None or profile.max_experts <= 0:
        raise InputError(f"profile {profile.name!r} fine-tunes no experts; sparsity undefined")
    return 1.0 - profile.avg_experts / profile.max_experts


def fragmentation_factor(profiles: Sequence[AdapterProfile], num_experts: int, e_max: int) -> float:
    """Allocated-over-used expert slots of the padded layout (>= 1)."""
    for p in profiles:
        if p.max_count > e_max:
            raise InputError(
                f"E_max={e_max} is smaller than {p.name!r}'s busiest layer ({p.max_count} experts)"
            )
    n = len(profiles)
    if all(p.counts is not None for p in profiles) and profiles:
        layers = {len(p.counts) for p in profiles}
        if len(layers) != 1:
            raise InputError("profiles disagree on the number of layers")
        num_layers = layers.pop()
        used = sum(num_experts + sum(p.counts[l] for p in profiles) for l in range(num_layers))
        return num_layers * (num_experts + n * e_max) / used
    # L cancels when only per-adapter averages are known.
    return (num_experts + n * e_max) / (num_experts + sum(p.avg_count for p in profiles))


@dataclass
class DryRunReport:
    num_layers: int
    num_adapters: int
    e_max: int
    expert_size: int
    page_size: int
    padded_bytes: int
    mapped_bytes: int
    pages_mapped: int
    used_bytes: int
    per_adapter_pages: dict[str, int] = field(default_factory=dict)

    @property
    def kv_budget_delta(self) -> int:
        """Bytes handed back to the KV cache compared with the padded layout."""
        return self.padded_bytes - self.mapped_bytes

    @property
    def savings_ratio(self) -> float:
        return 1.0 - self.mapped_bytes / self.padded_bytes if self.padded_bytes else 0.0

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "num_adapters": self.num_adapters,
            "e_max": self.e_max,
            "expert_size": self.expert_size,
            "page_size": self.page_size,
            "padded_bytes": self.padded_bytes,
            "mapped_bytes": self.mapped_bytes,
            "pages_mapped": self.pages_mapped,
            "used_bytes": self.used_bytes,
            "kv_budget_delta": self.kv_budget_delta,
            "savings_ratio": self.savings_ratio,
            "per_adapter_pages": dict(self.per_adapter_pages),
        }


def dry_run_accounting(
    profiles: Sequence[AdapterProfile],
    num_layers: int,
    num_experts: int,
    expert_size: int,
    page_size: int,
    e_max: int,
) -> DryRunReport:
    """Replay adapter loads against bookkeeping-only virtual tensors.

    Base experts are mapped first as in a real engine, but only pages added
    by adapters are counted in ``mapped_bytes``. Adapter ``i`` lands at slot
    ``M + i * e_max``.
    """
    fragmentation_factor(profiles, num_experts, e_max)  # feasibility check
    n = len(profiles)
    pool = PhysicalMemoryPool(page_size, capacity=1 << 62)
    per_adapter = {p.name: 0 for p in profiles}
    adapter_pages = 0
    used = 0
    for l in range(num_layers):
        t = reserve(num_experts + n * e_max, expert_size, page_size, layer=l)
        t.map_experts(SlotRange(l, 0, num_experts), pool)
        base_pages = t.pages_mapped
        for i, p in enumerate(profiles):
            e = p.expand(num_layers)[l]
            before = t.pages_mapped
            t.map_experts(SlotRange(l, num_experts + i * e_max, e), pool)
            per_adapter[p.name] += t.pages_mapped - before
            used += e * expert_size
        adapter_pages += t.pages_mapped - base_pages
    return DryRunReport(
        num_layers=num_layers,
        num_adapters=n,
        e_max=e_max,
        expert_size=expert_size,
        page_size=page_size,
        padded_bytes=num_layers * n * e_max * expert_size,
        mapped_bytes=adapter_pages * page_size,
        pages_mapped=adapter_pages,
        used_bytes=used,
        per_adapter_pages=per_adapter,
    )


def smallest_feasible_e_max(profiles: Iterable[AdapterProfile]) -> int:
    return max((p.max_count for p in profiles), default=1)


_SUMMARY = re.compile(r"^(max|avg)=(.+)$")


def parse_profiles(text: str) -> list[AdapterProfile]:
    """Parse the plain-text profile format.

    One adapter per line, ``#`` starts a comment. Either per-layer counts::

        gate-math 12 7 5 9 ...

    or a summary::

        gate-math max=12 avg=7.04
    """
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        name, *rest = line.split()
        if not rest:
            raise InputError(f"line {lineno}: adapter {name!r} has no counts")
        kv = [_SUMMARY.match(tok) for tok in rest]
        try:
            if all(kv):
                vals = {m.group(1): m.group(2) for m in kv}
                if set(vals) != {"max", "avg"}:
                    raise InputError(f"line {lineno}: summary needs both max= and avg=")
                out.append(AdapterProfile(name, max_experts=int(vals["max"]), avg_experts=float(vals["avg"])))
            elif any(kv):
                raise InputError(f"line {lineno}: cannot mix counts and max=/avg= fields")
            else:
                out.append(AdapterProfile(name, counts=tuple(int(t) for t in rest)))
        except ValueError as exc:
            if isinstance(exc, InputError):
                raise
            raise InputError(f"line {lineno}: {exc}") from None
    return out


def load_profiles(path: str | Path) -> list[AdapterProfile]:
    return parse_profiles(Path(path).read_text())


def reference_profiles() -> list[AdapterProfile]:
    """Summaries of ten reference ESFT adapters of a 16B MoE model."""
    text = resources.files("esft_serve").joinpath("data/reference_adapters.txt").read_text()
    return parse_profiles(text)


# Expert geometry of the 16B reference model: hidden 2048, expert FFN 1408,
# 16-bit weights, 26 MoE layers, 64 routed experts.
REFERENCE_GEOMETRY = {
    "num_layers": 26,
    "num_experts": 64,
    "hidden": 2048,
    "intermediate": 1408,
    "dtype_bytes": 2,
}


def reference_expert_size() -> int:
    g = REFERENCE_GEOMETRY
    return 3 * g["hidden"] * g["intermediate"] * g["dtype_bytes"]

