"""Request traces: power-law adapter shares and per-adapter Poisson arrivals."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from ..errors import InputError


@dataclass
class Request:
    request_id: int
    adapter_id: int  # -1 = base model
    prompt_tokens: np.ndarray
    max_output_tokens: int
    arrival_time: float

    def __post_init__(self) -> None:
        self.prompt_tokens = np.asarray(self.prompt_tokens, dtype=np.int64)
        if self.prompt_tokens.size == 0:
            raise InputError(f"request {self.request_id} has an empty prompt")
        if self.max_output_tokens < 1:
            raise InputError(f"request {self.request_id} asks for no output tokens")

    @property
    def prompt_len(self) -> int:
        return int(self.prompt_tokens.size)


@dataclass(frozen=True)
class WorkloadSpec:
    num_adapters: int = 2
    alpha: float = 1.0
    rate: float = 1.0  # aggregate requests per second
    duration: float = 100.0
    prompt_len: tuple[int, int] = (16, 128)  # inclusive range
    output_len: tuple[int, int] = (8, 64)
    vocab_size: int = 256
    num_domains: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.rate < 0 or self.duration < 0:
            raise InputError("rate and duration must be non-negative")
        if self.num_adapters > 0 and not 0 < self.alpha <= 1:
            raise InputError(f"alpha must be in (0, 1], got {self.alpha}")
        lo, hi = self.prompt_len
        if not 1 <= lo <= hi:
            raise InputError(f"bad prompt length range {self.prompt_len}")
        lo, hi = self.output_len
        if not 1 <= lo <= hi:
            raise InputError(f"bad output length range {self.output_len}")


def power_law_shares(num_adapters: int, alpha: float) -> np.ndarray:
    """Equal-width bins of the CDF ``x**alpha`` on [0, 1], hottest first.

    ``alpha = 1`` is uniform; smaller ``alpha`` concentrates traffic on the
    first adapters.
    """
    if num_adapters < 1:
        raise InputError(f"need at least one adapter, got {num_adapters}")
    if not alpha > 0:
        raise InputError(f"alpha must be positive, got {alpha}")
    if alpha > 1:
        raise InputError(f"alpha must be at most 1, got {alpha}")
    edges = (np.arange(num_adapters + 1) / num_adapters) ** alpha
    return np.diff(edges)


def domain_of(adapter_id: int, num_domains: int) -> int:
    """Adapters are replicated over domains round-robin; base requests use domain 0."""
    return max(adapter_id, 0) % num_domains


def synthetic_prompt(
    seed: int, request_id: int, adapter_id: int, length: int, vocab_size: int, num_domains: int
) -> np.ndarray:
    """Token stream drawn from the adapter's domain slice of the vocabulary."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9E7, request_id]))
    d = domain_of(adapter_id, num_domains)
    width = max(vocab_size // num_domains, 1)
    lo = min(d * width, vocab_size - width)
    return rng.integers(lo, lo + width, size=length).astype(np.int64)


def generate_trace(spec: WorkloadSpec) -> list[Request]:
    """Merge one Poisson arrival process per adapter into a time-sorted trace.

    With ``num_adapters = 0`` every request targets the base model.
    """
    if spec.num_adapters == 0:
        rates = {-1: spec.rate}
    else:
        shares = power_law_shares(spec.num_adapters, spec.alpha)
        rates = {i: spec.rate * float(s) for i, s in enumerate(shares)}
    arrivals: list[tuple[float, int, int, int]] = []
    for a, lam in rates.items():
        if lam <= 0 or spec.duration <= 0:
            continue
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x7ACE, a + 1]))
        t = 0.0
        while True:
            t += rng.exponential(1.0 / lam)
            if t >= spec.duration:
                break
            plen = int(rng.integers(spec.prompt_len[0], spec.prompt_len[1] + 1))
            olen = int(rng.integers(spec.output_len[0], spec.output_len[1] + 1))
            arrivals.append((t, a, plen, olen))
    arrivals.sort(key=lambda r: (r[0], r[1]))
    return [
        Request(
            rid,
            a,
            synthetic_prompt(spec.seed, rid, a, plen, spec.vocab_size, spec.num_domains),
            olen,
            t,
        )
        for rid, (t, a, plen, olen) in enumerate(arrivals)
    ]


def write_trace(path: str | Path, trace: Iterable[Request]) -> None:
    with open(path, "w") as f:
        for r in trace:
            rec = {
                "request_id": r.request_id,
                "arrival_time": r.arrival_time,
                "adapter": r.adapter_id,
                "prompt_len": r.prompt_len,
                "output_len": r.max_output_tokens,
                "prompt": r.prompt_tokens.tolist(),
            }
            f.write(json.dumps(rec) + "\n")


def read_trace(
    path: str | Path, *, seed: int = 0, vocab_size: int = 256, num_domains: int = 5
) -> list[Request]:
    """Load a JSON-lines trace; records without ``prompt`` get a synthetic one."""
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rid = int(rec.get("request_id", len(out)))
                adapter = int(rec["adapter"])
                prompt = rec.get("prompt")
                if prompt is None:
                    prompt = synthetic_prompt(seed, rid, adapter, int(rec["prompt_len"]), vocab_size, num_domains)
                out.append(Request(rid, adapter, prompt, int(rec["output_len"]), float(rec["arrival_time"])))
            except (KeyError, ValueError, TypeError) as exc:
                raise InputError(f"{path}:{lineno}: bad trace record ({exc})") from None
    out.sort(key=lambda r: (r.arrival_time, r.request_id))
    return out


def as_base_only(trace: Iterable[Request]) -> list[Request]:
    """Same requests, all sent to the base model."""
    return [Request(r.request_id, -1, r.prompt_tokens, r.max_output_tokens, r.arrival_time) for r in trace]
