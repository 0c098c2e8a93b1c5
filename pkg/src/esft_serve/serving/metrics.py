"""Per-request latency records and aggregate serving metrics."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

PERCENTILES = (50, 90, 99)


@dataclass
class RequestRecord:
    request_id: int
    adapter_id: int
    arrival: float
    prompt_len: int
    max_output_tokens: int
    admitted: Optional[float] = None
    first_token: Optional[float] = None
    finish: Optional[float] = None
    output_tokens: list[int] = field(default_factory=list)

    @property
    def ttft(self) -> Optional[float]:
        return None if self.first_token is None else self.first_token - self.arrival

    @property
    def queueing_delay(self) -> Optional[float]:
        return None if self.admitted is None else self.admitted - self.arrival

    @property
    def tpot(self) -> Optional[float]:
        n = len(self.output_tokens)
        if self.finish is None or n < 2:
            return None
        return (self.finish - self.first_token) / (n - 1)

    def to_dict(self) -> dict:
        return {
            "record": "request",
            "request_id": self.request_id,
            "adapter": self.adapter_id,
            "arrival": self.arrival,
            "prompt_len": self.prompt_len,
            "output_len": len(self.output_tokens),
            "ttft": self.ttft,
            "tpot": self.tpot,
            "finish": self.finish,
        }


def _pcts(values: list[float]) -> dict[str, Optional[float]]:
    if not values:
        return {f"p{p}": None for p in PERCENTILES} | {"mean": None}
    arr = np.asarray(values, dtype=float)
    out = {f"p{p}": float(np.percentile(arr, p)) for p in PERCENTILES}
    out["mean"] = float(arr.mean())
    return out


@dataclass
class MetricsReport:
    requests: list[RequestRecord]
    rejected: list[int]
    num_steps: int
    prefill_tokens: int
    decode_tokens: int
    busy_time: float
    completion_order: list[int]
    label: str = ""

    @property
    def finished(self) -> list[RequestRecord]:
        return [r for r in self.requests if r.finish is not None]

    @property
    def duration(self) -> float:
        """Makespan from the first arrival to the last completion."""
        done = self.finished
        if not done:
            return 0.0
        return max(r.finish for r in done) - min(r.arrival for r in done)

    @property
    def total_output_tokens(self) -> int:
        return sum(len(r.output_tokens) for r in self.finished)

    @property
    def total_prompt_tokens(self) -> int:
        return sum(r.prompt_len for r in self.finished)

    @property
    def decode_throughput(self) -> float:
        d = self.duration
        return self.total_output_tokens / d if d > 0 else 0.0

    @property
    def prefill_throughput(self) -> float:
        d = self.duration
        return self.total_prompt_tokens / d if d > 0 else 0.0

    def ttfts(self) -> list[float]:
        return [r.ttft for r in self.finished]

    def tpots(self) -> list[float]:
        return [r.tpot for r in self.finished if r.tpot is not None]

    def per_adapter_throughput(self) -> dict[int, float]:
        d = self.duration
        out: dict[int, float] = {}
        for r in self.finished:
            out[r.adapter_id] = out.get(r.adapter_id, 0.0) + len(r.output_tokens)
        return {a: n / d if d > 0 else 0.0 for a, n in sorted(out.items())}

    def summary(self) -> dict:
        return {
            "record": "summary",
            "label": self.label,
            "requests": len(self.requests),
            "finished": len(self.finished),
            "rejected": len(self.rejected),
            "steps": self.num_steps,
            "duration_s": self.duration,
            "busy_s": self.busy_time,
            "prefill_tokens": self.prefill_tokens,
            "decode_tokens": self.decode_tokens,
            "prefill_throughput": self.prefill_throughput,
            "decode_throughput": self.decode_throughput,
            "ttft": _pcts(self.ttfts()),
            "tpot": _pcts(self.tpots()),
        }

    def to_jsonl(self, include_requests: bool = True) -> str:
        lines = [json.dumps(r.to_dict()) for r in self.requests] if include_requests else []
        lines.append(json.dumps(self.summary()))
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        s = self.summary()
        ms = lambda v: "-" if v is None else f"{1e3 * v:9.2f}"
        rows = [
            f"{'label':<22}{self.label}",
            f"{'requests (done/rej)':<22}{s['finished']}/{s['rejected']}",
            f"{'steps':<22}{s['steps']}",
            f"{'duration [s]':<22}{s['duration_s']:.3f}",
            f"{'prefill tok/s':<22}{s['prefill_throughput']:.1f}",
            f"{'decode tok/s':<22}{s['decode_throughput']:.1f}",
            f"{'TTFT p50/p90/p99 [ms]':<22}{ms(s['ttft']['p50'])}{ms(s['ttft']['p90'])}{ms(s['ttft']['p99'])}",
            f"{'TPOT p50/p90/p99 [ms]':<22}{ms(s['tpot']['p50'])}{ms(s['tpot']['p90'])}{ms(s['tpot']['p99'])}",
        ]
        return "\n".join(rows)
