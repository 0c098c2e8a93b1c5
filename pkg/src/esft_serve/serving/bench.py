"""Multi-adapter vs. base-only latency comparison on identical traces."""
from __future__ import annotations

import gc
import statistics
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from ..checkpoint import BaseModel
from ..config import SchedulerConfig
from ..toy import build_engine, reference_like_adapters
from .metrics import MetricsReport
from .scheduler import serve
from .workload import WorkloadSpec, as_base_only, generate_trace


@dataclass
class OverheadRecord:
    num_adapters: int
    alpha: float
    requests: int
    ttft_ratio: float  # median over repeats of p50(multi) / p50(base)
    tpot_ratio: float
    ttft_ratio_p90: float
    tpot_ratio_p90: float
    base_tpot_p50: float
    multi_tpot_p50: float
    tokens_match: bool

    def to_dict(self) -> dict:
        return {
            "record": "overhead",
            "num_adapters": self.num_adapters,
            "alpha": self.alpha,
            "requests": self.requests,
            "ttft_ratio_p50": self.ttft_ratio,
            "tpot_ratio_p50": self.tpot_ratio,
            "ttft_ratio_p90": self.ttft_ratio_p90,
            "tpot_ratio_p90": self.tpot_ratio_p90,
            "base_tpot_p50_s": self.base_tpot_p50,
            "multi_tpot_p50_s": self.multi_tpot_p50,
            "tokens_match": self.tokens_match,
        }


def _p(values: list[float], q: float) -> float:
    return float(np.percentile(values, q)) if values else float("nan")


def _quiet(fn, *args, **kw) -> MetricsReport:
    gc.collect()
    was = gc.isenabled()
    gc.disable()
    try:
        return fn(*args, **kw)
    finally:
        if was:
            gc.enable()


def bench_overhead(
    model: BaseModel,
    num_adapters: Sequence[int] = (0, 5, 10, 20),
    alphas: Sequence[float] = (1.0,),
    workload: Optional[WorkloadSpec] = None,
    scheduler: SchedulerConfig = SchedulerConfig(clock="wall"),
    repeats: int = 5,
    page_size: int = 4096,
    seed: int = 0,
) -> list[OverheadRecord]:
    """Run each trace through a base-only engine and an N-adapter engine.

    The base arm serves the same requests with every adapter id replaced by
    the base-model marker and rerouting switched off. Arms alternate within
    each repeat so slow drift in machine speed affects both, and the garbage
    collector is paused while an arm runs. The default workload keeps the
    engine below saturation: near full load, queueing amplifies tiny
    step-time jitter into large TPOT swings in either arm.
    """
    workload = workload or WorkloadSpec(rate=8.0, duration=4.0, prompt_len=(16, 96), output_len=(8, 32))
    base_engine = build_engine(model, [], page_size=page_size, max_adapters=0)
    out = []
    for n in num_adapters:
        for alpha in alphas:
            spec = replace(workload, num_adapters=n, alpha=alpha, seed=seed, vocab_size=model.config.vocab_size)
            trace = generate_trace(spec)
            base_trace = as_base_only(trace)
            if n == 0:
                rep = serve(base_trace, base_engine, scheduler, reroute=False)
                tp = _p(rep.tpots(), 50)
                out.append(OverheadRecord(0, alpha, len(trace), 1.0, 1.0, 1.0, 1.0, tp, tp, True))
                continue
            adapters = reference_like_adapters(model.config, n, seed=seed)
            engine = build_engine(model, adapters, e_max=13, page_size=page_size)
            ratios: dict[str, list[float]] = {k: [] for k in ("ttft50", "tpot50", "ttft90", "tpot90")}
            base_tp, multi_tp = [], []
            match = True
            for i in range(repeats):
                if i % 2:
                    m = _quiet(serve, trace, engine, scheduler, label=f"N={n}")
                    b = _quiet(serve, base_trace, base_engine, scheduler, reroute=False, label="base")
                else:
                    b = _quiet(serve, base_trace, base_engine, scheduler, reroute=False, label="base")
                    m = _quiet(serve, trace, engine, scheduler, label=f"N={n}")
                match &= (b.prefill_tokens, b.decode_tokens) == (m.prefill_tokens, m.decode_tokens)
                ratios["ttft50"].append(_p(m.ttfts(), 50) / _p(b.ttfts(), 50))
                ratios["tpot50"].append(_p(m.tpots(), 50) / _p(b.tpots(), 50))
                ratios["ttft90"].append(_p(m.ttfts(), 90) / _p(b.ttfts(), 90))
                ratios["tpot90"].append(_p(m.tpots(), 90) / _p(b.tpots(), 90))
                base_tp.append(_p(b.tpots(), 50))
                multi_tp.append(_p(m.tpots(), 50))
            med = {k: statistics.median(v) for k, v in ratios.items()}
            out.append(
                OverheadRecord(
                    n, alpha, len(trace), med["ttft50"], med["tpot50"], med["ttft90"], med["tpot90"],
                    statistics.median(base_tp), statistics.median(multi_tp), match,
                )
            )
    return out
