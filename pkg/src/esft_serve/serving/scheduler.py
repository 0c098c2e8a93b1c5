"""Continuous-batching serving loop with chunked prefill.

Each step packs, in order: one decode token for every running request past
its prompt, the next prompt chunk of every running request still in prefill,
then newly admitted requests (FIFO) until the token budget is spent. Tokens
of different adapters share the batch; the adapter id travels with every
token.
"""
from __future__ import annotations

import queue
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from ..config import SchedulerConfig
from ..engine import Engine
from ..errors import AdapterInUseError, UsageError
from ..registry import AdapterManifest, AdapterWeights
from .metrics import MetricsReport, RequestRecord
from .workload import Request


@dataclass
class ControlEvent:
    """Adapter load or evict, applied at the first step boundary at or after ``time``."""

    time: float
    op: str  # "load" | "evict"
    index: int
    manifest: Optional[AdapterManifest] = None
    weights: Optional[AdapterWeights] = None


@dataclass
class StepInfo:
    step: int
    start: float
    end: float
    version_start: int
    version_end: int
    aid: np.ndarray
    request_ids: np.ndarray
    num_prefill: int
    num_decode: int
    inflight_adapters: frozenset[int]
    loaded_adapters: frozenset[int]


@dataclass
class _Live:
    req: Request
    rec: RequestRecord
    prefilled: int = 0

    @property
    def in_prefill(self) -> bool:
        return self.prefilled < self.req.prompt_len


@dataclass
class ControlLog:
    applied: list[tuple[float, str, int]] = field(default_factory=list)
    refused: list[tuple[float, str, int, str]] = field(default_factory=list)


class Scheduler:
    def __init__(self, engine: Engine, config: SchedulerConfig = SchedulerConfig(), *, reroute: bool = True):
        self.engine = engine
        self.config = config
        self.reroute = reroute
        self._inbox: "queue.Queue[ControlEvent]" = queue.Queue()
        self.control_log = ControlLog()

    def submit_control(self, event: ControlEvent) -> None:
        """Thread-safe; the event is applied at the next step boundary."""
        self._inbox.put(event)

    # ------------------------------------------------------------------

    def run(
        self,
        trace: Iterable[Request],
        control: Iterable[ControlEvent] = (),
        observer: Optional[Callable[[StepInfo], None]] = None,
        label: str = "",
    ) -> MetricsReport:
        cfg = self.config
        eng = self.engine
        reg = eng.registry
        pending = deque(sorted(trace, key=lambda r: (r.arrival_time, r.request_id)))
        ctrl = deque(sorted(control, key=lambda e: e.time))
        records = {
            r.request_id: RequestRecord(r.request_id, r.adapter_id, r.arrival_time, r.prompt_len, r.max_output_tokens)
            for r in pending
        }
        waiting: deque[Request] = deque()
        running: list[_Live] = []
        draining: set[int] = set()
        rejected: list[int] = []
        completion: list[int] = []
        now = 0.0
        steps = prefill_tok = decode_tok = 0
        busy = 0.0

        while pending or waiting or running:
            if not waiting and not running:
                nxt = pending[0].arrival_time
                if ctrl and ctrl[0].time < nxt:
                    nxt = ctrl[0].time
                now = max(now, nxt)
            while pending and pending[0].arrival_time <= now:
                waiting.append(pending.popleft())

            with eng.lock:
                self._apply_control(now, ctrl, draining)
                tokens, positions, aids, rids = [], [], [], []
                emit_rows: list[tuple[int, _Live]] = []
                budget = cfg.token_budget
                n_pre = n_dec = 0
                for live in running:
                    if not live.in_prefill:
                        r = live.req
                        tokens.append(live.rec.output_tokens[-1])
                        positions.append(r.prompt_len + len(live.rec.output_tokens) - 1)
                        aids.append(r.adapter_id)
                        rids.append(r.request_id)
                        emit_rows.append((len(tokens) - 1, live))
                        budget -= 1
                        n_dec += 1
                for live in running:
                    if live.in_prefill and budget > 0:
                        n = self._add_chunk(live, budget, tokens, positions, aids, rids, emit_rows)
                        n_pre += n
                        budget -= n
                while waiting and budget > 0 and len(running) < cfg.max_num_seqs:
                    r = waiting.popleft()
                    a = r.adapter_id
                    if a != -1 and (not reg.is_loaded(a) or a in draining):
                        rejected.append(r.request_id)
                        continue
                    if a != -1:
                        reg.pin(a)
                    live = _Live(r, records[r.request_id])
                    live.rec.admitted = now
                    running.append(live)
                    n = self._add_chunk(live, budget, tokens, positions, aids, rids, emit_rows)
                    n_pre += n
                    budget -= n
                if not tokens:
                    continue

                snap = eng.snapshot()
                aid_arr = np.asarray(aids, dtype=np.int64)
                t0 = time.perf_counter()
                hidden = eng.forward(
                    np.asarray(tokens, dtype=np.int64),
                    np.asarray(positions, dtype=np.int64),
                    aid_arr,
                    reroute=self.reroute,
                    snapshot=snap,
                )
                rows = np.asarray([row for row, _ in emit_rows], dtype=np.int64)
                nxt_tokens = eng.next_tokens(hidden[rows]) if rows.size else rows
                elapsed = time.perf_counter() - t0
                if cfg.clock == "wall":
                    dur = cfg.quantum + elapsed
                else:
                    dur = cfg.quantum + cfg.step_base + cfg.step_per_token * len(tokens)
                start, now = now, now + dur
                busy += dur
                steps += 1
                prefill_tok += n_pre
                decode_tok += n_dec

                for (_, live), tok in zip(emit_rows, nxt_tokens):
                    rec = live.rec
                    if not rec.output_tokens:
                        rec.first_token = now
                    rec.output_tokens.append(int(tok))
                    if len(rec.output_tokens) >= live.req.max_output_tokens:
                        rec.finish = now
                        completion.append(rec.request_id)
                        if live.req.adapter_id != -1:
                            reg.unpin(live.req.adapter_id)
                running = [l for l in running if l.rec.finish is None]
                version_end = reg.version
                inflight = frozenset(l.req.adapter_id for l in running if l.req.adapter_id != -1)
                loaded = frozenset(s.index for s in reg.loaded)
                self._try_drain(now, draining, inflight)

            if observer is not None:
                observer(
                    StepInfo(
                        steps, start, now, snap.version, version_end, aid_arr,
                        np.asarray(rids, dtype=np.int64), n_pre, n_dec, inflight, loaded,
                    )
                )

        with eng.lock:
            self._apply_control(float("inf"), ctrl, draining)
            self._try_drain(now, draining, frozenset())
        return MetricsReport(
            requests=[records[k] for k in sorted(records)],
            rejected=rejected,
            num_steps=steps,
            prefill_tokens=prefill_tok,
            decode_tokens=decode_tok,
            busy_time=busy,
            completion_order=completion,
            label=label,
        )

    @staticmethod
    def _add_chunk(live, budget, tokens, positions, aids, rids, emit_rows) -> int:
        r = live.req
        n = min(budget, r.prompt_len - live.prefilled)
        if n <= 0:
            return 0
        lo = live.prefilled
        tokens.extend(r.prompt_tokens[lo : lo + n].tolist())
        positions.extend(range(lo, lo + n))
        aids.extend([r.adapter_id] * n)
        rids.extend([r.request_id] * n)
        live.prefilled += n
        if not live.in_prefill:
            emit_rows.append((len(tokens) - 1, live))
        return n

    def _apply_control(self, now: float, ctrl: deque, draining: set[int]) -> None:
        events = []
        while ctrl and ctrl[0].time <= now:
            events.append(ctrl.popleft())
        while True:
            try:
                events.append(self._inbox.get_nowait())
            except queue.Empty:
                break
        reg = self.engine.registry
        for ev in events:
            try:
                if ev.op == "load":
                    reg.load_adapter(ev.manifest, ev.weights, ev.index)
                    draining.discard(ev.index)
                    self.control_log.applied.append((now, "load", ev.index))
                elif ev.op == "evict":
                    draining.add(ev.index)
                else:
                    raise UsageError(f"unknown control op {ev.op!r}")
            except Exception as exc:  # noqa: BLE001 - recorded, serving continues
                self.control_log.refused.append((now, ev.op, ev.index, f"{type(exc).__name__}: {exc}"))

    def _try_drain(self, now: float, draining: set[int], inflight: frozenset[int]) -> None:
        reg = self.engine.registry
        for idx in sorted(draining):
            if idx in inflight:
                continue
            try:
                reg.evict_adapter(idx)
                self.control_log.applied.append((now, "evict", idx))
            except AdapterInUseError:
                continue
            except UsageError as exc:
                self.control_log.refused.append((now, "evict", idx, str(exc)))
            draining.discard(idx)


def serve(
    trace: Iterable[Request],
    engine: Engine,
    config: SchedulerConfig = SchedulerConfig(),
    *,
    control: Iterable[ControlEvent] = (),
    observer: Optional[Callable[[StepInfo], None]] = None,
    reroute: bool = True,
    label: str = "",
) -> MetricsReport:
    return Scheduler(engine, config, reroute=reroute).run(trace, control, observer, label)
