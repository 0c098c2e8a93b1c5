"""``esft-serve`` command line.

Exit codes: 0 success, 2 usage error, 3 validation failure (bad input or a
failed check), 4 internal invariant violation, 5 other runtime error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence


from . import analytics
from .checkpoint import BaseModel
from .config import MIB, EngineConfig, ModelConfig
from .errors import EsftServeError, InputError, InvariantViolation
from .registry import generate_synthetic_adapter, read_adapter, save_adapter
from .rerouting import fused_reroute_bench
from .serving.bench import bench_overhead
from .serving.scheduler import serve
from .serving.verify import merged_models, verify_batching_transparency, verify_equivalence
from .serving.workload import WorkloadSpec, generate_trace, read_trace, write_trace
from .toy import TOY_CONFIG, build_engine, reference_like_adapters

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_INVARIANT, EXIT_RUNTIME = 0, 2, 3, 4, 5


class _Out:
    """Human text to stdout; JSON-lines to a file, or to stdout instead of text."""

    def __init__(self, jsonl: Optional[str]):
        self.to_stdout = jsonl == "-"
        self._fh = None if jsonl in (None, "-") else open(jsonl, "w")

    def text(self, s: str) -> None:
        if not self.to_stdout:
            print(s)

    def record(self, rec: dict) -> None:
        line = json.dumps(rec)
        if self.to_stdout:
            print(line)
        elif self._fh:
            self._fh.write(line + "\n")

    def close(self) -> None:
        if self._fh:
            self._fh.close()


def _engine_config(args) -> EngineConfig:
    data = {}
    if getattr(args, "config", None):
        data = json.loads(Path(args.config).read_text())
    cfg = EngineConfig.from_dict(data) if data else EngineConfig(model=TOY_CONFIG)
    pages = cfg.pages
    if getattr(args, "page_size", None):
        pages = replace(pages, page_size=args.page_size)
    sched = cfg.scheduler
    for flag, key in (("token_budget", "token_budget"), ("clock", "clock")):
        v = getattr(args, flag, None)
        if v is not None:
            sched = replace(sched, **{key: v})
    return replace(
        cfg,
        pages=pages,
        scheduler=sched,
        e_max=getattr(args, "e_max", None) or cfg.e_max,
        seed=args.seed if getattr(args, "seed", None) is not None else cfg.seed,
    )


def _load_model(args, cfg: EngineConfig) -> BaseModel:
    if getattr(args, "model", None):
        return BaseModel.load(args.model)
    return BaseModel.generate(cfg.model, cfg.seed)


def _adapters(args, model: BaseModel, cfg: EngineConfig, default_count: int):
    dirs = getattr(args, "adapter_dirs", None) or []
    if dirs:
        return [read_adapter(d, model.config) for d in dirs]
    n = getattr(args, "num_adapters", None)
    return reference_like_adapters(model.config, default_count if n is None else n, seed=cfg.seed)


# -- analyze -----------------------------------------------------------------


def cmd_analyze(args) -> int:
    profiles: list[analytics.AdapterProfile] = []
    if args.reference:
        profiles += analytics.reference_profiles()
    for p in args.profiles or []:
        profiles += analytics.load_profiles(p)
    num_layers = args.layers
    for d in args.adapter_dirs or []:
        from .registry import AdapterManifest

        man = AdapterManifest.from_json((Path(d) / "manifest.json").read_text())
        profiles.append(analytics.AdapterProfile(man.name, counts=man.counts))
        num_layers = num_layers or len(man.counts)
    with_counts = [p for p in profiles if p.counts is not None]
    num_layers = num_layers or (len(with_counts[0].counts) if with_counts else None)
    num_layers = num_layers or analytics.REFERENCE_GEOMETRY["num_layers"]
    e_max = args.e_max or analytics.smallest_feasible_e_max(profiles)
    expert_size = args.expert_size or analytics.reference_expert_size()
    out = _Out(args.jsonl)
    f_mem = analytics.fragmentation_factor(profiles, args.experts, e_max)
    out.text(f"{'adapter':<22}{'max':>5}{'avg':>8}{'sparsity':>10}")
    for p in profiles:
        s = analytics.sparsity_factor(p)
        out.text(f"{p.name:<22}{p.max_count:>5}{p.avg_count:>8.2f}{s:>10.3f}")
        out.record({"record": "adapter", "name": p.name, "max_experts": p.max_count,
                    "avg_experts": p.avg_count, "sparsity": s})
    out.text(f"\nM={args.experts} N={len(profiles)} E_max={e_max}  F_mem = {f_mem:.3f}")
    out.record({"record": "fragmentation", "num_experts": args.experts, "num_adapters": len(profiles),
                "e_max": e_max, "f_mem": f_mem})
    rep = analytics.dry_run_accounting(profiles, num_layers, args.experts, expert_size, args.page_size, e_max)
    gib = 1 << 30
    out.text(
        f"dry run (L={num_layers}, expert={expert_size} B, page={args.page_size} B):\n"
        f"  padded adapter bytes  {rep.padded_bytes / gib:10.3f} GiB\n"
        f"  mapped adapter bytes  {rep.mapped_bytes / gib:10.3f} GiB  ({rep.pages_mapped} pages)\n"
        f"  returned to KV cache  {rep.kv_budget_delta / gib:10.3f} GiB\n"
        f"  savings               {100 * rep.savings_ratio:10.1f} %"
    )
    out.record({"record": "dry_run", **rep.to_dict()})
    out.close()
    return EXIT_OK


# -- generators --------------------------------------------------------------


def cmd_gen_model(args) -> int:
    cfg = ModelConfig(
        num_layers=args.layers, num_experts=args.experts, top_k=args.top_k, hidden=args.hidden,
        intermediate=args.intermediate, vocab_size=args.vocab,
    )
    path = BaseModel.generate(cfg, args.seed).save(args.out)
    print(f"wrote model to {path} (fingerprint {cfg.fingerprint()[:12]})")
    return EXIT_OK


def cmd_gen_adapters(args) -> int:
    model_cfg = BaseModel.load(args.model).config if args.model else TOY_CONFIG
    out_dir = Path(args.out)
    written = []
    if args.profiles or args.reference:
        profiles = analytics.load_profiles(args.profiles) if args.profiles else analytics.reference_profiles()
        count = args.count or len(profiles)
        for i in range(count):
            p = profiles[i % len(profiles)]
            counts = p.counts if p.counts is not None and len(p.counts) == model_cfg.num_layers else None
            kw = {"counts": counts} if counts else {"max_experts": p.max_count, "avg_experts": p.avg_count}
            name = p.name if i < len(profiles) else f"{p.name}-{i // len(profiles)}"
            man, w = generate_synthetic_adapter(args.seed * 7919 + i, model_cfg, name=name, **kw)
            written.append(save_adapter(out_dir / man.name, man, w))
    else:
        for i in range(args.count or 1):
            man, w = generate_synthetic_adapter(
                args.seed * 7919 + i, model_cfg, max_experts=args.max_experts,
                target_sparsity=args.sparsity, name=f"adapter-{i}",
            )
            written.append(save_adapter(out_dir / man.name, man, w))
    for p in written:
        print(p)
    return EXIT_OK


# -- verify ------------------------------------------------------------------


def cmd_verify(args) -> int:
    cfg = _engine_config(args)
    model = _load_model(args, cfg)
    adapters = _adapters(args, model, cfg, default_count=3)
    engine = build_engine(model, adapters, e_max=args.e_max, page_size=cfg.pages.page_size, debug=True)
    out = _Out(args.jsonl)
    merged = merged_models(model, adapters)
    rep = verify_equivalence(engine, adapters, seeds=range(cfg.seed, cfg.seed + args.seeds),
                             max_batch=args.max_batch, merged=merged)
    out.text(f"equivalence: {rep.cases} batches, {rep.tokens} tokens, max |dev| = {rep.max_abs_dev:g} "
             f"-> {'PASS' if rep.passed else 'FAIL'}")
    out.record(rep.to_dict())
    for m in rep.mismatches:
        out.text(f"  mismatch seed={m.seed} adapter={m.adapter} token={m.token} layer={m.layer} slots={m.slots}")
        out.record(m.to_dict())
    ok = rep.passed
    if args.serve_check:
        spec = WorkloadSpec(num_adapters=len(adapters), alpha=1.0, rate=10.0, duration=2.0,
                            prompt_len=(8, 48), output_len=(2, 8), seed=cfg.seed,
                            vocab_size=model.config.vocab_size)
        trans = verify_batching_transparency(engine, generate_trace(spec), cfg.scheduler, merged)
        good = trans["differs_from_isolated"] == 0 and trans["differs_from_merged"] == 0
        out.text(f"batching transparency: {trans['requests']} requests, "
                 f"{trans['differs_from_isolated']} differ from isolated runs, "
                 f"{trans['differs_from_merged']} differ from merged decoding -> {'PASS' if good else 'FAIL'}")
        out.record(trans)
        ok &= good
    out.close()
    return EXIT_OK if ok else EXIT_VALIDATION


# -- serve-bench ---------------------------------------------------------------


def cmd_serve_bench(args) -> int:
    cfg = _engine_config(args)
    out = _Out(args.jsonl)
    if args.mode == "reroute":
        for r in fused_reroute_bench(num_adapters=args.num_adapters or 20, e_max=args.e_max or 13,
                                     seed=cfg.seed, repeats=args.repeats * 10):
            out.text(f"B={r.batch:<6} fused {r.fused_ns_per_token:9.1f} ns/tok  "
                     f"naive {r.naive_ns_per_token:9.1f} ns/tok  identical={r.identical}")
            out.record(r.to_dict())
        out.close()
        return EXIT_OK
    model = _load_model(args, cfg)
    spec = WorkloadSpec(
        num_adapters=args.num_adapters if args.num_adapters is not None else 4,
        alpha=args.alpha, rate=args.rate, duration=args.duration, seed=cfg.seed,
        prompt_len=(args.prompt_min, args.prompt_max), output_len=(args.output_min, args.output_max),
        vocab_size=model.config.vocab_size,
    )
    if args.mode == "overhead":
        sweep = [int(x) for x in args.sweep.split(",")]
        alphas = [float(x) for x in args.alphas.split(",")] if args.alphas else [args.alpha]
        recs = bench_overhead(model, [0] + sweep, alphas, spec, replace(cfg.scheduler, clock=cfg.scheduler.clock),
                              repeats=args.repeats, page_size=cfg.pages.page_size, seed=cfg.seed)
        out.text(f"{'N':>4}{'alpha':>7}{'TTFT x':>9}{'TPOT x':>9}{'TPOT p50 base/multi [ms]':>28}  tokens")
        for r in recs:
            out.text(f"{r.num_adapters:>4}{r.alpha:>7.2f}{r.ttft_ratio:>9.3f}{r.tpot_ratio:>9.3f}"
                     f"{1e3 * r.base_tpot_p50:>14.2f}/{1e3 * r.multi_tpot_p50:<13.2f}  "
                     f"{'match' if r.tokens_match else 'DIFF'}")
            out.record(r.to_dict())
        out.close()
        return EXIT_OK
    if args.trace_in:
        trace = read_trace(args.trace_in, seed=cfg.seed, vocab_size=model.config.vocab_size)
        spec = replace(spec, num_adapters=max((r.adapter_id for r in trace), default=-1) + 1)
    else:
        trace = generate_trace(spec)
    if args.trace_out:
        write_trace(args.trace_out, trace)
    adapters = _adapters(args, model, cfg, default_count=spec.num_adapters)
    engine = build_engine(model, adapters, e_max=args.e_max, page_size=cfg.pages.page_size)
    rep = serve(trace, engine, cfg.scheduler, label=f"N={len(adapters)} alpha={spec.alpha}")
    out.text(rep.table())
    for line in rep.to_jsonl().splitlines():
        out.record(json.loads(line))
    out.close()
    return EXIT_OK


# -- dump-map ------------------------------------------------------------------


def cmd_dump_map(args) -> int:
    cfg = _engine_config(args)
    model = _load_model(args, cfg)
    adapters = _adapters(args, model, cfg, default_count=0)
    engine = build_engine(model, adapters, e_max=args.e_max, page_size=cfg.pages.page_size)
    if not 0 <= args.layer < model.config.num_layers:
        raise InputError(f"layer {args.layer} outside [0, {model.config.num_layers})")
    table = engine.registry.expert_map(args.layer)
    m = model.config.num_experts
    out = _Out(args.jsonl)
    out.text(f"layer {args.layer}: M={m} N={table.shape[0]} E_max={engine.registry.e_max}")
    for i, row in enumerate(table):
        entry = engine.registry.slots[i]
        name = entry.manifest.name if entry else "-"
        moved = [f"{j}->{int(v)}" for j, v in enumerate(row) if v != j]
        out.text(f"  [{i}] {name:<20} " + (" ".join(moved) if moved else "identity"))
        out.record({"record": "expert_map", "layer": args.layer, "adapter": i, "name": name,
                    "row": [int(v) for v in row]})
    out.close()
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="esft-serve", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model=True):
        sp.add_argument("--config", help="engine config JSON (keys of EngineConfig)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--page-size", type=int)
        sp.add_argument("--e-max", type=int)
        sp.add_argument("--jsonl", help="write JSON-lines records here ('-' = stdout, replaces text)")
        if model:
            sp.add_argument("--model", help="model checkpoint dir (default: generated toy model)")
            sp.add_argument("--adapters", dest="adapter_dirs", nargs="*", help="adapter directories")
            sp.add_argument("--num-adapters", type=int, help="synthetic adapters when no dirs given")

    a = sub.add_parser("analyze", help="sparsity, fragmentation and dry-run page accounting")
    a.add_argument("--profiles", action="append", help="profile file (repeatable)")
    a.add_argument("--reference", action="store_true", help="include the built-in reference adapters")
    a.add_argument("--adapters", dest="adapter_dirs", nargs="*")
    a.add_argument("--experts", type=int, default=64)
    a.add_argument("--layers", type=int)
    a.add_argument("--e-max", type=int)
    a.add_argument("--page-size", type=int, default=2 * MIB)
    a.add_argument("--expert-size", type=int, help="bytes per expert (default: reference geometry)")
    a.add_argument("--jsonl")
    a.set_defaults(func=cmd_analyze)

    g = sub.add_parser("gen-model", help="write a random base model checkpoint")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    for flag, default in (("layers", 4), ("experts", 64), ("top-k", 6), ("hidden", 64),
                          ("intermediate", 32), ("vocab", 256)):
        g.add_argument(f"--{flag}", type=int, default=default)
    g.set_defaults(func=cmd_gen_model)

    ga = sub.add_parser("gen-adapters", help="write synthetic adapter directories")
    ga.add_argument("--out", required=True)
    ga.add_argument("--model", help="model checkpoint dir (default: toy config)")
    ga.add_argument("--seed", type=int, default=0)
    ga.add_argument("--count", type=int)
    ga.add_argument("--profiles", help="profile file to mirror")
    ga.add_argument("--reference", action="store_true")
    ga.add_argument("--max-experts", type=int, default=8)
    ga.add_argument("--sparsity", type=float, default=0.3)
    ga.set_defaults(func=cmd_gen_adapters)

    v = sub.add_parser("verify", help="bit-exact check against merged models")
    common(v)
    v.add_argument("--seeds", type=int, default=100)
    v.add_argument("--max-batch", type=int, default=256)
    v.add_argument("--serve-check", action="store_true", help="also check batching transparency")
    v.add_argument("--token-budget", type=int)
    v.add_argument("--clock", choices=("simulated", "wall"))
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("serve-bench", help="serve a trace, sweep overhead, or time rerouting")
    common(s)
    s.add_argument("--mode", choices=("serve", "overhead", "reroute"), default="serve")
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--alphas", help="comma list for --mode overhead")
    s.add_argument("--rate", type=float, default=10.0)
    s.add_argument("--duration", type=float, default=5.0)
    s.add_argument("--prompt-min", type=int, default=16)
    s.add_argument("--prompt-max", type=int, default=96)
    s.add_argument("--output-min", type=int, default=8)
    s.add_argument("--output-max", type=int, default=32)
    s.add_argument("--token-budget", type=int)
    s.add_argument("--clock", choices=("simulated", "wall"))
    s.add_argument("--sweep", default="5,10,20", help="adapter counts for --mode overhead")
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--trace-in")
    s.add_argument("--trace-out")
    s.set_defaults(func=cmd_serve_bench)

    d = sub.add_parser("dump-map", help="print the expert map of one layer")
    common(d)
    d.add_argument("--layer", type=int, default=0)
    d.set_defaults(func=cmd_dump_map)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InvariantViolation as exc:
        print(f"internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (InputError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except EsftServeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
