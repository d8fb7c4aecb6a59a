"""Command-line entry point.

Exit codes: 0 success, 2 config/usage error, 3 runtime abort (memory cap),
4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional

import numpy as np

from . import __version__
from .attention import AttentionEngine
from .config import ConfigError, SimConfig, load_config, validate_config
from .connector import (grad_check, init_caption_decoder, init_connector,
                        load_scene, make_scene, stage1_value_and_grads)
from .harness import (ENGINE_HEADS, ENGINE_LAYERS, StrategyAbort, StrategyKind,
                      fit_growth, generate_stream, run_strategy)
from .traceio import (read_trace_csv, summarize, write_events_jsonl,
                      write_manifest, write_trace_csv)
from .types import PositionClock, TokenFactory
from .verbalize import DEFAULT_TOKENS_PER_STEP, budget_report

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_VERIFY = 4

_STRATEGIES = {
    "a1": StrategyKind.PROGRESSIVE_VISUAL,
    "a2": StrategyKind.VERBALIZED_SEPARATE,
    "b": StrategyKind.INTERLEAVED,
}


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def cmd_simulate(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    if args.duration_s <= 0:
        return _fail("--duration-s must be > 0", EXIT_CONFIG)
    os.makedirs(args.out_dir, exist_ok=True)
    stream = generate_stream(cfg, args.duration_s)
    kinds = list(_STRATEGIES.values()) if args.strategy == "all" \
        else [_STRATEGIES[args.strategy]]
    cap = None
    if args.mem_cap_bytes is not None:
        cap = max(1, args.mem_cap_bytes // (cfg.d * 8))

    def run(kind):
        return run_strategy(kind, stream, cfg, noise_p=args.noise_p,
                            live_token_cap=cap)

    traces = []
    truncated = False
    with ThreadPoolExecutor(max_workers=len(kinds)) as pool:
        for future in [pool.submit(run, kind) for kind in kinds]:
            try:
                traces.append(future.result())
            except StrategyAbort as exc:
                truncated = True
                traces.append(exc.trace)
                print(f"aborted: {exc}", file=sys.stderr)

    artifacts = []
    for trace in traces:
        csv_path = os.path.join(args.out_dir, f"trace_{trace.kind.value}.csv")
        jsonl_path = os.path.join(args.out_dir, f"events_{trace.kind.value}.jsonl")
        write_trace_csv(csv_path, trace)
        write_events_jsonl(jsonl_path, trace)
        artifacts.extend([csv_path, jsonl_path])
    summary_path = os.path.join(args.out_dir, "summary.json")
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(summarize(traces), fh, indent=2, sort_keys=True)
    artifacts.append(summary_path)
    write_manifest(os.path.join(args.out_dir, "manifest.json"), cfg, artifacts,
                   __version__)
    print(json.dumps({"out_dir": args.out_dir,
                      "strategies": [t.kind.value for t in traces],
                      "truncated": truncated}, sort_keys=True))
    return EXIT_RUNTIME if truncated else EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    try:
        start, stop, step = (int(v) for v in args.sweep.split(":"))
    except ValueError:
        return _fail(f"bad --sweep {args.sweep!r}, expected from:to:step", EXIT_CONFIG)
    if start < 1 or step < 1 or stop < start:
        return _fail(f"bad sweep range {args.sweep!r}: need 1 <= from <= to, step >= 1",
                     EXIT_CONFIG)

    engine = AttentionEngine(cfg.d, ENGINE_HEADS, ENGINE_LAYERS, cfg.vocab_size, cfg.seed)
    factory = TokenFactory()
    clock = PositionClock()
    rng = np.random.default_rng(cfg.seed)
    grid = list(range(start, stop + 1, step))
    rows = []
    for n in range(1, stop + 1):
        tok = factory.prompt(rng.standard_normal(cfg.d))
        tok.entry_position = clock.next()
        before = engine.flop_counter
        engine.append_token(tok)
        if n in grid:
            rows.append((n, engine.flop_counter - before))

    out = {"points": [{"live_tokens": n, "append_flops": f} for n, f in rows]}
    if len(rows) >= 2:
        xs = np.array([n for n, _ in rows], dtype=np.float64)
        ys = np.array([f for _, f in rows], dtype=np.float64)
        slope, intercept = np.polyfit(xs, ys, 1)
        pred = slope * xs + intercept
        ss_tot = float(np.sum((ys - ys.mean()) ** 2))
        r2 = 1.0 if ss_tot == 0 else 1.0 - float(np.sum((ys - pred) ** 2)) / ss_tot
        out["fit"] = {"slope": slope, "intercept": intercept, "r2": r2}
    else:
        out["fit"] = None  # a single point cannot pin an affine law
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("live_tokens,append_flops\n")
            for n, f in rows:
                fh.write(f"{n},{f}\n")
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    if args.eps <= 0:
        return _fail("--eps must be > 0", EXIT_CONFIG)
    if args.scene:
        try:
            scene = load_scene(args.scene)
        except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
            return _fail(f"cannot load scene {args.scene}: {exc}", EXIT_CONFIG)
    else:
        scene = make_scene(args.seed, side=4, dim=24)
    dim = scene.grid.dim
    params = init_connector(feat_dim=dim, d=16, m=4, k=len(scene.objects) or 2,
                            d_mlp=24, seed=args.seed)
    decoder = init_caption_decoder(16, 64, args.seed)

    def value_and_grad(p):
        losses, grads = stage1_value_and_grads(p, decoder, scene, lambda_1=2.0)
        return losses["total"], grads

    err = grad_check(params, value_and_grad, eps=args.eps,
                     rng=np.random.default_rng(args.seed))
    print(json.dumps({"max_rel_error": err, "eps": args.eps,
                      "pass": bool(err <= 1e-4)}, sort_keys=True))
    return EXIT_OK if err <= 1e-4 else EXIT_VERIFY


def cmd_report(args: argparse.Namespace) -> int:
    if args.budget:
        try:
            cfg = load_config(args.config) if args.config else validate_config(SimConfig())
        except ConfigError as exc:
            return _fail(str(exc), EXIT_CONFIG)
        try:
            report = budget_report(cfg, args.horizon_s, args.tokens_per_step)
        except ValueError as exc:
            return _fail(str(exc), EXIT_CONFIG)
        print(report.to_json())
        return EXIT_OK
    try:
        per_strategy = read_trace_csv(args.scaling)
    except (OSError, ValueError) as exc:
        return _fail(f"cannot read trace: {exc}", EXIT_CONFIG)
    out = {}
    for strategy, cols in sorted(per_strategy.items()):
        try:
            out[strategy] = fit_growth(cols["live_tokens"]).to_dict()
        except ValueError as exc:
            return _fail(str(exc), EXIT_CONFIG)
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streamcache",
                                     description="Streaming token-cache simulator")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run caching strategies over a synthetic stream")
    p.add_argument("config")
    p.add_argument("--strategy", choices=["all", "a1", "a2", "b"], default="all")
    p.add_argument("--duration-s", type=float, default=1200.0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--noise-p", type=float, default=0.0)
    p.add_argument("--mem-cap-bytes", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", help="sweep live-cache sizes and fit flops-per-append")
    p.add_argument("config")
    p.add_argument("--sweep", default="8:512:8", help="from:to:step live-token sizes")
    p.add_argument("--out", default=None, help="optional CSV output path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference check of the connector losses")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--scene", default=None, help="scene JSON file")
    group.add_argument("--synthetic", action="store_true", default=True)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="print budget arithmetic or growth classification")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--budget", action="store_true")
    group.add_argument("--scaling", default=None, metavar="TRACE_CSV")
    p.add_argument("--config", default=None)
    p.add_argument("--horizon-s", type=float, default=3600.0)
    p.add_argument("--tokens-per-step", type=float, default=DEFAULT_TOKENS_PER_STEP)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, which matches the config exit code
        return int(exc.code) if exc.code is not None else EXIT_CONFIG
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
