"""Command-line front end: ``losa gen|run|compare|locality-stats``.

Exit codes: 0 ok, 2 usage/config error, 3 trace format or I/O error,
4 internal invariant violation. ``LOSA_THREADS`` caps the number of worker
threads used across attention heads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import report as rpt
from .engine import EngineConfig, build_prefixes, run_block
from .errors import ConfigError, InvariantError, ReportError, TraceFormatError
from .locality import cumulative_mass, heads_to_tokens, locality_scores, select_active_threshold
from .workload import GenConfig, gen_synthetic, load_trace, save_trace

log = logging.getLogger("losa")

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_INVARIANT = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _workers() -> int:
    raw = os.environ.get("LOSA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"LOSA_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _add_engine_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--budget", type=int, default=128, help="prefix positions per query (k)")
    p.add_argument("--page", type=int, default=16, help="page size (g)")
    p.add_argument("--policy", choices=("topk", "threshold"), default="topk")
    p.add_argument("--kactive", type=int, default=5, help="active tokens per step for --policy topk")
    p.add_argument("--tau", type=float, default=0.5, help="mass fraction for --policy threshold")
    p.add_argument("--signal", choices=("q", "qkv"), default="q", help="representations scored for locality")


def _add_io_flags(p: argparse.ArgumentParser, *, fmt_default: str = "csv") -> None:
    p.add_argument("--trace", required=True, help="input trace file")
    p.add_argument("-o", "--output", required=True, help="report path")
    p.add_argument("--format", choices=("csv", "json"), default=fmt_default)
    p.add_argument("--config", help="key=value file overriding flag defaults")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="losa", description="Locality-aware sparse prefix attention simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic trace")
    g.add_argument("--L", type=int, default=4096, help="prefix length")
    g.add_argument("--B", type=int, default=16, help="block size")
    g.add_argument("--d", type=int, default=64, help="head dim")
    g.add_argument("--H", type=int, default=2, help="heads")
    g.add_argument("--steps", type=int, default=8, help="denoising steps")
    g.add_argument("--active-fraction", type=float, default=5 / 16)
    g.add_argument("--sigma", type=float, default=0.1, help="perturbation std")
    g.add_argument("--base-scale", type=float, default=1.0)
    g.add_argument("--pattern", choices=("window", "uniform"), default="window")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--output", required=True)
    g.add_argument("--config", help="key=value file overriding flag defaults")

    r = sub.add_parser("run", help="run one method over a trace")
    _add_io_flags(r)
    r.add_argument("--method", choices=("dense", "quest", "losa"), required=True)
    _add_engine_flags(r)
    r.add_argument("--per-head", action="store_true", help="include per-head records (json)")

    c = sub.add_parser("compare", help="run dense, quest and losa on one trace")
    _add_io_flags(c)
    _add_engine_flags(c)
    c.add_argument("--per-head", action="store_true", help="include per-head records (json)")

    s = sub.add_parser("locality-stats", help="per-step locality score distribution")
    _add_io_flags(s, fmt_default="json")
    s.add_argument("--tau", type=float, default=0.5)
    s.add_argument("--signal", choices=("q", "qkv"), default="q")
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    command = next((a for a in argv if not a.startswith("-")), None)
    subparsers = parser._subparsers._group_actions[0].choices  # argparse keeps no public handle
    if command not in subparsers:
        return
    target = subparsers[command]
    dests = {a.dest: a for a in target._actions}
    overrides = {}
    try:
        lines = Path(known.config).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {known.config}: {exc.strerror}") from None
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{known.config}:{n}: expected key=value")
        key, value = (x.strip() for x in line.split("=", 1))
        dest = key.replace("-", "_")
        if dest not in dests or dest in ("help", "config", "output", "trace"):
            raise UsageError(f"{known.config}:{n}: unknown key {key!r}")
        action = dests[dest]
        try:
            overrides[dest] = action.type(value) if action.type else value
        except ValueError:
            raise UsageError(f"{known.config}:{n}: bad value {value!r} for {key}") from None
        if action.choices and overrides[dest] not in action.choices:
            raise UsageError(f"{known.config}:{n}: {key} must be one of {sorted(action.choices)}")
    target.set_defaults(**overrides)


def _engine_config(args) -> EngineConfig:
    cfg = EngineConfig(
        budget=args.budget,
        page_size=args.page,
        policy=args.policy,
        k_active=args.kactive,
        tau=args.tau,
        signal=args.signal,
    )
    cfg.validate()
    return cfg


def cmd_gen(args) -> int:
    cfg = GenConfig(
        L=args.L,
        B=args.B,
        d=args.d,
        H=args.H,
        S=args.steps,
        active_fraction=args.active_fraction,
        perturb_scale=args.sigma,
        base_scale=args.base_scale,
        seed=args.seed,
        pattern=args.pattern,
    )
    w = gen_synthetic(cfg)
    save_trace(w, args.output)
    h = w.header()
    print(f"wrote {args.output}: H={h['H']} d={h['d']} L={h['L']} B={h['B']} S={h['S']} "
          f"perturbed_rows={cfg.perturbed_rows} seed={cfg.seed}")
    return EXIT_OK


def _config_echo(args, w) -> dict:
    echo = {"trace": Path(args.trace).name, **w.header()}
    for key in ("method", "budget", "page", "policy", "kactive", "tau", "signal"):
        if hasattr(args, key):
            echo[key] = getattr(args, key)
    return echo


def _run_methods(args, methods) -> rpt.RunReport:
    w = load_trace(args.trace)
    cfg = _engine_config(args)
    workers = _workers()
    prefixes = build_prefixes(w.K_p, w.V_p, cfg.page_size)
    dense_out, dense_stats = run_block(w, cfg, "dense", workers=workers, prefixes=prefixes)
    report = rpt.RunReport(config=_config_echo(args, w), per_head=getattr(args, "per_head", False))
    by_method = {}
    for m in methods:
        if m == "dense":
            out, stats = dense_out, dense_stats
        else:
            out, stats = run_block(w, cfg, m, workers=workers, prefixes=prefixes)
        rpt.attach_errors(stats, out, dense_out)
        by_method[m] = stats
        report.add(stats)
    if "quest" in by_method and "losa" in by_method:
        for q, l in zip(by_method["quest"], by_method["losa"]):
            if l.is_init:
                continue
            for h, (qh, lh) in enumerate(zip(q.heads, l.heads)):
                if not np.isin(lh.union_pages, qh.union_pages).all():
                    raise InvariantError(f"union-shrinkage: step {l.step} head {h}")
    report.summarize()
    ratio = report.summary.get("density_ratio")
    if ratio is not None and ratio < 1.0 and cfg.policy == "topk" and cfg.k_active < w.block_size:
        raise InvariantError(f"density-ratio-at-least-one: got {ratio}")
    return report


def cmd_run(args) -> int:
    report = _run_methods(args, [args.method])
    rpt.emit(report, args.format, args.output)
    s = report.summary
    print(f"{args.method}: mean density {s['mean_density'][args.method]:.6f}, "
          f"max abs err {s['max_abs_err'][args.method]:.3e}")
    return EXIT_OK


def cmd_compare(args) -> int:
    report = _run_methods(args, ["dense", "quest", "losa"])
    rpt.emit(report, args.format, args.output)
    s = report.summary
    print("mean density: " + ", ".join(f"{m}={v:.6f}" for m, v in s["mean_density"].items()))
    if "density_ratio" in s:
        print(f"density ratio quest/losa (sparse steps): {s['density_ratio']:.4f}")
    return EXIT_OK


def locality_records(w, tau: float, signal: str) -> list[dict]:
    recs = []
    for t in range(1, w.steps):
        delta = locality_scores(heads_to_tokens(w.Q_b[t]), heads_to_tokens(w.Q_b[t - 1]))
        if signal == "qkv":
            delta = (
                delta
                + locality_scores(heads_to_tokens(w.K_b[t]), heads_to_tokens(w.K_b[t - 1]))
                + locality_scores(heads_to_tokens(w.V_b[t]), heads_to_tokens(w.V_b[t - 1]))
            ) / 3.0
        order = np.argsort(-delta, kind="stable")
        sorted_delta, cum = cumulative_mass(delta)
        recs.append({
            "step": t,
            "sorted_tokens": order.tolist(),
            "sorted_delta": sorted_delta.tolist(),
            "cumulative": cum.tolist(),
            "tau": tau,
            "selected_count": len(select_active_threshold(delta, tau)),
        })
    return recs


def cmd_locality_stats(args) -> int:
    if not 0.0 < args.tau <= 1.0:
        raise ConfigError(f"tau must lie in (0, 1], got {args.tau}")
    w = load_trace(args.trace)
    recs = locality_records(w, args.tau, args.signal)
    if args.format == "json":
        doc = {"schema_version": rpt.SCHEMA_VERSION, "config": {**w.header(), "tau": args.tau, "signal": args.signal},
               "steps": recs}
        text = json.dumps(rpt._clean(doc), indent=2) + "\n"
    else:
        lines = ["step,rank,token,delta,cumulative,selected_count"]
        for r in recs:
            for rank, (tok, dv, cv) in enumerate(zip(r["sorted_tokens"], r["sorted_delta"], r["cumulative"])):
                lines.append(f"{r['step']},{rank},{tok},{rpt._cell(dv)},{rpt._cell(cv)},{r['selected_count']}")
        text = "\n".join(lines) + "\n"
    Path(args.output).write_text(text)
    counts = [r["selected_count"] for r in recs]
    print(f"tau={args.tau}: selected tokens per step {counts}")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "run": cmd_run, "compare": cmd_compare, "locality-stats": cmd_locality_stats}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"losa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"losa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TraceFormatError, ReportError, OSError) as exc:
        print(f"losa: error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except InvariantError as exc:
        print(f"losa: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
