"""navmatch command line: synth, gen-queries, train, match, bench, verify.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import datetime as dt
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

from . import __version__, report
from .engine import METRICS_HEADER, MODES, EngineConfig, Termination, format_match, metrics_row, run_query
from .graph import (
    ORACLE_CAP,
    GraphFormatError,
    SamplingError,
    brute_force_enumerate,
    canonical,
    generate_query_set,
    geometric_graph,
    load_graph,
    load_query_set,
    save_graph,
    save_query_set,
)
from .model import PROFILES, ModelConfig, NavigatorModel, VocabularyError
from .modelfile import ModelFileError, load_model, save_model
from .trainer import TRAIN_PROFILES, TrainingConfig, TrainingDiverged, train

PROFILE_ENV = "NAVMATCH_PROFILE"

log = logging.getLogger("navmatch")


class UsageError(Exception):
    pass


# -- manifest ---------------------------------------------------------------


def _now():
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.started = _now()
        self.entries = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}
        self.extra = {}

    def add(self, **kw):
        self.extra.update(kw)

    def write(self, path):
        lines = [f"command={self.command}", f"version={__version__}"]
        lines += [f"{k}={v}" for k, v in self.entries.items()]
        lines += [f"{k}={v}" for k, v in sorted(self.extra.items())]
        lines += [f"started={self.started}", f"finished={_now()}"]
        Path(path).write_text("\n".join(lines) + "\n")


def _manifest_path(out) -> Path:
    out = Path(out)
    return out / "manifest.txt" if out.is_dir() else out.with_name(out.name + ".manifest.txt")


# -- shared helpers ---------------------------------------------------------


def _profile(args) -> str:
    return args.profile or os.environ.get(PROFILE_ENV) or "paper"


def _termination(text) -> Termination:
    try:
        return Termination.parse(text)
    except ValueError as e:
        raise UsageError(str(e))


def _load_inputs(args, need_model: bool):
    g = load_graph(args.graph)
    qs = load_query_set(args.queries)
    if len(qs) == 0:
        raise UsageError(f"query set {args.queries} is empty")
    model = None
    if getattr(args, "model", None):
        model = load_model(args.model)
        if model.config.vocab != g.vertex_count:
            raise VocabularyError(
                f"model vocabulary has {model.config.vocab} vertices but the data graph has {g.vertex_count}"
            )
    elif need_model:
        raise UsageError("--mode neugn needs --model")
    return g, qs, model


def _run_one(job):
    k, q, g, cfg, model = job
    matches, stats = run_query(q, g, cfg, model)
    return k, matches, stats


def run_queries(queries, g, cfg, model, jobs=1):
    """``[(matches, stats)]`` in query order; ``jobs > 1`` spreads queries over processes."""
    work = [(k, q, g, cfg, model) for k, q in enumerate(queries)]
    if jobs <= 1:
        results = [_run_one(w) for w in work]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, work))
    return [(m, s) for _, m, s in sorted(results, key=lambda r: r[0])]


# -- commands ---------------------------------------------------------------


def cmd_synth(args):
    if args.vertices < 1 or args.labels < 1 or args.degree <= 0:
        raise UsageError("--vertices, --labels and --degree must be positive")
    g = geometric_graph(args.vertices, args.labels, args.degree, args.seed)
    save_graph(g, args.out)
    man = RunManifest("synth", args)
    man.add(edges=g.edge_count)
    man.write(_manifest_path(args.out))
    print(f"wrote {args.out}: {g.vertex_count} vertices, {g.edge_count} edges")
    return 0


def cmd_gen_queries(args):
    if args.count < 1 or args.size < 1:
        raise UsageError("--count and --size must be >= 1")
    g = load_graph(args.graph)
    qs = generate_query_set(
        g, args.count, args.size, args.seed, source=str(args.graph),
        min_avg_degree=args.min_degree, max_avg_degree=args.max_degree,
    )
    save_query_set(qs, args.out)
    print(f"wrote {len(qs)} queries of size {args.size} to {args.out}")
    return 0


def cmd_train(args):
    if args.epochs < 1:
        raise UsageError("--epochs must be >= 1")
    profile = _profile(args)
    g = load_graph(args.graph)
    cfg = TrainingConfig(
        epochs=args.epochs,
        batch_size=args.batch_size or TRAIN_PROFILES[profile]["batch_size"],
        learning_rate=args.lr,
        lr_decay=args.lr_decay,
        walk_min=args.walk_min,
        walk_max=args.walk_max,
        mask_ratio=args.mask_ratio,
        seed=args.seed,
        checkpoint_every=args.checkpoint_every,
        freeze_extractor=args.freeze_extractor,
    )
    try:
        cfg.validate()
    except ValueError as e:
        raise UsageError(str(e))
    mcfg = ModelConfig.from_profile(profile, g.vertex_count, max(g.labels) + 1)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.csv")
    ckpt_dir = out.parent / (out.stem + "_checkpoints") if cfg.checkpoint_every else None
    model, rows = train(g, cfg, mcfg, log_path=log_path, checkpoint_dir=ckpt_dir)
    save_model(model, out)
    man = RunManifest("train", args)
    man.add(profile=profile, log_path=log_path, **{f"train.{k}": v for k, v in asdict(cfg).items()},
            **{f"model.{k}": v for k, v in asdict(mcfg).items()})
    man.write(_manifest_path(out))
    last = rows[-1]
    print(f"trained {len(rows)} epochs: loss {last['mean_loss']:.4f}, held-out top1 {last['top1']:.4f}")
    return 0


def _engine_config(args, mode, depth=None):
    return EngineConfig(
        mode=mode,
        navigation_depth=args.depth if depth is None else depth,
        termination=_termination(args.terminate),
        batching=not args.no_batching,
        batch_size=args.nav_batch,
        step_budget=args.step_budget,
    )


def cmd_match(args):
    g, qs, model = _load_inputs(args, args.mode == "neugn")
    cfg = _engine_config(args, args.mode)
    results = run_queries(qs.queries, g, cfg, model, args.jobs)
    lines = [METRICS_HEADER]
    lines += [metrics_row(k, args.mode, st, timing=not args.no_timing) for k, (_, st) in enumerate(results)]
    Path(args.out).write_text("\n".join(lines) + "\n")
    if args.matches:
        with open(args.matches, "w") as fh:
            for k, (ms, _) in enumerate(results):
                fh.write(f"# query {k}\n")
                for m in ms:
                    fh.write(format_match(m) + "\n")
    man = RunManifest("match", args)
    man.write(_manifest_path(args.out))
    total = sum(len(ms) for ms, _ in results)
    print(f"{len(results)} queries, {total} matches")
    return 0


def _depths(text) -> list[int]:
    try:
        depths = sorted({int(x) for x in text.split(",") if x.strip()})
    except ValueError:
        raise UsageError(f"bad --depths {text!r}")
    if not depths or depths[0] < 0:
        raise UsageError("--depths needs non-negative integers")
    return depths


def cmd_bench(args):
    g, qs, model = _load_inputs(args, True)
    depths = _depths(args.depths)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    term = _termination(args.terminate)
    timing = not args.no_timing
    raw = ["depth," + METRICS_HEADER]
    fms, mps = {}, {}

    def record(depth, mode, results):
        fms[(depth, mode)] = [st.fms for _, st in results]
        if term.kind == "time":
            mps[(depth, mode)] = report.median([st.matches / st.elapsed if st.elapsed > 0 else 0.0 for _, st in results])
        for k, (_, st) in enumerate(results):
            raw.append(f"{depth}," + metrics_row(k, mode, st, timing=timing))

    modes = ["baseline", "neugn"] + (["oracle"] if args.oracle else [])
    base = run_queries(qs.queries, g, _engine_config(args, "baseline", 0), None, args.jobs)
    oracle = run_queries(qs.queries, g, _engine_config(args, "oracle", 0), None, args.jobs) if args.oracle else None
    for depth in depths:
        record(depth, "baseline", base)
        record(depth, "neugn", run_queries(qs.queries, g, _engine_config(args, "neugn", depth), model, args.jobs))
        if oracle is not None:
            record(depth, "oracle", oracle)
    rows = report.summary_rows(fms, mps=mps)
    (out / "per_query.csv").write_text("\n".join(raw) + "\n")
    (out / "summary.csv").write_text(report.format_summary(rows))
    if not args.no_figures:
        report.plot_depth_sweep(rows, out / "fms_vs_depth.png")
        deepest = depths[-1]
        series = {m: fms[(deepest, m)] for m in modes}
        report.plot_fms_cdf(series, out / "fms_cdf.png", title=f"navigation depth {deepest}")
    man = RunManifest("bench", args)
    man.add(queries=len(qs))
    man.write(out / "manifest.txt")
    sys.stdout.write(report.format_summary(rows))
    return 0


def cmd_verify(args):
    g = load_graph(args.graph)
    qs = load_query_set(args.queries)
    if len(qs) == 0:
        raise UsageError(f"query set {args.queries} is empty")
    if args.model:
        model = load_model(args.model)
    else:
        model = NavigatorModel.initialize(ModelConfig.from_profile("desk", g.vertex_count, max(g.labels) + 1), args.seed)
    checked = skipped = ok = 0
    failed = False
    for k, q in enumerate(qs.queries):
        if q.vertex_count > args.cap:
            log.warning("query %d has %d vertices, above the oracle cap %d; skipped", k, q.vertex_count, args.cap)
            skipped += 1
            continue
        checked += 1
        ref = brute_force_enumerate(q, g, args.cap)
        good = True
        for mode in MODES:
            ms, _ = run_query(q, g, EngineConfig(mode=mode, navigation_depth=args.depth), model)
            got = [canonical(m) for m in ms]
            if len(got) != len(set(got)) or set(got) != ref:
                extra = sorted(set(got) - ref)
                missing = sorted(ref - set(got))
                diff = f"unexpected {extra[0]}" if extra else (f"missing {missing[0]}" if missing else "duplicate match")
                print(f"query {k} mode {mode}: {diff}")
                good = False
                break
        ok += good
        failed |= not good
    print(f"{ok}/{checked} queries equivalent" + (f" ({skipped} skipped)" if skipped else ""))
    return 1 if failed else 0


# -- parser -----------------------------------------------------------------


def _add_engine_flags(p):
    p.add_argument("--graph", required=True)
    p.add_argument("--queries", required=True, help="query set directory")
    p.add_argument("--model")
    p.add_argument("--terminate", default="first", help="all, first, time:<s> or count:<n>")
    p.add_argument("--step-budget", type=int, default=None, help="stop a query after this many extensions")
    p.add_argument("--nav-batch", type=int, default=16, help="children evaluated per grouped navigator pass")
    p.add_argument("--no-batching", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--no-timing", action="store_true", help="write 0 in timing columns for byte-stable CSVs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="navmatch", description=__doc__.splitlines()[0])
    parser.add_argument("--profile", choices=sorted(PROFILES), default=None,
                        help=f"hyperparameter bundle (default from ${PROFILE_ENV}, else paper)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a seeded synthetic data graph")
    p.add_argument("--out", required=True)
    p.add_argument("--vertices", type=int, default=500)
    p.add_argument("--labels", type=int, default=8)
    p.add_argument("--degree", type=float, default=6.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gen-queries", help="sample a query set by random walks")
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-degree", type=float, default=None, help="keep queries with average degree >= this")
    p.add_argument("--max-degree", type=float, default=None, help="keep queries with average degree < this")
    p.set_defaults(func=cmd_gen_queries)

    p = sub.add_parser("train", help="train a navigator on a data graph")
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--profile", choices=sorted(PROFILES), default=argparse.SUPPRESS)
    p.add_argument("--epochs", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--lr-decay", type=float, default=0.999)
    p.add_argument("--walk-min", type=int, default=5)
    p.add_argument("--walk-max", type=int, default=19)
    p.add_argument("--mask-ratio", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--freeze-extractor", action="store_true")
    p.add_argument("--log", default=None, help="training log CSV (default <out>.log.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("match", help="enumerate matches for a query set")
    _add_engine_flags(p)
    p.add_argument("--mode", choices=MODES, default="baseline")
    p.add_argument("--depth", type=int, default=10, help="navigation depth cap")
    p.add_argument("--out", required=True, help="metrics CSV")
    p.add_argument("--matches", default=None, help="optional match dump")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("bench", help="baseline vs neugn report with a depth sweep")
    _add_engine_flags(p)
    p.add_argument("--depths", default="0,2,4,8")
    p.add_argument("--oracle", action="store_true", help="also run the extendability oracle")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", help="check every mode against brute force")
    p.add_argument("--graph", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--model", default=None, help="default: randomly initialised desk model")
    p.add_argument("--depth", type=int, default=10)
    p.add_argument("--cap", type=int, default=ORACLE_CAP, help="largest query size checked")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    for name in ("jobs", "nav_batch"):
        if getattr(args, name, 1) < 1:
            parser.error(f"--{name.replace('_', '-')} must be >= 1")
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"navmatch: error: {e}", file=sys.stderr)
        return 2
    except (GraphFormatError, ModelFileError, VocabularyError, SamplingError, TrainingDiverged, OSError, ValueError) as e:
        print(f"navmatch: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
