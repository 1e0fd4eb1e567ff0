"""
Command-line entry point.

    hrapr synth     generate and export a synthetic scene
    hrapr build-db  build a database from a poses + features file pair
    hrapr score     score queries against a database
    hrapr sweep     threshold sweep over the similarity threshold
    hrapr refine    scheduled refinement on a synthetic scene
    hrapr evaluate  scored/sweep/convergence CSVs plus a summary table
    hrapr bench     time retrieval and scoring

Exit codes: 0 success, 1 per-query failures in lenient mode, 2 usage,
format or configuration errors.
"""

import argparse
import dataclasses
import logging
import math
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from colorama import Fore, Style, just_fix_windows_console

from config.config_manager import RunConfig, get_config, load_manifest, save_manifest
from hrapr.evalharness import (
    SceneSummary,
    accuracy_levels,
    benchmark_uncertainty,
    convergence_curves,
    error_gap,
    filter_comparison,
    format_summary,
    median_errors,
    median_errors_by_label,
    reduction_percent,
    score_error_correlation,
    threshold_sweep,
    write_convergence_csv,
    write_sweep_csv,
)
from hrapr.exceptions import HRAPRError
from hrapr.feature_store import database_summary, load_db, read_db_files, save_db
from hrapr.refinement import (
    ScheduledRefinement,
    scheduled_refine_batch,
    synthetic_refiner_factory,
    write_refine_summary_csv,
    write_trace_csv,
)
from hrapr.replay import QueryRecord, has_ground_truth, load_queries
from hrapr.synthbench import FAR, NEAR, export_scene, generate_scene, load_field
from hrapr.uncertainty import (
    GatingMode,
    GatingPolicy,
    ScoredQuery,
    reliable_fraction,
    score_batch_detailed,
    write_scored_csv,
)
from utils.logger import setup_logging
from utils.report_writer import atomic_write_text

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2


class Console:
    """Status lines on stdout"""

    def __init__(self, color: bool = True):
        self.color = color

    def _emit(self, color: str, glyph: str, message: str):
        if self.color:
            print(f"{color}{glyph}{Style.RESET_ALL} {message}")
        else:
            print(f"{glyph} {message}")

    def ok(self, message: str):
        self._emit(Fore.GREEN, "✓", message)

    def info(self, message: str):
        self._emit(Fore.CYAN, "•", message)

    def warn(self, message: str):
        self._emit(Fore.YELLOW, "⚠", message)

    def error(self, message: str):
        self._emit(Fore.RED, "✗", message)

    def block(self, text: str):
        print(text, end="" if text.endswith("\n") else "\n")


class UsageError(HRAPRError):
    pass


def _add_run_options(parser: argparse.ArgumentParser, policy: bool = True):
    parser.add_argument("--dth", dest="d_th", type=float, help="Retrieval radius in meters")
    parser.add_argument("--gamma", type=float, help="Similarity threshold")
    parser.add_argument("--cell-size", help="Grid cell size in meters, or 'exhaustive'")
    if policy:
        parser.add_argument("--mode", choices=[m.value for m in GatingMode])
        parser.add_argument("--hs", dest="hs_steps", type=int, help="Steps for reliable predictions")
        parser.add_argument("--ls", dest="ls_steps", type=int, help="Steps for unreliable predictions")
        parser.add_argument("--policy", help="Shorthand for --hs/--ls, e.g. hs10_ls50")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hrapr", description="Retrieval-based uncertainty gating for pose regressors")
    parser.add_argument("--config", help="Config file with key = value lines")
    parser.add_argument("--preset", choices=sorted(get_config().presets), help="Run preset")
    parser.add_argument("--threads", type=int, help="Worker threads (capped by HRAPR_THREADS)")
    parser.add_argument("--strict", action="store_true", default=None, help="Abort on the first failing query")
    parser.add_argument("--log-level", default="WARNING")
    parser.add_argument("--log-dir", help="Also write a log file here")
    parser.add_argument("--no-color", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-db", help="Build a database from a poses + features file pair")
    p.add_argument("--poses", required=True)
    p.add_argument("--feat", required=True)
    p.add_argument("--out", required=True, help="Output stem")
    p.add_argument("--cell-size", help="Grid cell size in meters, or 'exhaustive'")

    p = sub.add_parser("score", help="Score queries against a database")
    p.add_argument("--db", required=True, help="Database stem")
    p.add_argument("--queries", required=True, help="Query stem")
    p.add_argument("--out", required=True, help="Scored CSV")
    _add_run_options(p)

    p = sub.add_parser("sweep", help="Sweep the similarity threshold")
    p.add_argument("--db", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--grid", help="Ascending thresholds, e.g. 0,0.5,0.9")
    p.add_argument("--out", required=True, help="Sweep CSV")
    _add_run_options(p, policy=False)

    p = sub.add_parser("refine", help="Scheduled refinement with the synthetic-field refiner")
    p.add_argument("--db", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--scene", required=True, help="Scene manifest written by synth")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--early-stop", action="store_true", default=None)
    _add_run_options(p)

    p = sub.add_parser("synth", help="Generate a synthetic scene")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-stem", required=True)
    p.add_argument("--set", dest="scene_values", action="append", default=[], metavar="FIELD=VALUE",
                   help="Scene spec override, repeatable")

    p = sub.add_parser("evaluate", help="Full evaluation report")
    p.add_argument("--db", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--scene", help="Scene manifest; enables refinement runs")
    p.add_argument("--grid", help="Ascending thresholds, e.g. 0,0.5,0.9")
    p.add_argument("--early-stop", action="store_true", default=None)
    _add_run_options(p)

    p = sub.add_parser("bench", help="Time retrieval and similarity scoring")
    p.add_argument("--db", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--repetitions", type=int, default=1000)
    _add_run_options(p, policy=False)
    return parser


_OVERRIDE_KEYS = ("d_th", "gamma", "mode", "hs_steps", "ls_steps", "policy", "grid", "cell_size", "threads",
                  "strict", "seed", "early_stop")


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    overrides = {key: getattr(args, key, None) for key in _OVERRIDE_KEYS}
    for item in getattr(args, "scene_values", []) or []:
        if "=" not in item:
            raise UsageError(f"--set expects FIELD=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[f"scene.{key.strip()}"] = value.strip()
    return get_config().resolve(preset=args.preset, config_file=args.config, overrides=overrides)


def _load_inputs(args, run: RunConfig):
    db = load_db(args.db, cell_size=run.cell_size)
    queries = load_queries(args.queries)
    if queries and queries[0].embedding.dim != db.dim:
        raise UsageError(f"query embeddings have dim {queries[0].embedding.dim}, database has dim {db.dim}")
    return db, queries


def _score(db, queries: Sequence[QueryRecord], run: RunConfig, policy: Optional[GatingPolicy] = None):
    return score_batch_detailed(db, queries, policy or run.policy(), run.d_th, strict=run.strict, threads=run.threads)


def cmd_build_db(args, run: RunConfig, console: Console) -> int:
    db = read_db_files(args.poses, args.feat, cell_size=run.cell_size)
    poses_file, feat_file = save_db(db, args.out)
    summary = database_summary(db)
    console.ok(f"Built database {poses_file} + {feat_file}: {summary['count']} entries, dim {summary['dim']}, "
               f"payload {summary['payload_bytes']} bytes")
    return EXIT_OK


def cmd_score(args, run: RunConfig, console: Console) -> int:
    db, queries = _load_inputs(args, run)
    scored, failures = _score(db, queries, run)
    write_scored_csv(args.out, scored)
    r = reliable_fraction(scored)
    console.ok(f"Scored {len(scored)} queries under {run.policy().label}: r = {r:.4f} -> {args.out}")
    if failures:
        console.warn(f"{len(failures)} queries failed")
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_sweep(args, run: RunConfig, console: Console) -> int:
    db, queries = _load_inputs(args, run)
    if not has_ground_truth(queries):
        raise UsageError(f"{args.queries} carries no ground truth; sweep needs gt=1 queries")
    scored, failures = _score(db, queries, run)
    points = threshold_sweep(scored, run.grid)
    write_sweep_csv(args.out, points)
    for p in points:
        if p.retained_ratio < 0.01:
            console.warn(f"gamma={p.gamma:g} retains {p.retained_count} queries ({100 * p.retained_ratio:.2f}%)")
    console.ok(f"Swept {len(points)} thresholds over {len(scored)} queries -> {args.out}")
    return EXIT_PARTIAL if failures else EXIT_OK


def _refine(scored: Sequence[ScoredQuery], queries: Sequence[QueryRecord], manifest: str, db_dim: int,
            run: RunConfig, policy: GatingPolicy) -> ScheduledRefinement:
    spec, _ = load_manifest(manifest)
    field = load_field(spec)
    if field.dim != db_dim:
        raise UsageError(f"scene {manifest} has dim {field.dim}, database has dim {db_dim}")
    targets = {q.id: q.embedding for q in queries}
    factory = synthetic_refiner_factory(field, targets, **run.refiner_options())
    return scheduled_refine_batch(scored, factory, policy, early_stop=run.early_stop, strict=run.strict,
                                  threads=run.threads)


def _require_refine_mode(run: RunConfig):
    if run.mode != GatingMode.REFINE.value:
        raise UsageError("refinement needs --mode refine")


def cmd_refine(args, run: RunConfig, console: Console) -> int:
    _require_refine_mode(run)
    db, queries = _load_inputs(args, run)
    policy = run.policy()
    scored, score_failures = _score(db, queries, run, policy)
    result = _refine(scored, queries, args.scene, db.dim, run, policy)

    out = Path(args.out)
    for trace in result.traces:
        write_trace_csv(out / "traces" / f"{trace.id}.csv", trace)
    write_refine_summary_csv(out / "summary.csv", scored, result.traces)
    reduction = reduction_percent(result.avg_steps, policy.ls_steps) if policy.ls_steps > 0 else 0.0
    console.ok(f"Refined {len(result.traces)} queries under {policy.label}: avg_steps {result.avg_steps:.2f}, "
               f"reduction {reduction:.1f}% vs uniform ls{policy.ls_steps}")
    if has_ground_truth(queries) and result.traces:
        gt = {q.id: q.gt for q in queries}
        pre = median_errors([(t.initial, gt[t.id]) for t in result.traces])
        post = median_errors([(t.final, gt[t.id]) for t in result.traces])
        console.info(f"median errors pre {pre.format(4)} -> post {post.format(4)} (m/deg)")
    failures = len(score_failures) + len(result.failures)
    if failures:
        console.warn(f"{failures} queries failed")
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_synth(args, run: RunConfig, console: Console) -> int:
    spec = run.scene_spec()
    scene = generate_scene(spec)
    export_scene(scene, args.out_stem)
    manifest = save_manifest(args.out_stem, spec, run)
    console.ok(f"Generated scene seed={spec.seed}: {len(scene.train)} train, {spec.num_test_near} near, "
               f"{spec.num_test_far} far, dim {spec.dim} -> {args.out_stem}.* ({manifest.name})")
    by_label = median_errors_by_label([(q.label, q.predicted, q.gt) for q in scene.queries])
    for label in (NEAR, FAR):
        if label in by_label:
            console.info(f"{label:<4} median errors {by_label[label].format(4)} (m/deg)")
    if NEAR in by_label and FAR in by_label:
        gap_t, gap_r = error_gap(by_label, FAR, NEAR)
        console.info(f"far/near gap: translation {gap_t:.2f}x, rotation {gap_r:.2f}x")
    return EXIT_OK


def _uniform(scored: Sequence[ScoredQuery], steps: int) -> List[ScoredQuery]:
    return [dataclasses.replace(s, steps=steps, dropped=False) for s in scored]


def cmd_evaluate(args, run: RunConfig, console: Console) -> int:
    db, queries = _load_inputs(args, run)
    if not has_ground_truth(queries):
        raise UsageError(f"{args.queries} carries no ground truth; evaluate needs gt=1 queries")
    policy = run.policy()
    scored, failures = _score(db, queries, run, policy)
    if not scored:
        raise UsageError("no query could be scored")
    out = Path(args.out_dir)
    write_scored_csv(out / "scored.csv", scored)
    write_sweep_csv(out / "sweep.csv", threshold_sweep(scored, run.grid))

    comparison = filter_comparison(scored)
    rows = [
        SceneSummary("APR", len(scored), comparison.full_median, accuracy=comparison.full, retained_ratio=1.0),
        SceneSummary(f"APR + filter(gamma={policy.gamma:g})", len(scored), comparison.retained_median,
                     accuracy=comparison.retained, retained_ratio=comparison.retained_ratio),
    ]
    refine_failures = 0
    if args.scene:
        _require_refine_mode(run)
        gt = {q.id: q.gt for q in queries}
        runs = [
            (f"APR + refine hs{policy.hs_steps}_ls{policy.ls_steps}", scored),
            (f"APR + refine uniform {policy.hs_steps}", _uniform(scored, policy.hs_steps)),
            (f"APR + refine uniform {policy.ls_steps}", _uniform(scored, policy.ls_steps)),
        ]
        for i, (name, batch) in enumerate(runs):
            result = _refine(batch, queries, args.scene, db.dim, run, policy)
            refine_failures += len(result.failures)
            pairs = [(t.final, gt[t.id]) for t in result.traces]
            rows.append(SceneSummary(name, len(pairs), median_errors(pairs) if pairs else None,
                                     avg_steps=result.avg_steps, accuracy=accuracy_levels(pairs)))
            if i == 0:
                classes = {s.id: "hs" if s.reliable else "ls" for s in scored}
                write_convergence_csv(out / "convergence.csv", convergence_curves(result.traces, classes))
                write_refine_summary_csv(out / "refine_summary.csv", scored, result.traces)

    rho = score_error_correlation(scored) if len(scored) >= 2 else math.nan
    text = format_summary(rows, title=f"{len(scored)} queries, d_th={run.d_th:g} m, {policy.label}")
    text += f"spearman(score, terr) = {rho:.4f}\n"
    atomic_write_text(out / "summary.txt", text)
    console.block(text)
    console.ok(f"Reports written to {out}")
    if failures or refine_failures:
        console.warn(f"{len(failures) + refine_failures} queries failed")
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_bench(args, run: RunConfig, console: Console) -> int:
    db, queries = _load_inputs(args, run)
    result = benchmark_uncertainty(db, queries, run.d_th, repetitions=args.repetitions)
    console.ok(f"{result.entries} entries ({db.index_name} index), median over {result.repetitions} runs: "
               f"retrieval {result.retrieval_ms:.3f} ms, scoring {result.total_ms:.3f} ms")
    console.info(f"embedding storage {result.bytes_per_entry} bytes per entry")
    return EXIT_OK


COMMANDS = {
    "build-db": cmd_build_db,
    "score": cmd_score,
    "sweep": cmd_sweep,
    "refine": cmd_refine,
    "synth": cmd_synth,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    console = Console(color=not args.no_color and sys.stdout.isatty())
    if console.color:
        just_fix_windows_console()
    try:
        setup_logging(args.log_level, args.log_dir)
        run = resolve_run_config(args)
        return COMMANDS[args.command](args, run, console)
    except (HRAPRError, ValueError, OSError) as e:
        logger.debug("Command %s failed", args.command, exc_info=True)
        console.error(str(e))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
