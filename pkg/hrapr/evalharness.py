"""
Evaluation metrics and reports.

Median errors, nested accuracy levels, threshold sweeps over the similarity
threshold, per-class convergence curves of refinement traces and the
average-step / overhead accounting of a gating policy.
"""

import logging
import math
import time
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from hrapr.exceptions import EvaluationError
from hrapr.feature_store import PoseFeatureDB, STORAGE_DTYPE
from hrapr.geometry import Pose, PoseError, pose_error
from hrapr.refinement import RefineTrace
from hrapr.uncertainty import GatingMode, GatingPolicy, ScoredQuery, similarity_score
from utils.report_writer import PathLike, fmt_float, write_csv

logger = logging.getLogger(__name__)

DEFAULT_ACCURACY_THRESHOLDS: Tuple[Tuple[float, float], ...] = ((0.25, 2.0), (0.5, 5.0), (5.0, 10.0))
DEFAULT_GAMMA_GRID: Tuple[float, ...] = (0.0, 0.5, 0.8, 0.9, 0.95, 0.98)
LOW_RETENTION_WARNING = 0.01

SWEEP_CSV_HEADER = ("gamma", "retained_ratio", "mean_terr", "mean_rerr", "median_terr", "median_rerr",
                    "norm_terr", "norm_rerr")
CONVERGENCE_CSV_HEADER = ("iter", "class", "mean_terr", "mean_rerr")

PosePair = Tuple[Pose, Pose]


@dataclass(frozen=True)
class AccuracyLevels:
    """Percentages within each (meters, degrees) threshold; None when the set is empty"""

    high: Optional[float]
    medium: Optional[float]
    low: Optional[float]
    thresholds: Tuple[Tuple[float, float], ...] = DEFAULT_ACCURACY_THRESHOLDS
    count: int = 0

    @property
    def defined(self) -> bool:
        return self.count > 0

    def as_tuple(self) -> Tuple[Optional[float], Optional[float], Optional[float]]:
        return self.high, self.medium, self.low

    def format(self) -> str:
        if not self.defined:
            return "n/a"
        return "/".join(f"{v:.1f}" for v in self.as_tuple())


@dataclass(frozen=True)
class SweepPoint:
    gamma: float
    retained_ratio: float
    retained_count: int
    mean_terr: Optional[float]
    mean_rerr: Optional[float]
    median_terr: Optional[float]
    median_rerr: Optional[float]
    norm_terr: Optional[float]
    norm_rerr: Optional[float]


@dataclass(frozen=True)
class ConvergenceCurve:
    label: str
    count: int
    mean_terr: Tuple[float, ...]
    mean_rerr: Tuple[float, ...]

    @property
    def iterations(self) -> int:
        return len(self.mean_terr)


@dataclass(frozen=True)
class OverheadReport:
    avg_steps: float
    reduction_percent: float
    reliable_fraction: float
    uniform_steps: int


@dataclass(frozen=True)
class FilterComparison:
    """Accuracy of all predictions next to the retained (reliable) ones"""

    full: AccuracyLevels
    retained: AccuracyLevels
    retained_ratio: float
    full_median: PoseError
    retained_median: Optional[PoseError]


@dataclass(frozen=True)
class SceneStats:
    name: str
    num_queries: int
    reliable_fraction: float


@dataclass(frozen=True)
class SceneSummary:
    """One row of a multi-scene table"""

    name: str
    num_queries: int
    median: Optional[PoseError] = None
    avg_steps: Optional[float] = None
    accuracy: Optional[AccuracyLevels] = None
    retained_ratio: Optional[float] = None


@dataclass(frozen=True)
class BenchmarkResult:
    repetitions: int
    retrieval_ms: float
    similarity_ms: float
    total_ms: float
    bytes_per_entry: int
    entries: int


def _error_arrays(results: Sequence[PosePair]) -> Tuple[np.ndarray, np.ndarray]:
    errors = [pose_error(pred, gt) for pred, gt in results]
    terr = np.array([e.trans_m for e in errors], dtype=np.float64)
    rerr = np.array([e.rot_deg for e in errors], dtype=np.float64)
    return terr, rerr


def _pairs(scored: Sequence[ScoredQuery]) -> List[PosePair]:
    missing = [s.id for s in scored if s.gt is None]
    if missing:
        raise EvaluationError(f"{len(missing)} queries have no ground truth (first: {missing[0]!r})")
    return [(s.predicted, s.gt) for s in scored]


def median_errors(results: Sequence[PosePair]) -> PoseError:
    """
    Median translation and rotation error of (pred, gt) pairs.

    Raises:
        EvaluationError: If results is empty
    """
    if not results:
        raise EvaluationError("median_errors needs at least one prediction")
    terr, rerr = _error_arrays(results)
    return PoseError(trans_m=float(np.median(terr)), rot_deg=float(np.median(rerr)))


def _check_thresholds(thresholds: Sequence[Tuple[float, float]]):
    if len(thresholds) != 3:
        raise EvaluationError(f"Expected three accuracy thresholds, got {len(thresholds)}")
    for (m0, d0), (m1, d1) in zip(thresholds, thresholds[1:]):
        if m1 < m0 or d1 < d0:
            raise EvaluationError(f"Accuracy thresholds must be nested, got {list(thresholds)}")


def accuracy_levels(results: Sequence[PosePair],
                    thresholds: Sequence[Tuple[float, float]] = DEFAULT_ACCURACY_THRESHOLDS) -> AccuracyLevels:
    """
    Percentage of predictions within each (meters, degrees) threshold.

    A prediction counts at a level when both errors are within the threshold.
    An empty set yields undefined (None) percentages.
    """
    _check_thresholds(thresholds)
    thresholds = tuple((float(m), float(d)) for m, d in thresholds)
    if not results:
        return AccuracyLevels(None, None, None, thresholds, 0)
    terr, rerr = _error_arrays(results)
    pct = [100.0 * float(np.mean((terr <= m) & (rerr <= d))) for m, d in thresholds]
    return AccuracyLevels(pct[0], pct[1], pct[2], thresholds, len(results))


def threshold_sweep(scored: Sequence[ScoredQuery], gammas: Sequence[float] = DEFAULT_GAMMA_GRID) -> List[SweepPoint]:
    """
    Retained ratio and errors of the queries scoring above each gamma.

    Normalized errors divide the mean error by the mean error at the first
    grid point.

    Raises:
        EvaluationError: On an empty or descending grid, no queries, or missing ground truth
    """
    if not len(gammas):
        raise EvaluationError("gamma grid is empty")
    if any(b < a for a, b in zip(gammas, gammas[1:])):
        raise EvaluationError(f"gamma grid must be ascending, got {list(gammas)}")
    if not scored:
        raise EvaluationError("threshold_sweep needs at least one scored query")
    terr, rerr = _error_arrays(_pairs(scored))
    scores = np.array([s.score.value for s in scored])

    points = []
    base_t = base_r = None
    for i, gamma in enumerate(gammas):
        keep = scores > gamma
        n = int(keep.sum())
        if n:
            mean_t, mean_r = float(terr[keep].mean()), float(rerr[keep].mean())
            med_t, med_r = float(np.median(terr[keep])), float(np.median(rerr[keep]))
        else:
            mean_t = mean_r = med_t = med_r = None
        if i == 0:
            base_t, base_r = mean_t, mean_r
        points.append(SweepPoint(
            gamma=float(gamma),
            retained_ratio=n / len(scored),
            retained_count=n,
            mean_terr=mean_t,
            mean_rerr=mean_r,
            median_terr=med_t,
            median_rerr=med_r,
            norm_terr=_normalize(mean_t, base_t),
            norm_rerr=_normalize(mean_r, base_r),
        ))
        if n / len(scored) < LOW_RETENTION_WARNING:
            logger.warning("gamma=%g retains %d of %d queries", gamma, n, len(scored))
    return points


def _normalize(value: Optional[float], base: Optional[float]) -> Optional[float]:
    if value is None or base is None or base == 0.0:
        return None
    return value / base


def convergence_curves(traces: Sequence[RefineTrace], classes: Mapping[str, str]) -> Dict[str, ConvergenceCurve]:
    """
    Mean error per iteration for each class of traces.

    Args:
        traces: Refinement traces carrying error columns
        classes: Trace id -> class label (e.g. "hs" / "ls")

    Returns:
        Label -> curve; shorter traces carry their last value forward
    """
    grouped: Dict[str, List[RefineTrace]] = {}
    for trace in traces:
        if not trace.has_errors:
            raise EvaluationError(f"trace {trace.id!r} has no ground-truth errors")
        grouped.setdefault(classes[trace.id], []).append(trace)

    curves = {}
    for label, members in sorted(grouped.items()):
        length = max(len(t.rows) for t in members)
        terr = np.array([_carry_forward(t.trans_errors(), length) for t in members])
        rerr = np.array([_carry_forward(t.rot_errors(), length) for t in members])
        curves[label] = ConvergenceCurve(
            label=label,
            count=len(members),
            mean_terr=tuple(float(v) for v in terr.mean(axis=0)),
            mean_rerr=tuple(float(v) for v in rerr.mean(axis=0)),
        )
    return curves


def _carry_forward(values: List[float], length: int) -> List[float]:
    return values + [values[-1]] * (length - len(values))


def converged_by(curve: Sequence[float], iteration: int, fraction: float = 0.1) -> bool:
    """True when curve[iteration] is within fraction of the total drop from its final value"""
    iteration = min(iteration, len(curve) - 1)
    final = curve[-1]
    return curve[iteration] - final <= fraction * (curve[0] - final)


def expected_avg_steps(r: float, hs: int, ls: int) -> float:
    """Average budget when a fraction r of queries gets hs steps and the rest ls"""
    if not 0.0 <= r <= 1.0:
        raise EvaluationError(f"reliable fraction must lie in [0, 1], got {r}")
    return r * hs + (1.0 - r) * ls


def reduction_percent(avg_steps: float, uniform_steps: float) -> float:
    """Saving relative to refining every query with uniform_steps"""
    if not uniform_steps > 0:
        raise EvaluationError(f"uniform step count must be > 0, got {uniform_steps}")
    return (uniform_steps - avg_steps) / uniform_steps * 100.0


def overhead_report(scored: Sequence[ScoredQuery], policy: GatingPolicy) -> OverheadReport:
    """
    Average assigned steps and saving against refining everything with ls steps.

    Raises:
        EvaluationError: For a filter-mode policy or no queries
    """
    if policy.mode is not GatingMode.REFINE:
        raise EvaluationError("overhead_report needs a refine-mode policy")
    active = [s for s in scored if not s.dropped]
    if not active:
        raise EvaluationError("overhead_report needs at least one scored query")
    avg = float(np.mean([s.steps for s in active]))
    r = sum(1 for s in active if s.reliable) / len(active)
    return OverheadReport(
        avg_steps=avg,
        reduction_percent=reduction_percent(avg, policy.ls_steps),
        reliable_fraction=r,
        uniform_steps=policy.ls_steps,
    )


def weighted_avg_steps(scenes: Sequence[SceneStats], hs: int, ls: int) -> float:
    """Per-scene expected steps averaged with weights equal to the query counts"""
    total = sum(s.num_queries for s in scenes)
    if total <= 0:
        raise EvaluationError("weighted_avg_steps needs at least one query")
    return sum(s.num_queries * expected_avg_steps(s.reliable_fraction, hs, ls) for s in scenes) / total


def score_error_correlation(scored: Sequence[ScoredQuery]) -> float:
    """Spearman rank correlation between similarity score and translation error; nan for constant inputs"""
    if len(scored) < 2:
        raise EvaluationError("correlation needs at least two queries")
    terr, _ = _error_arrays(_pairs(scored))
    scores = np.array([s.score.value for s in scored])
    if np.all(scores == scores[0]) or np.all(terr == terr[0]):
        return math.nan
    rho, _ = stats.spearmanr(scores, terr)
    return float(rho)


def median_errors_by_label(rows: Sequence[Tuple[str, Pose, Pose]]) -> Dict[str, PoseError]:
    """Median errors per label from (label, pred, gt) rows"""
    grouped: Dict[str, List[PosePair]] = {}
    for label, pred, gt in rows:
        grouped.setdefault(label, []).append((pred, gt))
    return {label: median_errors(pairs) for label, pairs in sorted(grouped.items())}


def error_gap(by_label: Mapping[str, PoseError], numerator: str = "far", denominator: str = "near") -> Tuple[float, float]:
    """Ratio of median errors between two labels (translation, rotation); inf over a zero denominator"""
    try:
        top, bottom = by_label[numerator], by_label[denominator]
    except KeyError as e:
        raise EvaluationError(f"no queries labelled {e.args[0]!r}") from None

    def ratio(a: float, b: float) -> float:
        if b == 0.0:
            return math.inf if a > 0.0 else 1.0
        return a / b

    return ratio(top.trans_m, bottom.trans_m), ratio(top.rot_deg, bottom.rot_deg)


def filter_comparison(scored: Sequence[ScoredQuery],
                      thresholds: Sequence[Tuple[float, float]] = DEFAULT_ACCURACY_THRESHOLDS) -> FilterComparison:
    """Full-set accuracy next to the accuracy of the reliable queries only"""
    pairs = _pairs(scored)
    if not pairs:
        raise EvaluationError("filter_comparison needs at least one scored query")
    kept = [(s.predicted, s.gt) for s in scored if s.reliable]
    return FilterComparison(
        full=accuracy_levels(pairs, thresholds),
        retained=accuracy_levels(kept, thresholds),
        retained_ratio=len(kept) / len(pairs),
        full_median=median_errors(pairs),
        retained_median=median_errors(kept) if kept else None,
    )


def aggregate_summaries(summaries: Sequence[SceneSummary], name: str = "Average") -> SceneSummary:
    """
    Average row of a multi-scene table.

    Medians are averaged per scene; average steps are weighted by query count.
    """
    if not summaries:
        raise EvaluationError("aggregate_summaries needs at least one scene")
    medians = [s.median for s in summaries if s.median is not None]
    median = None
    if medians:
        median = PoseError(trans_m=float(np.mean([m.trans_m for m in medians])),
                           rot_deg=float(np.mean([m.rot_deg for m in medians])))
    with_steps = [s for s in summaries if s.avg_steps is not None]
    avg_steps = None
    weight = sum(s.num_queries for s in with_steps)
    if with_steps and weight > 0:
        avg_steps = sum(s.avg_steps * s.num_queries for s in with_steps) / weight
    return SceneSummary(name=name, num_queries=sum(s.num_queries for s in summaries), median=median,
                        avg_steps=avg_steps)


def benchmark_uncertainty(db: PoseFeatureDB, queries: Sequence, d_th: float, repetitions: int = 1000) -> BenchmarkResult:
    """
    Median per-query timings of retrieval and of the full similarity score.

    Args:
        db: Training database
        queries: (id, predicted, embedding, ...) tuples, cycled over
        d_th: Retrieval radius in meters
        repetitions: Timed calls
    """
    if not queries:
        raise EvaluationError("benchmark needs at least one query")
    if repetitions < 1:
        raise EvaluationError(f"repetitions must be >= 1, got {repetitions}")
    retrieval, scoring = [], []
    for i in range(repetitions):
        _, predicted, embedding = tuple(queries[i % len(queries)])[:3]
        start = time.perf_counter()
        db.retrieve_indices(predicted.t, d_th)
        middle = time.perf_counter()
        similarity_score(db, embedding, predicted, d_th)
        end = time.perf_counter()
        retrieval.append(middle - start)
        scoring.append(end - middle)
    retrieval_ms = 1000.0 * float(np.median(retrieval))
    total_ms = 1000.0 * float(np.median(scoring))
    return BenchmarkResult(
        repetitions=repetitions,
        retrieval_ms=retrieval_ms,
        similarity_ms=max(total_ms - retrieval_ms, 0.0),
        total_ms=total_ms,
        bytes_per_entry=db.dim * STORAGE_DTYPE.itemsize,
        entries=db.count,
    )


def sweep_csv_rows(points: Sequence[SweepPoint]):
    for p in points:
        yield (
            fmt_float(p.gamma, 4),
            fmt_float(p.retained_ratio, 6),
            fmt_float(p.mean_terr, 6),
            fmt_float(p.mean_rerr, 6),
            fmt_float(p.median_terr, 6),
            fmt_float(p.median_rerr, 6),
            fmt_float(p.norm_terr, 6),
            fmt_float(p.norm_rerr, 6),
        )


def write_sweep_csv(path: PathLike, points: Sequence[SweepPoint]):
    return write_csv(path, SWEEP_CSV_HEADER, sweep_csv_rows(points))


def convergence_csv_rows(curves: Mapping[str, ConvergenceCurve]):
    for label in sorted(curves):
        curve = curves[label]
        for i, (t, r) in enumerate(zip(curve.mean_terr, curve.mean_rerr)):
            yield i, label, fmt_float(t, 6), fmt_float(r, 6)


def write_convergence_csv(path: PathLike, curves: Mapping[str, ConvergenceCurve]):
    return write_csv(path, CONVERGENCE_CSV_HEADER, convergence_csv_rows(curves))


def format_summary(rows: Sequence[SceneSummary], title: str = "") -> str:
    """Fixed-width table: scheme, med_terr/med_rerr, high/med/low, retained, avg_steps"""
    header = f"{'scheme':<28} {'med_terr/med_rerr':>18} {'high/med/low':>18} {'retained':>9} {'avg_steps':>9}"
    lines = [title] if title else []
    lines += [header, "-" * len(header)]
    for row in rows:
        median = row.median.format(2) if row.median is not None else "n/a"
        accuracy = row.accuracy.format() if row.accuracy is not None else "-"
        retained = f"{100.0 * row.retained_ratio:.1f}%" if row.retained_ratio is not None else "-"
        steps = f"{row.avg_steps:.1f}" if row.avg_steps is not None else "-"
        lines.append(f"{row.name:<28} {median:>18} {accuracy:>18} {retained:>9} {steps:>9}")
    return "\n".join(lines) + "\n"
