"""
Budgeted iterative pose refinement.

Any object with `loss(pose)` and `step(pose)` can drive refine(); the
built-in SyntheticFieldRefiner minimizes 1 - cos(field(p), target) over a
synthetic scene with finite-difference gradients and a backtracking line
search, so its loss never increases.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np

from hrapr.exceptions import HRAPRError, RefinementError
from hrapr.feature_store import FeatureEmbedding, format_float
from hrapr.geometry import Pose, apply_increment, quat_multiply, rot_error, trans_error
from hrapr.synthbench import FieldSource, feature_field, feature_field_jacobian, field_values, pose_vector
from hrapr.uncertainty import GatingPolicy, QueryFailure, ScoredQuery, cosine_similarity
from utils.report_writer import PathLike, fmt_float, write_csv

logger = logging.getLogger(__name__)

TRACE_CSV_HEADER = ("iter", "loss", "tx", "ty", "tz", "qw", "qx", "qy", "qz")
TRACE_ERROR_COLUMNS = ("terr_m", "rerr_deg")
SUMMARY_CSV_HEADER = ("id", "score", "reliable", "steps_used", "pre_terr", "pre_rerr", "post_terr", "post_rerr")

# z_q moves by q * (0, dphi) / 2, so a rotation step of 4 * gradient moves z_q
# along the projected loss gradient at the same rate as the translation.
ROTATION_GAIN = 4.0
GRADIENT_FLOOR = 1e-9

EARLY_STOP_TOL = 1e-10
EARLY_STOP_PATIENCE = 3


class RefinerInterface(Protocol):
    def loss(self, pose: Pose) -> float:
        ...

    def step(self, pose: Pose) -> Tuple[Pose, float]:
        ...


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    pose: Pose
    loss: float
    trans_err: Optional[float] = None
    rot_err: Optional[float] = None


@dataclass
class RefineTrace:
    """Pose and loss at every iteration, iteration 0 being the start"""

    id: str
    initial: Pose
    budget: int
    rows: List[TraceRow] = field(default_factory=list)
    early_stopped: bool = False

    @property
    def steps_used(self) -> int:
        return len(self.rows) - 1

    @property
    def final(self) -> Pose:
        return self.rows[-1].pose if self.rows else self.initial

    @property
    def has_errors(self) -> bool:
        return bool(self.rows) and self.rows[0].trans_err is not None

    def losses(self) -> List[float]:
        return [row.loss for row in self.rows]

    def trans_errors(self) -> List[float]:
        return [row.trans_err for row in self.rows]

    def rot_errors(self) -> List[float]:
        return [row.rot_err for row in self.rows]


def _row(iteration: int, pose: Pose, loss: float, gt: Optional[Pose]) -> TraceRow:
    if gt is None:
        return TraceRow(iteration, pose, loss)
    return TraceRow(iteration, pose, loss, trans_error(pose, gt), rot_error(pose, gt))


def refine(refiner: RefinerInterface, start: Pose, budget: int, gt: Optional[Pose] = None, query_id: str = "",
           early_stop: bool = False, tol: float = EARLY_STOP_TOL, patience: int = EARLY_STOP_PATIENCE) -> RefineTrace:
    """
    Run up to budget refinement steps from start.

    Args:
        refiner: Object providing loss() and step()
        start: Initial pose, recorded as iteration 0
        budget: Number of step calls
        gt: Ground truth; adds error columns to every row
        query_id: Id recorded in the trace
        early_stop: Stop once the loss decrease stays below tol for patience consecutive steps
        tol: Early-stop decrease threshold
        patience: Early-stop step count

    Returns:
        RefineTrace with steps_used + 1 rows

    Raises:
        RefinementError: If a step fails; the partial trace is attached
    """
    if budget < 0:
        raise ValueError(f"budget must be >= 0, got {budget}")
    trace = RefineTrace(id=query_id, initial=start, budget=budget)
    trace.rows.append(_row(0, start, float(refiner.loss(start)), gt))

    pose = start
    loss = trace.rows[0].loss
    stalled = 0
    for k in range(1, budget + 1):
        try:
            pose_next, loss_next = refiner.step(pose)
        except (HRAPRError, ValueError, FloatingPointError) as e:
            raise RefinementError(f"step {k} of {query_id or 'query'} failed: {e}", trace) from e
        if not math.isfinite(loss_next):
            raise RefinementError(f"step {k} of {query_id or 'query'} produced loss {loss_next}", trace)
        trace.rows.append(_row(k, pose_next, float(loss_next), gt))
        if early_stop:
            stalled = stalled + 1 if loss - loss_next < tol else 0
            if stalled >= patience:
                trace.early_stopped = True
                break
        pose, loss = pose_next, float(loss_next)
    return trace


def synthetic_field_loss(source: FieldSource, f_target: FeatureEmbedding, p: Pose) -> float:
    """1 - cosine similarity between the field at p and the target, in [0, 2]"""
    return 1.0 - cosine_similarity(feature_field(source, p), f_target)


def _rotation_tangents(q: np.ndarray) -> np.ndarray:
    """(3, 4): derivative of q * exp(phi / 2) w.r.t. each phi component at 0"""
    return np.array([0.5 * quat_multiply(q, np.eye(4)[k + 1]) for k in range(3)])


def synthetic_field_gradient(source: FieldSource, f_target: FeatureEmbedding, p: Pose) -> np.ndarray:
    """
    Closed-form gradient of synthetic_field_loss.

    Returns:
        6-vector: translation components, then body-frame rotation components
    """
    f = field_values(source, pose_vector(p))
    g = f_target.as_float64()
    nf = float(np.linalg.norm(f))
    ng = f_target.cached_norm
    c = float(f @ g) / (nf * ng)
    dloss_df = -(g / (nf * ng) - c * f / (nf * nf))
    dloss_dz = feature_field_jacobian(source, p).T @ dloss_df
    rot = _rotation_tangents(pose_vector(p)[3:]) @ dloss_dz[3:]
    return np.concatenate((dloss_dz[:3], rot))


class SyntheticFieldRefiner:
    """
    Steepest descent on the synthetic-field loss.

    The gradient comes from central differences over 3 translation and
    3 rotation axes; steps shrink by `shrink` until the Armijo condition holds,
    at most `max_backtracks` times.
    """

    def __init__(self, source: FieldSource, target: FeatureEmbedding, eps_t: float = 1e-3, eps_r: float = 1e-3,
                 shrink: float = 0.5, max_backtracks: int = 20, step_size: float = 1.0, armijo: float = 1e-4):
        if not (eps_t > 0 and eps_r > 0):
            raise ValueError(f"Finite-difference steps must be > 0, got eps_t={eps_t} eps_r={eps_r}")
        if not 0.0 < shrink < 1.0:
            raise ValueError(f"shrink must lie in (0, 1), got {shrink}")
        if max_backtracks < 0 or not step_size > 0:
            raise ValueError(f"Invalid line search: max_backtracks={max_backtracks} step_size={step_size}")
        self.source = source
        self.target = target
        self.eps_t = eps_t
        self.eps_r = eps_r
        self.shrink = shrink
        self.max_backtracks = max_backtracks
        self.step_size = step_size
        self.armijo = armijo
        self._target64 = target.as_float64()

    def loss(self, pose: Pose) -> float:
        return synthetic_field_loss(self.source, self.target, pose)

    def _batch_loss(self, poses: Sequence[Pose]) -> np.ndarray:
        values = field_values(self.source, np.array([pose_vector(p) for p in poses]))
        norms = np.linalg.norm(values, axis=1)
        cos = (values @ self._target64) / (norms * self.target.cached_norm)
        return 1.0 - np.clip(cos, -1.0, 1.0)

    def gradient(self, pose: Pose) -> np.ndarray:
        """Central-difference gradient, same layout as synthetic_field_gradient"""
        zero = np.zeros(3)
        probes = []
        for k in range(3):
            e = np.eye(3)[k]
            probes += [apply_increment(pose, self.eps_t * e, zero), apply_increment(pose, -self.eps_t * e, zero)]
        for k in range(3):
            e = np.eye(3)[k]
            probes += [apply_increment(pose, zero, self.eps_r * e), apply_increment(pose, zero, -self.eps_r * e)]
        losses = self._batch_loss(probes)
        eps = np.array([self.eps_t] * 3 + [self.eps_r] * 3)
        return (losses[0::2] - losses[1::2]) / (2.0 * eps)

    def step(self, pose: Pose) -> Tuple[Pose, float]:
        return synthetic_field_step(self, pose)


def synthetic_field_step(refiner: SyntheticFieldRefiner, p: Pose) -> Tuple[Pose, float]:
    """
    One line-searched descent step.

    Returns:
        (new pose, its loss); the input pose and its loss when no step decreases the loss

    Raises:
        RefinementError: If the gradient is not finite
    """
    f0 = refiner.loss(p)
    grad = refiner.gradient(p)
    if not np.all(np.isfinite(grad)):
        raise RefinementError(f"non-finite gradient {grad.tolist()}")
    if float(np.linalg.norm(grad)) <= GRADIENT_FLOOR:
        return p, f0

    direction = np.concatenate((-grad[:3], -ROTATION_GAIN * grad[3:]))
    slope = float(grad @ direction)
    alpha = refiner.step_size
    for _ in range(refiner.max_backtracks + 1):
        candidate = apply_increment(p, alpha * direction[:3], alpha * direction[3:])
        fc = refiner.loss(candidate)
        if fc < f0 and fc <= f0 + refiner.armijo * alpha * slope:
            return candidate, fc
        alpha *= refiner.shrink
    return p, f0


@dataclass
class ScheduledRefinement:
    traces: List[RefineTrace]
    avg_steps: float
    failures: List[QueryFailure] = field(default_factory=list)


RefinerFactory = Callable[[ScoredQuery], RefinerInterface]


def synthetic_refiner_factory(source: FieldSource, targets: Mapping[str, FeatureEmbedding], **options) -> RefinerFactory:
    """Factory building a SyntheticFieldRefiner per query from its embedding"""
    def make(query: ScoredQuery) -> SyntheticFieldRefiner:
        try:
            target = targets[query.id]
        except KeyError:
            raise RefinementError(f"no target embedding for query {query.id!r}") from None
        return SyntheticFieldRefiner(source, target, **options)
    return make


def scheduled_refine_batch(scored: Sequence[ScoredQuery], factory: RefinerFactory, policy: GatingPolicy,
                           early_stop: bool = False, strict: bool = False, threads: int = 1) -> ScheduledRefinement:
    """
    Refine every non-dropped query with its own step budget.

    Args:
        scored: Output of score_batch under policy
        factory: Builds a refiner for a scored query
        policy: Gating policy the queries were scored with
        early_stop: Forwarded to refine()
        strict: Raise on the first failing query instead of collecting it
        threads: Worker threads

    Returns:
        ScheduledRefinement; avg_steps is the mean steps_used over refined queries
    """
    todo = [s for s in scored if not s.dropped]

    def run(query: ScoredQuery):
        try:
            return refine(factory(query), query.predicted, query.steps, gt=query.gt, query_id=query.id,
                          early_stop=early_stop)
        except (HRAPRError, ValueError) as e:
            if strict:
                raise
            return QueryFailure(id=query.id, message=str(e))

    if threads > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, todo))
    else:
        results = [run(q) for q in todo]

    traces = [r for r in results if isinstance(r, RefineTrace)]
    failures = [r for r in results if isinstance(r, QueryFailure)]
    for failure in failures:
        logger.warning("Refinement failed for query %s: %s", failure.id, failure.message)
    avg_steps = float(np.mean([t.steps_used for t in traces])) if traces else 0.0
    logger.info("Refined %d queries under %s: avg %.2f steps, %d failures",
                len(traces), policy.label, avg_steps, len(failures))
    return ScheduledRefinement(traces=traces, avg_steps=avg_steps, failures=failures)


def trace_csv_rows(trace: RefineTrace):
    for row in trace.rows:
        values = [row.iteration, format_float(row.loss)] + [format_float(v) for v in row.pose.to_values()]
        if trace.has_errors:
            values += [fmt_float(row.trans_err, 6), fmt_float(row.rot_err, 6)]
        yield values


def write_trace_csv(path: PathLike, trace: RefineTrace):
    header = TRACE_CSV_HEADER + (TRACE_ERROR_COLUMNS if trace.has_errors else ())
    return write_csv(path, header, trace_csv_rows(trace))


def refine_summary_rows(scored: Sequence[ScoredQuery], traces: Sequence[RefineTrace]):
    by_id = {t.id: t for t in traces}
    for s in scored:
        trace = by_id.get(s.id)
        if trace is None:
            continue
        first, last = trace.rows[0], trace.rows[-1]
        yield (
            s.id,
            fmt_float(s.score.value, 6),
            int(s.reliable),
            trace.steps_used,
            fmt_float(first.trans_err, 6),
            fmt_float(first.rot_err, 6),
            fmt_float(last.trans_err, 6),
            fmt_float(last.rot_err, 6),
        )


def write_refine_summary_csv(path: PathLike, scored: Sequence[ScoredQuery], traces: Sequence[RefineTrace]):
    """Write `id,score,reliable,steps_used,pre_terr,pre_rerr,post_terr,post_rerr`"""
    return write_csv(path, SUMMARY_CSV_HEADER, refine_summary_rows(scored, traces))
