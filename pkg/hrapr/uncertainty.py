"""
Retrieval-based uncertainty scoring and step scheduling.

A prediction is scored by retrieving every training entry within d_th of the
predicted position and taking the highest cosine similarity between the
query embedding and the retrieved embeddings. An empty retrieval scores 0.
Scores above gamma are reliable and get the small (hs) step budget, the rest
get the large (ls) budget, or are dropped in filter mode.
"""

import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from hrapr.exceptions import DegenerateEmbeddingError, DimensionMismatchError, HRAPRError
from hrapr.feature_store import FeatureEmbedding, PoseFeatureDB
from hrapr.geometry import Pose
from utils.report_writer import PathLike, fmt_float, write_csv

logger = logging.getLogger(__name__)

SCORED_CSV_HEADER = ("id", "score", "retrieved", "reliable", "steps", "best_match")


class GatingMode(str, enum.Enum):
    REFINE = "refine"
    FILTER = "filter"


@dataclass(frozen=True)
class SimilarityScore:
    """Max cosine over retrieved entries; 0 with no retrieval"""

    value: float
    retrieved_count: int
    best_match_id: Optional[str] = None

    def __post_init__(self):
        if self.retrieved_count == 0 and (self.value != 0.0 or self.best_match_id is not None):
            raise ValueError("An empty retrieval must score 0 with no best match")


@dataclass(frozen=True)
class GatingPolicy:
    """Reliability threshold and per-class step budgets"""

    gamma: float = 0.95
    hs_steps: int = 10
    ls_steps: int = 50
    mode: GatingMode = GatingMode.REFINE

    def __post_init__(self):
        object.__setattr__(self, "mode", GatingMode(self.mode))
        if self.hs_steps < 0 or self.ls_steps < 0:
            raise ValueError(f"Step budgets must be nonnegative, got hs={self.hs_steps} ls={self.ls_steps}")
        if self.mode is GatingMode.REFINE and self.hs_steps > self.ls_steps:
            raise ValueError(f"hs_steps ({self.hs_steps}) must not exceed ls_steps ({self.ls_steps})")

    @property
    def label(self) -> str:
        if self.mode is GatingMode.FILTER:
            return f"filter(gamma={self.gamma})"
        return f"hs{self.hs_steps}_ls{self.ls_steps}(gamma={self.gamma})"


@dataclass(frozen=True)
class ScoredQuery:
    id: str
    predicted: Pose
    score: SimilarityScore
    reliable: bool
    steps: int
    gt: Optional[Pose] = None
    dropped: bool = False


@dataclass(frozen=True)
class QueryFailure:
    """A query that could not be processed in a lenient batch"""

    id: str
    message: str


class BatchError(HRAPRError):
    """Strict-mode batch aborted on a query"""

    def __init__(self, query_id: str, cause: Exception):
        self.query_id = query_id
        self.cause = cause
        super().__init__(f"query {query_id!r}: {cause}")


def _check_embedding(embedding: FeatureEmbedding, role: str):
    if embedding.cached_norm <= 0.0:
        raise DegenerateEmbeddingError(f"{role} embedding has zero norm")


def cosine_similarity(a: FeatureEmbedding, b: FeatureEmbedding) -> float:
    """
    Cosine of the angle between two embeddings.

    Raises:
        DimensionMismatchError: If the dims differ
        DegenerateEmbeddingError: If either norm is zero
    """
    if a.dim != b.dim:
        raise DimensionMismatchError(f"Cannot compare embeddings of dim {a.dim} and {b.dim}")
    _check_embedding(a, "first")
    _check_embedding(b, "second")
    value = float(np.dot(a.as_float64(), b.as_float64())) / (a.cached_norm * b.cached_norm)
    return min(1.0, max(-1.0, value))


def _cosines(db: PoseFeatureDB, indices: np.ndarray, f_q: FeatureEmbedding) -> np.ndarray:
    norms = db.norms[indices]
    if np.any(norms <= 0.0):
        raise DegenerateEmbeddingError("retrieved database embedding has zero norm")
    rows = db.embedding_matrix[indices].astype(np.float64)
    values = (rows @ f_q.as_float64()) / (norms * f_q.cached_norm)
    return np.clip(values, -1.0, 1.0)


def similarity_score(db: PoseFeatureDB, f_q: FeatureEmbedding, p_hat: Pose, d_th: float) -> SimilarityScore:
    """
    Score a prediction against the training entries around its position.

    Args:
        db: Training database
        f_q: Query embedding
        p_hat: Predicted pose; only its translation drives retrieval
        d_th: Retrieval radius in meters

    Returns:
        SimilarityScore; value 0 and count 0 when nothing lies within d_th
    """
    if f_q.dim != db.dim:
        raise DimensionMismatchError(f"Query embedding has dim {f_q.dim}, database has dim {db.dim}")
    _check_embedding(f_q, "query")
    indices = db.retrieve_indices(p_hat.t, d_th)
    if indices.size == 0:
        return SimilarityScore(value=0.0, retrieved_count=0, best_match_id=None)
    cosines = _cosines(db, indices, f_q)
    # argmax keeps the first maximum, i.e. the nearest entry among ties
    best = int(np.argmax(cosines))
    return SimilarityScore(
        value=float(cosines[best]),
        retrieved_count=int(indices.size),
        best_match_id=db.entries[int(indices[best])].id,
    )


def classify_and_schedule(score: SimilarityScore, policy: GatingPolicy) -> Tuple[bool, int]:
    """
    Reliability (score > gamma, strict) and the step budget it earns.

    Filter mode assigns no refinement steps.
    """
    reliable = score.value > policy.gamma
    if policy.mode is GatingMode.FILTER:
        return reliable, 0
    return reliable, policy.hs_steps if reliable else policy.ls_steps


def score_query(db: PoseFeatureDB, query, policy: GatingPolicy, d_th: float) -> ScoredQuery:
    qid, predicted, embedding, gt = tuple(query)[:4]
    score = similarity_score(db, embedding, predicted, d_th)
    reliable, steps = classify_and_schedule(score, policy)
    return ScoredQuery(
        id=qid,
        predicted=predicted,
        score=score,
        reliable=reliable,
        steps=steps,
        gt=gt,
        dropped=policy.mode is GatingMode.FILTER and not reliable,
    )


def score_batch_detailed(db: PoseFeatureDB, queries: Sequence, policy: GatingPolicy, d_th: float,
                         strict: bool = False, threads: int = 1) -> Tuple[List[ScoredQuery], List[QueryFailure]]:
    """
    Score many queries, keeping input order.

    Args:
        db: Training database
        queries: (id, predicted, embedding, gt) tuples or QueryRecords
        policy: Gating policy
        d_th: Retrieval radius in meters
        strict: Raise BatchError on the first failing query
        threads: Worker threads

    Returns:
        (scored queries, failures) - failed queries are absent from the first list
    """
    def run(query):
        try:
            return score_query(db, query, policy, d_th)
        except (HRAPRError, ValueError) as e:
            return QueryFailure(id=str(tuple(query)[0]), message=str(e))

    if threads > 1 and len(queries) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, queries))
    else:
        results = [run(q) for q in queries]

    scored, failures = [], []
    for result in results:
        if isinstance(result, QueryFailure):
            if strict:
                raise BatchError(result.id, ValueError(result.message))
            logger.warning("Scoring failed for query %s: %s", result.id, result.message)
            failures.append(result)
        else:
            scored.append(result)
    return scored, failures


def score_batch(db: PoseFeatureDB, queries: Sequence, policy: GatingPolicy, d_th: float,
                strict: bool = False, threads: int = 1) -> List[ScoredQuery]:
    """Score a batch; see score_batch_detailed for the failure list"""
    scored, _ = score_batch_detailed(db, queries, policy, d_th, strict=strict, threads=threads)
    return scored


def reliable_fraction(scored: Sequence[ScoredQuery]) -> float:
    if not scored:
        return 0.0
    return sum(1 for s in scored if s.reliable) / len(scored)


def scored_csv_rows(scored: Sequence[ScoredQuery]):
    for s in scored:
        yield (
            s.id,
            fmt_float(s.score.value, 6),
            s.score.retrieved_count,
            int(s.reliable),
            s.steps,
            s.score.best_match_id or "",
        )


def write_scored_csv(path: PathLike, scored: Sequence[ScoredQuery]):
    """Write `id,score,retrieved,reliable,steps,best_match`"""
    return write_csv(path, SCORED_CSV_HEADER, scored_csv_rows(scored))
