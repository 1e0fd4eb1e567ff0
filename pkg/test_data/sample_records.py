"""
Builders for records, queries and scored results used across the test-suite.
"""

import math
from typing import List, Optional, Sequence, Tuple

import numpy as np

from hrapr.evalharness import SceneStats
from hrapr.feature_store import STORAGE_DTYPE, FeatureEmbedding
from hrapr.geometry import Pose, quat_from_axis_angle, quat_multiply
from hrapr.replay import QueryRecord
from hrapr.uncertainty import ScoredQuery, SimilarityScore

# Published test-set sizes and reliable fractions of two benchmark suites
INDOOR_SCENES = [
    SceneStats("chess", 2000, 0.75),
    SceneStats("fire", 2000, 0.21),
    SceneStats("heads", 1000, 0.44),
    SceneStats("office", 4000, 0.31),
    SceneStats("pumpkin", 2000, 0.28),
    SceneStats("kitchen", 5000, 0.30),
    SceneStats("stairs", 1000, 0.14),
]
OUTDOOR_SCENES = [
    SceneStats("kings_college", 343, 0.55),
    SceneStats("old_hospital", 182, 0.13),
    SceneStats("shop_facade", 103, 0.16),
    SceneStats("st_marys_church", 530, 0.40),
]


def pose_at(x: float, y: float = 0.0, z: float = 0.0, yaw_deg: float = 0.0) -> Pose:
    """Pose at (x, y, z) rotated yaw_deg about the z axis"""
    return Pose(t=(x, y, z), q=quat_from_axis_angle((0.0, 0.0, 1.0), math.radians(yaw_deg)))


def basis_vector(dim: int, index: int, scale: float = 1.0) -> np.ndarray:
    v = np.zeros(dim)
    v[index] = scale
    return v


def embedding(values: Sequence[float]) -> FeatureEmbedding:
    return FeatureEmbedding.from_vector(values, dtype=STORAGE_DTYPE)


def line_records(count: int, dim: int = 8, spacing: float = 1.0) -> List[Tuple[str, Pose, np.ndarray]]:
    """Entries every `spacing` meters along x, entry i carrying basis vector i % dim"""
    return [(f"train-{i:05d}", pose_at(i * spacing), basis_vector(dim, i % dim)) for i in range(count)]


def random_records(rng: np.random.Generator, count: int, dim: int, extent: float = 10.0):
    positions = rng.uniform(-0.5 * extent, 0.5 * extent, size=(count, 3))
    return [(f"train-{i:05d}", Pose(t=positions[i]), rng.normal(size=dim)) for i in range(count)]


def offset_pose(gt: Pose, trans_m: float, rot_deg: float) -> Pose:
    """gt moved trans_m along x and rotated rot_deg about z"""
    q = quat_multiply(gt.q, quat_from_axis_angle((0.0, 0.0, 1.0), math.radians(rot_deg)))
    return Pose(t=gt.t + np.array([trans_m, 0.0, 0.0]), q=q)


def scored_query(qid: str, score: float, trans_m: float = 0.0, rot_deg: float = 0.0, reliable: Optional[bool] = None,
                 steps: int = 0, gamma: float = 0.95, gt: Optional[Pose] = None) -> ScoredQuery:
    """A scored query whose prediction is off by (trans_m, rot_deg)"""
    gt = gt or pose_at(0.0)
    count = 1 if score != 0.0 else 0
    return ScoredQuery(
        id=qid,
        predicted=offset_pose(gt, trans_m, rot_deg),
        score=SimilarityScore(value=score, retrieved_count=count, best_match_id="train-00000" if count else None),
        reliable=score > gamma if reliable is None else reliable,
        steps=steps,
        gt=gt,
    )


def query_record(qid: str, predicted: Pose, values: Sequence[float], gt: Optional[Pose] = None,
                 label: str = "-") -> QueryRecord:
    return QueryRecord(id=qid, predicted=predicted, embedding=embedding(values), gt=gt, label=label)
