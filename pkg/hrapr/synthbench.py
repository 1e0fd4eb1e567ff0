"""
Deterministic synthetic scenes with a mock pose regressor.

The scene feature of a pose is a random-Fourier-feature field,

    field(p)_i = sin(omega_i . z(p) + phi_i),   z(p) = (t, canonical q)

so nearby viewpoints have similar features and the field has closed-form
derivatives. Training poses follow a trajectory through random waypoints.
Test queries are split into `near` (close to some training pose) and `far`
(well away from every training position). The mock regressor perturbs the
ground truth with noise that grows with the distance to the training set.
"""

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from hrapr.exceptions import GenerationError
from hrapr.feature_store import (
    STORAGE_DTYPE,
    FeatureEmbedding,
    PoseFeatureDB,
    build_database,
    save_db,
)
from hrapr.geometry import (
    Pose,
    canonicalize_quaternion,
    random_unit_vector,
    rotate_by,
    slerp,
    stack_translations,
)
from hrapr.replay import QueryRecord, save_queries
from utils.report_writer import PathLike

logger = logging.getLogger(__name__)

NEAR = "near"
FAR = "far"

# Far queries sit at least this factor beyond the near thresholds
FAR_CLEARANCE = 1.1
FAR_ANGLE_MAX_FACTOR = 3.0
# Near offsets are clipped inside the near thresholds
NEAR_CLIP = 0.9


@dataclass(frozen=True)
class SceneSpec:
    """Everything a synthetic scene is generated from"""

    seed: int = 42
    dim: int = 1024
    num_train: int = 2000
    num_test_near: int = 1000
    num_test_far: int = 1000
    extent: float = 4.0
    num_waypoints: int = 8
    max_yaw_deg: float = 60.0
    max_tilt_deg: float = 15.0
    near_radius: float = 2.0
    near_angle: float = 10.0
    near_offset_scale: float = 0.08
    near_angle_scale: float = 2.0
    far_margin: float = 6.0
    freq_scale: float = 4.0
    feature_noise: float = 0.05
    apr_trans_floor: float = 0.002
    apr_trans_gain: float = 0.06
    apr_rot_floor: float = 0.05
    apr_rot_gain: float = 2.5
    max_far_attempts: int = 200

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise GenerationError("Invalid scene spec: " + "; ".join(errors))

    def validate(self) -> List[str]:
        errors = []
        for name in ("num_train", "num_test_near", "num_test_far"):
            if getattr(self, name) < 0:
                errors.append(f"{name} must be >= 0")
        if self.dim <= 0:
            errors.append("dim must be > 0")
        if self.num_waypoints < 2:
            errors.append("num_waypoints must be >= 2")
        if self.max_far_attempts < 1:
            errors.append("max_far_attempts must be >= 1")
        for name in ("extent", "near_radius", "near_angle"):
            if not getattr(self, name) > 0:
                errors.append(f"{name} must be > 0")
        for name in ("freq_scale", "feature_noise", "near_offset_scale", "near_angle_scale", "far_margin",
                     "apr_trans_floor", "apr_trans_gain", "apr_rot_floor", "apr_rot_gain",
                     "max_yaw_deg", "max_tilt_deg"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                errors.append(f"{name} must be finite and >= 0")
        return errors

    @property
    def num_queries(self) -> int:
        return self.num_test_near + self.num_test_far

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def with_overrides(self, **overrides) -> "SceneSpec":
        """Copy with some fields replaced; unknown names raise GenerationError"""
        known = {f.name: f.type for f in dataclasses.fields(self)}
        unknown = sorted(set(overrides) - set(known))
        if unknown:
            raise GenerationError(f"Unknown scene spec fields: {unknown}")
        coerced = {}
        for name, value in overrides.items():
            default = getattr(self, name)
            coerced[name] = type(default)(value)
        return dataclasses.replace(self, **coerced)


@dataclass(frozen=True, eq=False)
class SyntheticField:
    """Frequencies omega (dim, 7) and phases phi (dim,)"""

    omega: np.ndarray
    phase: np.ndarray

    def __post_init__(self):
        self.omega.setflags(write=False)
        self.phase.setflags(write=False)

    @property
    def dim(self) -> int:
        return int(self.phase.shape[0])


@dataclass(frozen=True)
class SynthQuery:
    id: str
    gt: Pose
    predicted: Pose
    embedding: FeatureEmbedding
    label: str
    dist_to_train: float


@dataclass(frozen=True)
class SynthScene:
    spec: SceneSpec
    field: SyntheticField
    train: Tuple[Tuple[str, Pose, FeatureEmbedding], ...]
    queries: Tuple[SynthQuery, ...]

    @property
    def dim(self) -> int:
        return self.field.dim


FieldSource = Union[SynthScene, SyntheticField]


def _field_of(source: FieldSource) -> SyntheticField:
    return source.field if isinstance(source, SynthScene) else source


def pose_vector(p: Pose) -> np.ndarray:
    """The 7-vector z(p) = (t, q) the field is evaluated at"""
    return np.concatenate((p.t, canonicalize_quaternion(p.q)))


def field_values(source: FieldSource, z: np.ndarray) -> np.ndarray:
    """Field at one (7,) or many (n, 7) pose vectors"""
    field = _field_of(source)
    return np.sin(np.asarray(z, dtype=np.float64) @ field.omega.T + field.phase)


def feature_field(source: FieldSource, p: Pose) -> FeatureEmbedding:
    """Noise-free float64 embedding of pose p"""
    return FeatureEmbedding.from_vector(field_values(source, pose_vector(p)))


def feature_field_jacobian(source: FieldSource, p: Pose) -> np.ndarray:
    """d field / d z at p, shape (dim, 7)"""
    field = _field_of(source)
    z = pose_vector(p)
    return np.cos(field.omega @ z + field.phase)[:, None] * field.omega


def _draw_field(rng: np.random.Generator, spec: SceneSpec) -> SyntheticField:
    omega = rng.normal(0.0, spec.freq_scale, size=(spec.dim, 7))
    phase = rng.uniform(0.0, 2.0 * math.pi, size=spec.dim)
    return SyntheticField(omega=omega, phase=phase)


def load_field(spec: SceneSpec) -> SyntheticField:
    """Regenerate only the field of the scene described by spec"""
    return _draw_field(np.random.default_rng(spec.seed), spec)


def _waypoints(rng: np.random.Generator, spec: SceneSpec) -> List[Pose]:
    half = 0.5 * spec.extent
    positions = rng.uniform(-half, half, size=(spec.num_waypoints, 3))
    yaw = rng.uniform(-spec.max_yaw_deg, spec.max_yaw_deg, size=spec.num_waypoints)
    tilt = rng.uniform(-spec.max_tilt_deg, spec.max_tilt_deg, size=(spec.num_waypoints, 2))
    angles = np.column_stack((yaw, tilt))
    # scipy returns (x, y, z, w)
    xyzw = Rotation.from_euler("zyx", angles, degrees=True).as_quat()
    quats = np.column_stack((xyzw[:, 3], xyzw[:, :3]))
    return [Pose(t=positions[i], q=quats[i]) for i in range(spec.num_waypoints)]


def _trajectory(waypoints: Sequence[Pose], count: int) -> List[Pose]:
    """count poses evenly spaced in the waypoint parameter"""
    if count == 0:
        return []
    if count == 1:
        return [waypoints[0]]
    segments = len(waypoints) - 1
    poses = []
    for s in np.linspace(0.0, float(segments), count):
        k = min(int(math.floor(s)), segments - 1)
        poses.append(slerp(waypoints[k], waypoints[k + 1], min(max(s - k, 0.0), 1.0)))
    return poses


def _rotation_towards(rng: np.random.Generator, pose: Pose, angle_deg: float, translation=None) -> Pose:
    moved = pose if translation is None else Pose(t=translation, q=pose.q)
    return rotate_by(moved, random_unit_vector(rng), math.radians(angle_deg))


def _near_query(rng: np.random.Generator, spec: SceneSpec, train_poses: Sequence[Pose]) -> Pose:
    anchor = train_poses[int(rng.integers(len(train_poses)))]
    offset = rng.normal(0.0, spec.near_offset_scale, size=3)
    limit = NEAR_CLIP * spec.near_radius
    norm = float(np.linalg.norm(offset))
    if norm > limit:
        offset *= limit / norm
    angle = min(abs(float(rng.normal(0.0, spec.near_angle_scale))), NEAR_CLIP * spec.near_angle)
    return _rotation_towards(rng, anchor, angle, anchor.t + offset)


def _far_query(rng: np.random.Generator, spec: SceneSpec, train_poses: Sequence[Pose], tree: cKDTree,
               lower: np.ndarray, upper: np.ndarray) -> Pose:
    clearance = FAR_CLEARANCE * spec.near_radius
    for _ in range(spec.max_far_attempts):
        position = rng.uniform(lower, upper)
        dist, nearest = tree.query(position)
        if dist > clearance:
            angle = rng.uniform(FAR_CLEARANCE * spec.near_angle, FAR_ANGLE_MAX_FACTOR * spec.near_angle)
            return _rotation_towards(rng, train_poses[int(nearest)], angle, position)
    raise GenerationError(
        f"Could not place a far query after {spec.max_far_attempts} attempts; increase far_margin"
    )


def _mock_prediction(rng: np.random.Generator, spec: SceneSpec, gt: Pose, dist: float) -> Pose:
    trans_std = spec.apr_trans_floor + spec.apr_trans_gain * dist
    rot_std = spec.apr_rot_floor + spec.apr_rot_gain * dist
    t = gt.t + rng.normal(0.0, trans_std, size=3)
    angle = abs(float(rng.normal(0.0, rot_std)))
    return _rotation_towards(rng, gt, angle, t)


def _noisy_embedding(rng: np.random.Generator, spec: SceneSpec, field: SyntheticField, gt: Pose) -> FeatureEmbedding:
    clean = field_values(field, pose_vector(gt))
    noisy = clean + rng.normal(0.0, spec.feature_noise, size=clean.shape[0])
    return FeatureEmbedding.from_vector(noisy, dtype=STORAGE_DTYPE)


def generate_scene(spec: Optional[SceneSpec] = None) -> SynthScene:
    """
    Generate the scene described by spec.

    The same spec always yields a bit-identical scene.

    Raises:
        GenerationError: If the spec cannot be realized
    """
    spec = spec or SceneSpec()
    if spec.num_queries and spec.num_train == 0:
        raise GenerationError("Queries need at least one training pose")
    if spec.num_test_far and spec.far_margin <= FAR_CLEARANCE * spec.near_radius:
        raise GenerationError(
            f"far_margin ({spec.far_margin} m) must exceed {FAR_CLEARANCE} x near_radius "
            f"({FAR_CLEARANCE * spec.near_radius:g} m) to place far queries"
        )

    rng = np.random.default_rng(spec.seed)
    # Field first so load_field() reproduces it from the seed alone
    field = _draw_field(rng, spec)

    waypoints = _waypoints(rng, spec)
    train_poses = _trajectory(waypoints, spec.num_train)
    train_vectors = field_values(field, np.array([pose_vector(p) for p in train_poses])) if train_poses else []
    train = tuple(
        (f"train-{i:05d}", pose, FeatureEmbedding.from_vector(train_vectors[i], dtype=STORAGE_DTYPE))
        for i, pose in enumerate(train_poses)
    )

    queries = []
    if spec.num_queries:
        positions = stack_translations(train_poses)
        tree = cKDTree(positions)
        lower = positions.min(axis=0) - spec.far_margin
        upper = positions.max(axis=0) + spec.far_margin
        labelled = [(NEAR, i, _near_query(rng, spec, train_poses)) for i in range(spec.num_test_near)]
        labelled += [(FAR, i, _far_query(rng, spec, train_poses, tree, lower, upper)) for i in range(spec.num_test_far)]
        for label, i, gt in labelled:
            dist = float(tree.query(gt.t)[0])
            predicted = _mock_prediction(rng, spec, gt, dist)
            embedding = _noisy_embedding(rng, spec, field, gt)
            queries.append(SynthQuery(
                id=f"{label}-{i:05d}",
                gt=gt,
                predicted=predicted,
                embedding=embedding,
                label=label,
                dist_to_train=dist,
            ))

    logger.info(
        "Generated scene seed=%d: %d train, %d near, %d far, dim %d",
        spec.seed, len(train), spec.num_test_near, spec.num_test_far, spec.dim,
    )
    return SynthScene(spec=spec, field=field, train=train, queries=tuple(queries))


def query_records(scene: SynthScene) -> List[QueryRecord]:
    """Queries in the form score_batch and save_queries take"""
    return [QueryRecord(id=q.id, predicted=q.predicted, embedding=q.embedding, gt=q.gt, label=q.label)
            for q in scene.queries]


def scene_database(scene: SynthScene, cell_size=None) -> PoseFeatureDB:
    return build_database(list(scene.train), cell_size=cell_size, dim=scene.dim)


def export_scene(scene: SynthScene, stem: PathLike):
    """
    Write the training set as a database and the test set as a query file.

    Returns:
        Paths of `<stem>.poses`, `<stem>.feat`, `<stem>.queries`, `<stem>.qfeat`
    """
    poses_file, feat_file = save_db(scene_database(scene), stem)
    queries_file, qfeat_file = save_queries(stem, query_records(scene), dim=scene.dim)
    return poses_file, feat_file, queries_file, qfeat_file

