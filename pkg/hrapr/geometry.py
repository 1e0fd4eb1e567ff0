"""
Pose representation and quaternion algebra.

Quaternions are stored in (w, x, y, z) order and sign-canonicalized so that
w >= 0 (ties broken by the first nonzero vector component being >= 0).
Every Pose is an immutable value: its arrays are read-only.
"""

import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

import numpy as np

from hrapr.exceptions import InvalidQuaternionError

IDENTITY_QUATERNION = (1.0, 0.0, 0.0, 0.0)

# Pose constructors skip renormalisation inside this band so that values read
# back from text keep their exact bits.
_UNIT_TOLERANCE = 1e-12


def canonicalize_quaternion(q: np.ndarray) -> np.ndarray:
    """Flip the sign of q so that w >= 0, ties decided by (x, y, z)."""
    q = np.asarray(q, dtype=np.float64)
    if q[0] < 0.0:
        return -q
    if q[0] == 0.0:
        for component in q[1:]:
            if component != 0.0:
                return -q if component < 0.0 else q
    return q


def quat_normalize(q: Sequence[float]) -> np.ndarray:
    """
    Normalize a 4-vector to a canonical unit quaternion.

    Args:
        q: Quaternion in (w, x, y, z) order

    Returns:
        Unit quaternion with w >= 0

    Raises:
        InvalidQuaternionError: If q has zero or non-finite norm
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise InvalidQuaternionError(f"Quaternion must be a 4-element vector, got shape {q.shape}")
    norm = float(np.linalg.norm(q))
    if not math.isfinite(norm) or norm < 1e-12:
        raise InvalidQuaternionError(f"Cannot normalize quaternion with norm {norm}")
    return canonicalize_quaternion(q / norm)


def _as_unit_quaternion(q: Sequence[float]) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise InvalidQuaternionError(f"Quaternion must be a 4-element vector, got shape {q.shape}")
    norm = float(np.linalg.norm(q))
    if not math.isfinite(norm) or norm < 1e-12:
        raise InvalidQuaternionError(f"Cannot normalize quaternion with norm {norm}")
    if abs(norm - 1.0) > _UNIT_TOLERANCE:
        q = q / norm
    return canonicalize_quaternion(q)


def quat_multiply(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Hamilton product q1 * q2."""
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_from_axis_angle(axis: Sequence[float], angle: float) -> np.ndarray:
    """
    Create quaternion from axis-angle representation.

    Args:
        axis: 3D rotation axis (normalized here)
        angle: Rotation angle in radians

    Returns:
        Unit quaternion [w, x, y, z]
    """
    axis = np.asarray(axis, dtype=np.float64)
    axis_norm = np.linalg.norm(axis)
    if axis_norm < 1e-12:
        return np.array(IDENTITY_QUATERNION)
    axis = axis / axis_norm
    half = 0.5 * angle
    return np.concatenate(([math.cos(half)], math.sin(half) * axis))


def quat_from_rotvec(rotvec: Sequence[float]) -> np.ndarray:
    """Quaternion for a rotation vector (axis times angle, radians)."""
    rotvec = np.asarray(rotvec, dtype=np.float64)
    angle = float(np.linalg.norm(rotvec))
    if angle < 1e-12:
        q = np.concatenate(([1.0], 0.5 * rotvec))
        return q / np.linalg.norm(q)
    return quat_from_axis_angle(rotvec / angle, angle)


@dataclass(frozen=True, eq=False)
class Pose:
    """6-DoF pose: translation in meters and unit quaternion (w, x, y, z)."""

    t: np.ndarray
    q: np.ndarray = IDENTITY_QUATERNION

    def __post_init__(self):
        t = np.array(self.t, dtype=np.float64)
        if t.shape != (3,):
            raise ValueError(f"Translation must be a 3-element vector, got shape {t.shape}")
        if not np.all(np.isfinite(t)):
            raise ValueError(f"Translation must be finite, got {t.tolist()}")
        q = np.array(_as_unit_quaternion(self.q), dtype=np.float64)
        t.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "q", q)

    @classmethod
    def from_values(cls, values: Sequence[float]) -> "Pose":
        """Build from `tx ty tz qw qx qy qz`."""
        if len(values) != 7:
            raise ValueError(f"Pose needs 7 values, got {len(values)}")
        return cls(t=values[:3], q=values[3:])

    def to_values(self) -> Tuple[float, ...]:
        return tuple(float(v) for v in self.t) + tuple(float(v) for v in self.q)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.t, other.t) and np.array_equal(self.q, other.q)

    def __hash__(self):
        return hash(self.to_values())

    def __repr__(self):
        t = ", ".join(f"{v:.6g}" for v in self.t)
        q = ", ".join(f"{v:.6g}" for v in self.q)
        return f"Pose(t=({t}), q=({q}))"


@dataclass(frozen=True)
class PoseError:
    """Translation (meters) and rotation (degrees) error pair"""

    trans_m: float
    rot_deg: float

    def __post_init__(self):
        for name, value in (("trans_m", self.trans_m), ("rot_deg", self.rot_deg)):
            if not math.isfinite(value) or value < 0.0:
                raise ValueError(f"{name} must be finite and nonnegative, got {value}")

    def format(self, digits: int = 2) -> str:
        return f"{self.trans_m:.{digits}f}/{self.rot_deg:.{digits}f}"


def trans_error(pred: Pose, gt: Pose) -> float:
    """Euclidean distance between translations, in meters."""
    return float(np.linalg.norm(pred.t - gt.t))


def rot_error(pred: Pose, gt: Pose) -> float:
    """Geodesic angle between rotations, 2 * arccos(|<q_pred, q_gt>|), in degrees."""
    dot = abs(float(np.dot(pred.q, gt.q)))
    dot = min(dot, 1.0)
    return math.degrees(2.0 * math.acos(dot))


def pose_error(pred: Pose, gt: Pose) -> PoseError:
    return PoseError(trans_m=trans_error(pred, gt), rot_deg=rot_error(pred, gt))


def slerp(a: Pose, b: Pose, s: float) -> Pose:
    """
    Interpolate between two poses.

    Translation is interpolated linearly, rotation spherically along the
    shorter arc.

    Args:
        a: Pose at s = 0
        b: Pose at s = 1
        s: Fraction in [0, 1]

    Returns:
        Interpolated pose
    """
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"Interpolation fraction must lie in [0, 1], got {s}")
    if s == 0.0:
        return a
    if s == 1.0:
        return b

    t = (1.0 - s) * a.t + s * b.t
    q0 = a.q
    q1 = b.q
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if dot > 0.9995:
        q = (1.0 - s) * q0 + s * q1
        return Pose(t=t, q=q / np.linalg.norm(q))
    angle = math.acos(min(dot, 1.0))
    inv_sin = 1.0 / math.sin(angle)
    q = math.sin((1.0 - s) * angle) * inv_sin * q0 + math.sin(s * angle) * inv_sin * q1
    return Pose(t=t, q=q / np.linalg.norm(q))


def apply_increment(pose: Pose, dt: Sequence[float], dphi: Sequence[float]) -> Pose:
    """
    Move a pose by a translation step and a small body-frame rotation.

    The rotation vector dphi (radians) is right-multiplied into q and the
    result renormalized.
    """
    q = quat_multiply(pose.q, quat_from_rotvec(dphi))
    return Pose(t=pose.t + np.asarray(dt, dtype=np.float64), q=q / np.linalg.norm(q))


def random_unit_vector(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        return np.array([1.0, 0.0, 0.0])
    return v / norm


def random_quaternion(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed canonical unit quaternion."""
    while True:
        q = rng.normal(size=4)
        norm = np.linalg.norm(q)
        if norm > 1e-6:
            return canonicalize_quaternion(q / norm)


def rotate_by(pose: Pose, axis: Sequence[float], angle: float) -> Pose:
    """Rotate the orientation of pose by angle (radians) about a body-frame axis."""
    if angle == 0.0:
        return pose
    q = quat_multiply(pose.q, quat_from_axis_angle(axis, angle))
    return Pose(t=pose.t, q=q / np.linalg.norm(q))


def stack_translations(poses: Iterable[Pose]) -> np.ndarray:
    """(n, 3) array of translations; (0, 3) for no poses."""
    rows = [p.t for p in poses]
    if not rows:
        return np.zeros((0, 3), dtype=np.float64)
    return np.vstack(rows)
