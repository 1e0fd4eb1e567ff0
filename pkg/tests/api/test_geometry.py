"""
Pose, quaternion and error-metric tests.
"""

import math

import numpy as np
import pytest

from hrapr.exceptions import InvalidQuaternionError
from hrapr.geometry import (
    Pose,
    PoseError,
    apply_increment,
    quat_from_axis_angle,
    quat_normalize,
    random_quaternion,
    rot_error,
    slerp,
    trans_error,
)
from test_data.sample_records import pose_at


class TestQuaternions:
    """quat_normalize and Pose canonicalization"""

    @pytest.mark.smoke
    @pytest.mark.api
    @pytest.mark.parametrize("raw, expected", [
        ((2.0, 0.0, 0.0, 0.0), (1.0, 0.0, 0.0, 0.0)),
        ((-1.0, 0.0, 0.0, 0.0), (1.0, 0.0, 0.0, 0.0)),
        ((1.0, 1.0, 1.0, 1.0), (0.5, 0.5, 0.5, 0.5)),
    ])
    def test_normalize_examples(self, raw, expected):
        """Normalization scales to unit norm and flips to w >= 0"""
        result = quat_normalize(raw)
        assert np.allclose(result, expected, atol=1e-15), f"{raw} normalized to {result}"

    @pytest.mark.api
    def test_zero_quaternion_rejected(self):
        """A zero quaternion cannot be normalized"""
        with pytest.raises(InvalidQuaternionError):
            quat_normalize((0.0, 0.0, 0.0, 0.0))
        with pytest.raises(ValueError):
            Pose(t=(0, 0, 0), q=(0, 0, 0, 0))

    @pytest.mark.api
    def test_tie_broken_by_vector_part(self):
        """With w = 0 the first nonzero vector component becomes positive"""
        pose = Pose(t=(0, 0, 0), q=(0.0, 0.0, -1.0, 0.0))
        assert pose.q.tolist() == [0.0, 0.0, 1.0, 0.0], f"Got {pose.q}"

    @pytest.mark.regression
    @pytest.mark.api
    def test_double_cover_on_random_quaternions(self):
        """q and -q give the same Pose and zero rotation error on 10k random quaternions"""
        rng = np.random.default_rng(7)
        for _ in range(10_000):
            q = rng.normal(size=4)
            a = Pose(t=(0, 0, 0), q=q)
            b = Pose(t=(0, 0, 0), q=-q)
            assert np.allclose(a.q, b.q, atol=1e-15), f"Sign flip changed the stored quaternion for {q}"
            assert rot_error(a, b) < 1e-5
            assert abs(np.linalg.norm(a.q) - 1.0) < 1e-9
            assert a.q[0] >= 0.0

    @pytest.mark.api
    def test_pose_is_immutable(self):
        """Pose arrays are read-only"""
        pose = pose_at(1.0)
        with pytest.raises(ValueError):
            pose.t[0] = 5.0

    @pytest.mark.api
    def test_text_values_round_trip(self):
        """from_values(to_values(p)) reproduces p exactly"""
        rng = np.random.default_rng(3)
        pose = Pose(t=rng.normal(size=3), q=random_quaternion(rng))
        assert Pose.from_values(pose.to_values()) == pose


class TestErrorMetrics:
    """trans_error and rot_error"""

    @pytest.mark.smoke
    @pytest.mark.api
    @pytest.mark.parametrize("t, expected", [((0, 0, 0), 0.0), ((1, 0, 0), 1.0), ((0.3, 0.4, 0), 0.5)])
    def test_trans_error_examples(self, t, expected):
        """Euclidean distance between translations"""
        assert trans_error(Pose(t=t), Pose(t=(0, 0, 0))) == pytest.approx(expected, abs=1e-15)

    @pytest.mark.api
    def test_trans_error_symmetric(self):
        """trans_error(a, b) == trans_error(b, a) exactly"""
        a, b = Pose(t=(0.1, 2.0, -3.0)), Pose(t=(4.0, -0.5, 0.25))
        assert trans_error(a, b) == trans_error(b, a)

    @pytest.mark.smoke
    @pytest.mark.api
    def test_rot_error_quarter_turn(self):
        """Identity against 90 degrees about z is 90 degrees"""
        gt = Pose(t=(0, 0, 0), q=(math.sqrt(2) / 2, 0, 0, math.sqrt(2) / 2))
        assert rot_error(Pose(t=(0, 0, 0)), gt) == pytest.approx(90.0, abs=1e-9)

    @pytest.mark.api
    def test_rot_error_identity_and_half_turn(self):
        """Same rotation gives 0, opposite-axis half turn gives 180"""
        pose = pose_at(0.0, yaw_deg=30.0)
        assert rot_error(pose, pose) == 0.0
        assert rot_error(Pose(t=(0, 0, 0)), Pose(t=(0, 0, 0), q=(0, 1, 0, 0))) == pytest.approx(180.0)

    @pytest.mark.regression
    @pytest.mark.api
    def test_rot_error_symmetry_and_triangle_inequality(self):
        """rot_error is symmetric and obeys the triangle inequality on random triples"""
        rng = np.random.default_rng(11)
        for _ in range(500):
            a, b, c = (Pose(t=(0, 0, 0), q=random_quaternion(rng)) for _ in range(3))
            assert rot_error(a, b) == pytest.approx(rot_error(b, a), abs=1e-9)
            assert rot_error(a, c) <= rot_error(a, b) + rot_error(b, c) + 1e-6
            assert 0.0 <= rot_error(a, b) <= 180.0

    @pytest.mark.api
    def test_pose_error_validation(self):
        """PoseError rejects negative or non-finite components"""
        with pytest.raises(ValueError):
            PoseError(trans_m=-1.0, rot_deg=0.0)
        with pytest.raises(ValueError):
            PoseError(trans_m=0.0, rot_deg=math.nan)
        assert PoseError(0.5, 3.0).format(2) == "0.50/3.00"


class TestInterpolation:
    """slerp and small-angle increments"""

    @pytest.mark.smoke
    @pytest.mark.api
    def test_slerp_endpoints(self):
        """s = 0 gives a and s = 1 gives b"""
        a, b = pose_at(0.0), pose_at(2.0, 1.0, yaw_deg=80.0)
        assert slerp(a, b, 0.0) == a
        assert slerp(a, b, 1.0) == b

    @pytest.mark.api
    def test_slerp_half_way(self):
        """Identity to 90 degrees about z at s = 0.5 is 45 degrees about z"""
        a = Pose(t=(0, 0, 0))
        b = Pose(t=(2, 0, 0), q=(math.sqrt(2) / 2, 0, 0, math.sqrt(2) / 2))
        mid = slerp(a, b, 0.5)
        expected = Pose(t=(1, 0, 0), q=quat_from_axis_angle((0, 0, 1), math.radians(45.0)))
        assert rot_error(mid, expected) < 1e-6
        assert trans_error(mid, expected) == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.api
    def test_slerp_takes_shorter_arc(self):
        """Yaw 170 to yaw 190 passes through 180, not through 0"""
        a = pose_at(0.0, yaw_deg=170.0)
        b = pose_at(0.0, yaw_deg=190.0)
        assert float(np.dot(a.q, b.q)) < 0.0, "Canonical quaternions should lie in opposite hemispheres"
        assert rot_error(slerp(a, b, 0.5), pose_at(0.0, yaw_deg=180.0)) < 1e-6

    @pytest.mark.api
    def test_slerp_fraction_out_of_range(self):
        """Fractions outside [0, 1] are rejected"""
        with pytest.raises(ValueError):
            slerp(pose_at(0.0), pose_at(1.0), 1.5)

    @pytest.mark.api
    def test_apply_increment(self):
        """Translation adds, rotation vector rotates about the body axis"""
        pose = pose_at(1.0)
        moved = apply_increment(pose, (0.5, 0.0, 0.0), (0.0, 0.0, math.radians(10.0)))
        assert trans_error(moved, pose_at(1.5)) == pytest.approx(0.0, abs=1e-15)
        assert rot_error(moved, pose) == pytest.approx(10.0, abs=1e-9)
        assert abs(np.linalg.norm(moved.q) - 1.0) < 1e-12
