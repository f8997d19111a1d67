import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gatsbi.errors import DegeneratePointError, SingularityError, UnwrapAmbiguityError
from gatsbi.geometry import (
    LaneFrame,
    ProjectiveMap,
    align_branch,
    cartesian_to_polar,
    estimate_projective_map,
    lane_to_polar,
    polar_to_cartesian,
    polar_to_lane,
    project_points,
    to_relative_lane,
    unwrap_angles,
)

coords = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
point_sets = arrays(np.float64, st.tuples(st.integers(1, 20), st.just(2)), elements=coords)


def solve_homography_8x8(src, dst):
    """Oracle: exact H (h33 = 1) from four correspondences via the 8-equation system."""
    A, b = [], []
    for (x, y), (u, v) in zip(src, dst):
        A.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        b.append(u)
        A.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.append(v)
    h = np.linalg.solve(np.array(A), np.array(b))
    return np.append(h, 1.0).reshape(3, 3)


def apply_h(H, p):
    q = H @ np.array([p[0], p[1], 1.0])
    return q[:2] / q[2]


RANDOM_H = np.array([[1.2, 0.1, 3.0], [-0.2, 0.9, -1.0], [1e-3, 2e-3, 1.0]])


class TestProjective:
    def test_identity(self):
        pts = np.array([[1.5, -2.0], [100.0, 7.0]])
        np.testing.assert_array_equal(project_points(ProjectiveMap(np.eye(3)), pts), pts)

    def test_scale(self):
        pts = np.array([[1.5, -2.0], [3.0, 4.0]])
        H = np.diag([2.0, 2.0, 1.0])
        np.testing.assert_allclose(project_points(ProjectiveMap(H), pts), 2 * pts)

    def test_four_points_predict_fifth(self):
        src = np.array([[0, 0], [640, 0], [640, 480], [0, 480]], float)
        dst = np.array([apply_h(RANDOM_H, p) for p in src])
        oracle = solve_homography_8x8(src, dst)
        fitted = estimate_projective_map(src, dst)
        held_out = np.array([213.0, 97.0])
        expected = apply_h(oracle, held_out)
        np.testing.assert_allclose(project_points(fitted, held_out), expected, atol=1e-6)
        np.testing.assert_allclose(expected, apply_h(RANDOM_H, held_out), atol=1e-6)

    def test_least_squares_on_noisy_pairs(self):
        rng = np.random.default_rng(0)
        src = rng.uniform(0, 500, (30, 2))
        dst = np.array([apply_h(RANDOM_H, p) for p in src]) + rng.normal(0, 1e-3, (30, 2))
        fitted = estimate_projective_map(src, dst)
        probe = np.array([250.0, 250.0])
        np.testing.assert_allclose(project_points(fitted, probe), apply_h(RANDOM_H, probe), atol=1e-2)

    def test_singular(self):
        with pytest.raises(SingularityError):
            ProjectiveMap(np.zeros((3, 3)))

    def test_degenerate_point(self):
        H = np.array([[1.0, 0, 0], [0, 1.0, 0], [1.0, 0, 1.0]])
        with pytest.raises(DegeneratePointError):
            project_points(ProjectiveMap(H), [[-1.0, 3.0]])

    def test_row_major(self):
        pm = ProjectiveMap.from_row_major(list(range(1, 9)) + [10])
        assert pm.H[0, 1] == 2 and pm.H[1, 0] == 4

    @settings(max_examples=50, deadline=None)
    @given(point_sets)
    def test_inverse_roundtrip(self, pts):
        pm = ProjectiveMap(RANDOM_H)
        back = project_points(pm.inverse(), project_points(pm, pts))
        np.testing.assert_allclose(back, pts, atol=1e-9)


FRAME = LaneFrame((3.0, -2.0), 5.0)


class TestPolar:
    def test_axis_cases(self):
        np.testing.assert_allclose(cartesian_to_polar([[7.0, -2.0]], FRAME), [[0.0, 4.0]])
        np.testing.assert_allclose(cartesian_to_polar([[3.0, 2.0]], FRAME), [[np.pi / 2, 4.0]])

    def test_negative_axis_is_plus_pi(self):
        assert cartesian_to_polar([[-1.0, -2.0]], FRAME)[0, 0] == pytest.approx(np.pi)

    def test_center_raises(self):
        with pytest.raises(SingularityError):
            cartesian_to_polar([[3.0, -2.0]], FRAME)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-np.pi + 1e-6, np.pi), st.floats(0.1, 100))
    def test_polar_roundtrip(self, angle, radius):
        polar = np.array([[angle, radius]])
        back = cartesian_to_polar(polar_to_cartesian(polar, FRAME), FRAME)
        np.testing.assert_allclose(back, polar, atol=1e-12, rtol=0)

    @settings(max_examples=100, deadline=None)
    @given(point_sets)
    def test_cartesian_roundtrip(self, pts):
        pts = pts[np.hypot(pts[:, 0] - 3.0, pts[:, 1] + 2.0) > 1e-3]
        if len(pts) == 0:
            return
        back = polar_to_cartesian(cartesian_to_polar(pts, FRAME), FRAME)
        np.testing.assert_allclose(back, pts, atol=1e-12)


class TestLane:
    def circle(self, omega, radius, n=100, dt=0.04):
        t = np.arange(n) * dt
        return np.stack([3.0 + radius * np.cos(omega * t), -2.0 + radius * np.sin(omega * t)], axis=1), t

    def test_linear_growth(self):
        xy, t = self.circle(omega=0.8, radius=5.0)
        lane = polar_to_lane(cartesian_to_polar(xy, FRAME), FRAME)
        np.testing.assert_allclose(np.diff(lane[:, 0]) / 0.04, 0.8 * 5.0, rtol=1e-9)
        np.testing.assert_allclose(lane[:, 1], 5.0)

    def test_full_loop_matches_chord_sum(self):
        n = 2000
        xy, _ = self.circle(omega=2 * np.pi / (n * 0.04), radius=5.0, n=n + 1)
        lane = polar_to_lane(cartesian_to_polar(xy, FRAME), FRAME)
        chord_sum = np.linalg.norm(np.diff(xy, axis=0), axis=1).sum()
        advance = lane[-1, 0] - lane[0, 0]
        assert advance == pytest.approx(2 * np.pi * 5.0, rel=1e-9)
        assert advance == pytest.approx(chord_sum, rel=0.01)
        assert np.all(np.diff(lane[:, 0]) > 0)

    def test_stationary(self):
        lane = polar_to_lane(cartesian_to_polar(np.tile([[6.0, 1.0]], (10, 1)), FRAME), FRAME)
        assert np.ptp(lane[:, 0]) == 0 and np.ptp(lane[:, 1]) == 0

    def test_half_turn_step_is_ambiguous(self):
        with pytest.raises(UnwrapAmbiguityError):
            polar_to_lane([[0.0, 5.0], [np.pi, 5.0]], FRAME)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.integers(2, 30), elements=st.floats(-2.5, 2.5)), st.integers(-3, 3))
    def test_unwrap_invariant_to_full_turns(self, steps, turns):
        angles = np.cumsum(steps)
        a = polar_to_lane(np.c_[angles, np.full(len(angles), 5.0)], FRAME)
        b = polar_to_lane(np.c_[angles + 2 * np.pi * turns, np.full(len(angles), 5.0)], FRAME)
        np.testing.assert_allclose(np.diff(a[:, 0]), np.diff(b[:, 0]), atol=1e-9)

    def test_unwrap_empty(self):
        assert unwrap_angles([]).size == 0

    def test_lane_polar_roundtrip(self):
        lane = np.array([[12.0, 4.0], [-3.0, 6.0]])
        np.testing.assert_allclose(polar_to_lane(lane_to_polar(lane, FRAME), FRAME), lane)

    def test_align_branch(self):
        lap = 2 * np.pi * FRAME.ref_radius
        track = np.array([[lap + 1.0, 5.0], [lap + 1.5, 5.0]])
        out = align_branch(track, 1, ego_s_ref=0.0, frame=FRAME)
        np.testing.assert_allclose(out[:, 0], [1.0, 1.5])


class TestRelativeLane:
    def test_ego_and_neighbor(self):
        ego = np.array([[0.0, 5.0], [2.0, 5.0]])
        nb = np.array([[3.0, 6.0], [5.0, 6.0]])
        rel_ego, rel_nb = to_relative_lane([ego, nb], ego[1])
        np.testing.assert_array_equal(rel_ego[1], [0.0, 0.0])
        assert rel_nb[1, 0] == 3.0

    def test_zero_offset_idempotent(self):
        tracks = [np.array([[1.0, 2.0]]), np.array([[4.0, 5.0]])]
        once = to_relative_lane(tracks, [1.0, 2.0])
        twice = to_relative_lane(once, [0.0, 0.0])
        for a, b in zip(once, twice):
            np.testing.assert_array_equal(a, b)

    @settings(max_examples=50, deadline=None)
    @given(point_sets, point_sets, st.tuples(coords, coords))
    def test_pairwise_differences_preserved(self, a, b, ref):
        n = min(len(a), len(b))
        ra, rb = to_relative_lane([a[:n], b[:n]], ref)
        # exact up to one rounding per subtraction
        np.testing.assert_allclose(ra - rb, a[:n] - b[:n], atol=1e-12)
