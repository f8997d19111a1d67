"""Planar projective maps and the circular-track lane coordinate chain.

pixel --(homography)--> Cartesian --> polar (angle, radius)
      --> lane (arc length s, radius d) --> lane relative to an ego pose
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegeneratePointError, SingularityError, UnwrapAmbiguityError

_EPS = 1e-12


@dataclass(frozen=True)
class ProjectiveMap:
    H: np.ndarray

    def __post_init__(self):
        H = np.array(self.H, dtype=float).reshape(3, 3)
        if abs(np.linalg.det(H)) <= _EPS:
            raise SingularityError("projective map is not invertible")
        H.setflags(write=False)
        object.__setattr__(self, "H", H)

    @classmethod
    def from_row_major(cls, values) -> "ProjectiveMap":
        return cls(np.asarray(values, dtype=float).reshape(3, 3))

    def inverse(self) -> "ProjectiveMap":
        return ProjectiveMap(np.linalg.inv(self.H))


@dataclass(frozen=True)
class LaneFrame:
    center: tuple
    ref_radius: float

    def __post_init__(self):
        if not (np.isfinite(self.ref_radius) and self.ref_radius > 0):
            raise ValueError(f"ref_radius must be finite and positive, got {self.ref_radius}")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))


def project_points(pmap: ProjectiveMap, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    flat = pts.reshape(-1, 2)
    homog = np.hstack([flat, np.ones((len(flat), 1))]) @ pmap.H.T
    w = homog[:, 2]
    if np.any(np.abs(w) < _EPS):
        raise DegeneratePointError("point maps to the line at infinity")
    return (homog[:, :2] / w[:, None]).reshape(pts.shape)


def estimate_projective_map(src, dst) -> ProjectiveMap:
    """Least-squares homography from >= 4 point correspondences (normalised DLT)."""
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    if len(src) < 4 or len(src) != len(dst):
        raise ValueError("need at least 4 matching point pairs")

    def normaliser(p):
        c = p.mean(axis=0)
        scale = np.sqrt(2) / max(np.mean(np.linalg.norm(p - c, axis=1)), _EPS)
        return np.array([[scale, 0, -scale * c[0]], [0, scale, -scale * c[1]], [0, 0, 1]])

    Ts, Td = normaliser(src), normaliser(dst)
    s = np.hstack([src, np.ones((len(src), 1))]) @ Ts.T
    d = np.hstack([dst, np.ones((len(dst), 1))]) @ Td.T
    rows = []
    for (x, y, _), (u, v, _) in zip(s, d):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    return ProjectiveMap(H / H[2, 2])


def cartesian_to_polar(pts, frame: LaneFrame) -> np.ndarray:
    """Map (x, y) to (angle, radius) about the frame centre; angle in (-pi, pi]."""
    pts = np.asarray(pts, dtype=float)
    rel = pts - np.asarray(frame.center)
    radius = np.hypot(rel[..., 0], rel[..., 1])
    if np.any(radius < _EPS):
        raise SingularityError("point coincides with the lane frame centre")
    angle = np.arctan2(rel[..., 1], rel[..., 0])
    angle = np.where(angle <= -np.pi, angle + 2 * np.pi, angle)
    return np.stack([angle, radius], axis=-1)


def polar_to_cartesian(polar, frame: LaneFrame) -> np.ndarray:
    polar = np.asarray(polar, dtype=float)
    angle, radius = polar[..., 0], polar[..., 1]
    cx, cy = frame.center
    return np.stack([cx + radius * np.cos(angle), cy + radius * np.sin(angle)], axis=-1)


def unwrap_angles(angles, max_step: float = np.pi) -> np.ndarray:
    angles = np.asarray(angles, dtype=float)
    if len(angles) == 0:
        return angles.copy()
    step = np.diff(angles)
    wrapped = (step + np.pi) % (2 * np.pi) - np.pi
    if np.any(np.abs(wrapped) >= max_step - 1e-12):
        raise UnwrapAmbiguityError("consecutive angular step of half a turn or more")
    return np.concatenate([[angles[0]], angles[0] + np.cumsum(wrapped)])


def polar_to_lane(polar, frame: LaneFrame) -> np.ndarray:
    """Arc length along the reference circle and radius for a time-ordered track."""
    polar = np.asarray(polar, dtype=float).reshape(-1, 2)
    s = unwrap_angles(polar[:, 0]) * frame.ref_radius
    return np.stack([s, polar[:, 1]], axis=-1)


def lane_to_polar(lane, frame: LaneFrame) -> np.ndarray:
    lane = np.asarray(lane, dtype=float)
    return np.stack([lane[..., 0] / frame.ref_radius, lane[..., 1]], axis=-1)


def to_relative_lane(trajectories, reference) -> list[np.ndarray]:
    """Shift lane tracks so that the ego's reference (s, d) becomes the origin."""
    ref = np.asarray(reference, dtype=float).reshape(2)
    return [np.asarray(t, dtype=float) - ref for t in trajectories]


def align_branch(lane_track, ref_index: int, ego_s_ref: float, frame: LaneFrame) -> np.ndarray:
    """Shift a lane track by whole laps so that its arc length at ``ref_index``
    lies within half a lap of ``ego_s_ref``."""
    lap = 2 * np.pi * frame.ref_radius
    out = np.array(lane_track, dtype=float)
    offset = out[ref_index, 0] - ego_s_ref
    out[:, 0] -= lap * np.round(offset / lap)
    return out
