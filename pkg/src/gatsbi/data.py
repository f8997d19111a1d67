"""Trajectory containers, CSV ingestion, windowing, neighbourhoods and folds."""
from __future__ import annotations

import csv
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import DatasetConfig
from .errors import (
    ConfigurationError,
    NeighborLookupError,
    TrajectoryDataError,
    TrajectoryParseError,
)

CSV_COLUMNS = ("scene_id", "agent_id", "frame", "x", "y")


def _frozen(arr, dtype):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def agent_sort_key(agent_id):
    """Natural ordering: numeric ids compare as numbers, others lexically after."""
    text = str(agent_id)
    parts = re.split(r"(\d+)", text)
    return tuple((0, int(p), "") if p.isdigit() else (1, 0, p) for p in parts if p != "")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Positions of one agent at uniformly spaced frames.

    ``frames`` holds integer frame indices and ``xy`` the matching (n, 2)
    positions in meters.  ``segment`` numbers the pieces of an agent's track
    that was split at frame gaps.
    """

    agent_id: str
    frames: np.ndarray
    xy: np.ndarray
    dt: float
    segment: int = 0

    def __post_init__(self):
        frames = _frozen(self.frames, np.int64)
        xy = _frozen(self.xy, np.float64).reshape(-1, 2)
        if len(frames) != len(xy):
            raise TrajectoryDataError("frames and positions differ in length")
        if not np.all(np.isfinite(xy)):
            raise TrajectoryDataError(f"agent {self.agent_id}: non-finite coordinates")
        if len(frames) > 1 and np.any(np.diff(frames) <= 0):
            raise TrajectoryDataError(f"agent {self.agent_id}: frames not strictly increasing")
        if not self.dt > 0:
            raise TrajectoryDataError("dt must be positive")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "agent_id", str(self.agent_id))

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (self.agent_id, self.dt, self.segment) == (other.agent_id, other.dt, other.segment) and \
            np.array_equal(self.frames, other.frames) and np.array_equal(self.xy, other.xy)

    __hash__ = None

    def __len__(self):
        return len(self.frames)

    @property
    def first_frame(self) -> int:
        return int(self.frames[0])

    @property
    def last_frame(self) -> int:
        return int(self.frames[-1])

    def covers(self, frame: int) -> bool:
        return self.first_frame <= frame <= self.last_frame

    def index_of(self, frame: int) -> int:
        # frames are contiguous after gap splitting
        return int(frame - self.first_frame)

    def position_at(self, frame: int) -> np.ndarray:
        return self.xy[self.index_of(frame)]


@dataclass(frozen=True)
class Scene:
    scene_id: str
    trajectories: tuple
    fps: float
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "scene_id", str(self.scene_id))
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        seen = set()
        for traj in self.trajectories:
            key = (traj.agent_id, traj.segment)
            if key in seen:
                raise TrajectoryDataError(f"scene {self.scene_id}: duplicate track {key}")
            seen.add(key)

    @property
    def dt(self) -> float:
        return 1.0 / self.fps

    @property
    def agent_ids(self) -> list[str]:
        return sorted({t.agent_id for t in self.trajectories}, key=agent_sort_key)

    def track_at(self, agent_id: str, frame: int) -> Trajectory | None:
        for traj in self.trajectories:
            if traj.agent_id == agent_id and traj.covers(frame):
                return traj
        return None

    def present_at(self, frame: int) -> list[Trajectory]:
        return [t for t in self.trajectories if t.covers(frame)]


@dataclass(frozen=True)
class SampleWindow:
    """One training/evaluation unit.

    ``neighbor_histories`` is (n, t_obs + 1, 2) with n <= N_max; frames where
    a neighbour is absent are zero and cleared in ``neighbor_masks``.
    """

    scene_id: str
    ego_id: str
    ref_frame: int
    ego_history: np.ndarray
    ego_future: np.ndarray
    neighbor_ids: tuple
    neighbor_histories: np.ndarray
    neighbor_masks: np.ndarray
    t_obs: int
    t_pred: int
    dt: float

    @property
    def window_id(self) -> str:
        return f"{self.scene_id}:{self.ego_id}:{self.ref_frame}"


def _split_at_gaps(agent_id, frames, xy, dt):
    breaks = np.flatnonzero(np.diff(frames) != 1) + 1
    pieces = []
    for k, (f, p) in enumerate(zip(np.split(frames, breaks), np.split(xy, breaks))):
        pieces.append(Trajectory(agent_id, f, p, dt, segment=k))
    return pieces


def scenes_from_rows(rows: Iterable[tuple], fps: float = 25.0, metadata: dict | None = None) -> list[Scene]:
    """Group ``(scene_id, agent_id, frame, x, y)`` tuples into scenes.

    Rows of one agent must arrive in strictly increasing frame order.
    """
    dt = 1.0 / fps
    grouped: dict[str, dict[str, tuple[list, list]]] = {}
    for row in rows:
        scene_id, agent_id, frame, x, y = row
        agents = grouped.setdefault(str(scene_id), {})
        frames, pts = agents.setdefault(str(agent_id), ([], []))
        if frames and frame <= frames[-1]:
            raise TrajectoryDataError(
                f"scene {scene_id} agent {agent_id}: frame {frame} after {frames[-1]} (non-monotone)"
            )
        frames.append(frame)
        pts.append((x, y))
    scenes = []
    for scene_id, agents in grouped.items():
        trajs = []
        for agent_id in sorted(agents, key=agent_sort_key):
            frames, pts = agents[agent_id]
            trajs.extend(_split_at_gaps(agent_id, np.asarray(frames), np.asarray(pts, float), dt))
        meta = dict((metadata or {}).get(scene_id, {}))
        scenes.append(Scene(scene_id, trajs, fps, meta))
    return scenes


def load_trajectories(
    path: str | os.PathLike,
    schema: dict | None = None,
    fps: float = 25.0,
    delimiter: str = ",",
    columns: Sequence[str] | None = None,
) -> list[Scene]:
    """Read a delimited trajectory file into scenes.

    ``schema`` maps the canonical names ``scene_id, agent_id, frame, x, y``
    to column names in the file.  If the file has no header row pass the
    column names via ``columns``.  A file without a scene column becomes a
    single scene named after the file stem.  ``delimiter=None`` splits on
    runs of whitespace (the layout of the raw ETH/UCY text files).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    schema = dict(schema or {})
    names = {c: schema.get(c, c) for c in CSV_COLUMNS}

    with path.open(encoding="utf-8", newline="") as fh:
        if delimiter is None:
            reader = (line.split() for line in fh)
        else:
            reader = csv.reader(fh, delimiter=delimiter)
        line_no = 0
        if columns is None:
            header = next(reader, None)
            line_no = 1
            if header is None:
                return []
            header = [h.strip() for h in header]
        else:
            header = list(columns)
        index = {}
        for canon, col in names.items():
            if col in header:
                index[canon] = header.index(col)
            elif canon != "scene_id":
                raise TrajectoryParseError(f"missing column {col!r} (for {canon})", line=1)

        default_scene = path.stem

        def parse():
            nonlocal line_no
            for raw in reader:
                line_no += 1
                if not raw or all(not c.strip() for c in raw):
                    continue
                try:
                    scene = raw[index["scene_id"]].strip() if "scene_id" in index else default_scene
                    agent = raw[index["agent_id"]].strip()
                    frame_txt = raw[index["frame"]].strip()
                    frame_f = float(frame_txt)
                    if not frame_f.is_integer() or frame_f < 0:
                        raise ValueError(f"frame must be a non-negative integer, got {frame_txt!r}")
                    x = float(raw[index["x"]])
                    y = float(raw[index["y"]])
                except (ValueError, IndexError) as exc:
                    raise TrajectoryParseError(f"malformed row {raw!r}: {exc}", line=line_no) from None
                if not (math.isfinite(x) and math.isfinite(y)):
                    raise TrajectoryParseError(f"non-finite coordinate in row {raw!r}", line=line_no)
                yield scene, agent, int(frame_f), x, y

        return scenes_from_rows(parse(), fps=fps)


def write_trajectories(scenes: Sequence[Scene], path: str | os.PathLike) -> None:
    """Write scenes in the canonical ``scene_id,agent_id,frame,x,y`` layout."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for scene in scenes:
            for traj in scene.trajectories:
                for frame, (x, y) in zip(traj.frames, traj.xy):
                    writer.writerow([scene.scene_id, traj.agent_id, int(frame), repr(float(x)), repr(float(y))])


def select_neighborhood(scene: Scene, ego: str, ref_frame: int, cfg: DatasetConfig) -> list[str]:
    """Agents within ``neighbor_radius`` of the ego at ``ref_frame``, nearest first."""
    ego = str(ego)
    ego_track = scene.track_at(ego, ref_frame)
    if ego_track is None:
        raise NeighborLookupError(f"agent {ego} absent at frame {ref_frame} in scene {scene.scene_id}")
    p_ego = ego_track.position_at(ref_frame)
    found = []
    for traj in scene.present_at(ref_frame):
        if traj.agent_id == ego:
            continue
        dist = float(np.hypot(*(traj.position_at(ref_frame) - p_ego)))
        if dist <= cfg.neighbor_radius:
            found.append((dist, agent_sort_key(traj.agent_id), traj.agent_id))
    found.sort()
    return [agent for _, _, agent in found[: cfg.N_max]]


def _neighbor_slice(track: Trajectory, start: int, stop: int):
    """Positions and validity over frames [start, stop] of one neighbour track."""
    n = stop - start + 1
    xy = np.zeros((n, 2))
    mask = np.zeros(n, dtype=bool)
    lo = max(start, track.first_frame)
    hi = min(stop, track.last_frame)
    if lo <= hi:
        xy[lo - start: hi - start + 1] = track.xy[track.index_of(lo): track.index_of(hi) + 1]
        mask[lo - start: hi - start + 1] = True
    return xy, mask


def window_scenes(scenes: Sequence[Scene], cfg: DatasetConfig, t_pred: int | None = None) -> list[SampleWindow]:
    """Cut every trajectory into (history, future) windows.

    ``t_pred`` defaults to the first configured horizon.
    """
    t_pred = int(t_pred if t_pred is not None else cfg.horizons[0])
    t_obs = cfg.t_obs
    span = t_obs + 1 + t_pred
    windows = []
    for scene in scenes:
        for traj in scene.trajectories:
            for start in range(0, len(traj) - span + 1, cfg.stride):
                ref_idx = start + t_obs
                ref_frame = int(traj.frames[ref_idx])
                nb_ids = select_neighborhood(scene, traj.agent_id, ref_frame, cfg)
                hists, masks = [], []
                for nb in nb_ids:
                    xy, mask = _neighbor_slice(scene.track_at(nb, ref_frame), ref_frame - t_obs, ref_frame)
                    hists.append(xy)
                    masks.append(mask)
                windows.append(
                    SampleWindow(
                        scene_id=scene.scene_id,
                        ego_id=traj.agent_id,
                        ref_frame=ref_frame,
                        ego_history=_frozen(traj.xy[start: ref_idx + 1], np.float64),
                        ego_future=_frozen(traj.xy[ref_idx + 1: start + span], np.float64),
                        neighbor_ids=tuple(nb_ids),
                        neighbor_histories=_frozen(np.reshape(hists, (len(nb_ids), t_obs + 1, 2)), np.float64),
                        neighbor_masks=_frozen(np.reshape(masks, (len(nb_ids), t_obs + 1)), bool),
                        t_obs=t_obs,
                        t_pred=t_pred,
                        dt=traj.dt,
                    )
                )
    return windows


@dataclass(frozen=True)
class FoldAssignment:
    """Scene-grouped k-fold split of a window list."""

    k: int
    scene_fold: dict
    window_fold: np.ndarray

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.window_fold == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.window_fold != fold)

    def scenes_in(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.scene_fold.items() if f == fold)


def split_folds(windows: Sequence[SampleWindow], k: int, seed: int) -> FoldAssignment:
    if k < 2:
        raise ConfigurationError(f"need k >= 2 folds, got {k}")
    scene_ids = sorted({w.scene_id for w in windows}, key=agent_sort_key)
    if len(scene_ids) < k:
        raise ConfigurationError(f"{len(scene_ids)} scenes cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(scene_ids))
    scene_fold = {scene_ids[j]: int(pos % k) for pos, j in enumerate(order)}
    window_fold = np.array([scene_fold[w.scene_id] for w in windows], dtype=np.int64)
    return FoldAssignment(k, scene_fold, window_fold)
