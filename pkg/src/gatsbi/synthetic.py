"""Seeded circular-track scenes with following, accelerating and overtaking riders.

Agents are simulated in track coordinates (arc length ``s`` along the centre
line of radius ``radius`` and outward offset ``d``) and written out in
Cartesian meters.  Overtakers move out by ``pass_offset`` while a slower
rider is just ahead or alongside, then return to the home line.

Separation guarantee: after every step each pair of riders is either
laterally apart by at least ``lane_width`` or longitudinally apart by at
least ``1.05 * clearance``, so the Cartesian distance never drops below
``clearance`` (given ``lane_width >= clearance``).
"""
from __future__ import annotations

import math

import numpy as np

from .config import GeneratorConfig
from .data import Scene, Trajectory

BEHAVIORS = ("constant", "accelerating", "overtaker")
_GAP_FACTOR = 1.05


def _wrapped_ds(s_j, s_i, lap):
    """Signed arc distance from i to j in (-lap/2, lap/2]."""
    return (s_j - s_i + lap / 2) % lap - lap / 2


def _assign_behaviors(spec: GeneratorConfig, rng) -> list[str]:
    mix = {k: float(spec.behavior_mix.get(k, 0.0)) for k in BEHAVIORS}
    if sum(mix.values()) <= 0:
        mix = {"constant": 1.0, "accelerating": 0.0, "overtaker": 0.0}
    p = np.array([mix[k] for k in BEHAVIORS])
    return [BEHAVIORS[i] for i in rng.choice(3, size=spec.agents, p=p / p.sum())]


def _initial_positions(n, lap, min_gap, rng):
    if n * min_gap * 1.5 > lap:
        raise ValueError(f"{n} agents do not fit on a {lap:.1f} m track")
    slack = lap - n * min_gap * 1.5
    cuts = np.sort(rng.uniform(0, slack, size=n))
    offset = rng.uniform(0, lap)
    return (offset + cuts + np.arange(n) * min_gap * 1.5) % lap


def simulate_track(spec: GeneratorConfig, seed: int):
    """Run the track simulation.

    Returns ``(s, d, behaviors, events)`` where ``s`` and ``d`` have shape
    (frames, agents) and exclude warm-up frames.
    """
    rng = np.random.default_rng(seed)
    dt = 1.0 / spec.fps
    lap = 2 * np.pi * spec.radius
    n = spec.agents
    n_warm = int(round(spec.warmup * spec.fps))
    n_rec = int(round(spec.duration * spec.fps))
    v_lo, v_hi = spec.speed_limits
    min_long = _GAP_FACTOR * spec.clearance

    behaviors = _assign_behaviors(spec, rng)
    base_speed = rng.uniform(*spec.speed_range, size=n)
    accel = rng.uniform(*spec.accel_range, size=n) * rng.choice([-1.0, 1.0], size=n)
    for i, b in enumerate(behaviors):
        if b == "overtaker":
            base_speed[i] = min(base_speed[i] * spec.overtake_speedup, v_hi)
        if b != "accelerating":
            accel[i] = 0.0

    s = _initial_positions(n, lap, max(spec.follow_gap, min_long), rng)
    d = np.zeros(n)
    v = base_speed.copy()
    passing = np.zeros(n, dtype=bool)

    s_log = np.empty((n_rec, n))
    d_log = np.empty((n_rec, n))
    events = []
    prev_ds = None

    for step in range(n_warm + n_rec):
        t = step * dt
        for i in range(n):
            desired = float(np.clip(base_speed[i] + accel[i] * t, v_lo, v_hi))
            ds_all = _wrapped_ds(s, s[i], lap)

            if behaviors[i] == "overtaker":
                home_lane = np.abs(d) < spec.lane_width
                slower_near = [
                    j for j in range(n)
                    if j != i and home_lane[j] and -(spec.clearance + 2.0) < ds_all[j] < spec.trigger_gap
                    and (v[j] < desired - 0.1 or passing[i])
                ]
                target = spec.pass_offset if slower_near else 0.0
                step_d = np.clip(target - d[i], -spec.lateral_speed * dt, spec.lateral_speed * dt)
                new_d = d[i] + step_d
                blocked = any(
                    j != i and abs(new_d - d[j]) < spec.lane_width and abs(ds_all[j]) < min_long + 0.5
                    and abs(d[i] - d[j]) >= spec.lane_width
                    for j in range(n)
                )
                if not blocked:
                    d[i] = new_d
                passing[i] = d[i] > 0.5 * spec.pass_offset

            # longitudinal: follow the nearest laterally overlapping rider ahead
            overlap = np.abs(d - d[i]) < spec.lane_width
            overlap[i] = False
            ahead = overlap & (ds_all > 0)
            speed = desired
            if np.any(ahead):
                j = int(np.argmin(np.where(ahead, ds_all, np.inf)))
                gap = ds_all[j]
                if gap < spec.follow_gap:
                    speed = min(speed, max(0.0, v[j] + 0.5 * (gap - spec.follow_gap)))
                speed = min(speed, max(0.0, (gap - min_long) / dt))
            # smooth speed changes, but never at the cost of the gap guarantee
            smooth = float(np.clip(speed, v[i] - 3.0 * dt, v[i] + 3.0 * dt))
            v[i] = min(smooth, speed) if speed < v[i] else smooth
            s[i] = s[i] + v[i] * dt

        if step >= n_warm:
            k = step - n_warm
            s_log[k] = s
            d_log[k] = d
            ds_now = _wrapped_ds(s[None, :], s[:, None], lap)
            if prev_ds is not None:
                for i in range(n):
                    if behaviors[i] != "overtaker":
                        continue
                    for j in range(n):
                        # j moved from ahead of i to behind it
                        if j != i and prev_ds[i, j] > 0 >= ds_now[i, j] and abs(prev_ds[i, j]) < lap / 4:
                            events.append({"overtaker": str(i), "overtaken": str(j), "frame": k})
            prev_ds = ds_now

    # unwrap arc length so each track is continuous
    s_log = np.unwrap(s_log / spec.radius, axis=0) * spec.radius
    return s_log, d_log, behaviors, events


def generate_synthetic_track(spec: GeneratorConfig | None = None, seed: int = 0,
                             scene_id: str | None = None) -> Scene:
    spec = spec or GeneratorConfig()
    s, d, behaviors, events = simulate_track(spec, seed)
    noise_rng = np.random.default_rng([seed, 1])
    angle = s / spec.radius
    radius = spec.radius + d
    cx, cy = spec.center
    x = cx + radius * np.cos(angle)
    y = cy + radius * np.sin(angle)
    if spec.sigma_obs > 0:
        x = x + noise_rng.normal(0.0, spec.sigma_obs, size=x.shape)
        y = y + noise_rng.normal(0.0, spec.sigma_obs, size=y.shape)
    frames = np.arange(s.shape[0])
    trajs = [Trajectory(str(i), frames, np.stack([x[:, i], y[:, i]], axis=1), 1.0 / spec.fps)
             for i in range(spec.agents)]
    meta = {
        "behaviors": {str(i): b for i, b in enumerate(behaviors)},
        "overtaking_events": events,
        "seed": seed,
    }
    return Scene(scene_id if scene_id is not None else f"synth-{seed}", trajs, spec.fps, meta)


def generate_dataset(spec: GeneratorConfig | None, n_scenes: int, seed: int) -> list[Scene]:
    """``n_scenes`` independent scenes whose seeds derive from ``seed``."""
    spec = spec or GeneratorConfig()
    children = np.random.SeedSequence(seed).generate_state(n_scenes, dtype=np.uint32)
    return [generate_synthetic_track(spec, int(c), scene_id=f"s{seed}-{k:04d}") for k, c in enumerate(children)]


def min_pair_distance(scene: Scene, a: str, b: str) -> float:
    """Brute-force minimum Cartesian distance between two agents over shared frames."""
    ta = next(t for t in scene.trajectories if t.agent_id == a)
    tb = next(t for t in scene.trajectories if t.agent_id == b)
    best = math.inf
    for fa, pa in zip(ta.frames, ta.xy):
        if tb.covers(int(fa)):
            pb = tb.position_at(int(fa))
            best = min(best, math.hypot(pa[0] - pb[0], pa[1] - pb[1]))
    return best
