"""Physics-knowledge predictors and the recurrent ensemble encoder.

Predictors take a history as an (n, 2) array of positions sampled every
``dt`` seconds (a :class:`~gatsbi.data.Trajectory` works too) and return a
(t_pred, 2) array of future positions, starting one step after the last
observation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import PhysicsConfig
from .errors import InputError, LowSpeedError, NumericalError, ShapeError

PREDICTORS = ("const_v", "const_a", "kinematic", "xkalman")


def _as_history(history, dt=None):
    xy = getattr(history, "xy", history)
    if dt is None:
        dt = getattr(history, "dt", None)
    if dt is None or not dt > 0:
        raise InputError("a positive dt is required")
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    return xy, float(dt)


def _wrap(angle):
    return (angle + np.pi) % (2 * np.pi) - np.pi


def forecast_const_v(history, t_pred: int, dt: float | None = None) -> np.ndarray:
    xy, dt = _as_history(history, dt)
    if len(xy) < 2:
        raise InputError("constant velocity needs at least 2 frames")
    vel = (xy[-1] - xy[-2]) / dt
    k = np.arange(1, t_pred + 1)[:, None]
    return xy[-1] + k * dt * vel


def forecast_const_a(history, t_pred: int, dt: float | None = None) -> np.ndarray:
    """Constant-acceleration extrapolation from the last three frames.

    The backward difference is a midpoint velocity, so half an acceleration
    step is added to get the velocity at the last frame; this makes the
    forecast exact on quadratic motion.
    """
    xy, dt = _as_history(history, dt)
    if len(xy) < 3:
        raise InputError("constant acceleration needs at least 3 frames")
    acc = (xy[-1] - 2 * xy[-2] + xy[-3]) / dt**2
    vel = (xy[-1] - xy[-2]) / dt + 0.5 * acc * dt
    tau = np.arange(1, t_pred + 1)[:, None] * dt
    return xy[-1] + tau * vel + 0.5 * tau**2 * acc


@dataclass(frozen=True)
class KinematicState:
    x: float
    y: float
    phi: float
    v: float
    delta: float
    L_B: float = 1.8

    def __post_init__(self):
        if self.v < 0:
            raise ValueError("speed must be non-negative")
        if abs(self.delta) >= np.pi / 2:
            raise ValueError("steering angle must satisfy |delta| < pi/2")
        if self.L_B <= 0:
            raise ValueError("L_B must be positive")


def estimate_kinematic_state(history, L_B: float = 1.8, dt: float | None = None,
                             v_min: float = 0.1, delta_max: float = math.radians(45.0)) -> KinematicState:
    xy, dt = _as_history(history, dt)
    if len(xy) < 3:
        raise InputError("kinematic state needs at least 3 frames")
    d1 = xy[-2] - xy[-3]
    d2 = xy[-1] - xy[-2]
    v = float(np.hypot(*d2)) / dt
    v_prev = float(np.hypot(*d1)) / dt
    if v < v_min or v_prev < v_min:
        raise LowSpeedError(f"speed {min(v, v_prev):.3g} m/s below {v_min} m/s")
    phi = math.atan2(d2[1], d2[0])
    phi_dot = _wrap(phi - math.atan2(d1[1], d1[0])) / dt
    delta = math.atan(L_B * phi_dot / v)
    delta = float(np.clip(delta, -delta_max, delta_max))
    return KinematicState(float(xy[-1, 0]), float(xy[-1, 1]), phi, v, delta, L_B)


def _bicycle_rhs(state, v, tan_delta, L_B):
    phi = state[2]
    return np.array([v * math.cos(phi), v * math.sin(phi), v * tan_delta / L_B])


def forecast_kinematic(state: KinematicState, t_pred: int, dt: float) -> np.ndarray:
    """Integrate the bicycle model with frozen speed and steering (RK4)."""
    s = np.array([state.x, state.y, state.phi])
    tan_d = math.tan(state.delta)
    out = np.empty((t_pred, 2))
    for k in range(t_pred):
        k1 = _bicycle_rhs(s, state.v, tan_d, state.L_B)
        k2 = _bicycle_rhs(s + 0.5 * dt * k1, state.v, tan_d, state.L_B)
        k3 = _bicycle_rhs(s + 0.5 * dt * k2, state.v, tan_d, state.L_B)
        k4 = _bicycle_rhs(s + dt * k3, state.v, tan_d, state.L_B)
        s = s + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k] = s[:2]
    return out


def forecast_kinematic_from_history(history, t_pred: int, dt: float | None = None,
                                    cfg: PhysicsConfig | None = None) -> np.ndarray:
    cfg = cfg or PhysicsConfig()
    xy, dt = _as_history(history, dt)
    try:
        state = estimate_kinematic_state(xy, cfg.L_B, dt, cfg.v_min, math.radians(cfg.delta_max_deg))
    except LowSpeedError:
        return forecast_const_v(xy, t_pred, dt)
    return forecast_kinematic(state, t_pred, dt)


@dataclass(frozen=True)
class NoiseConfig:
    sigma_p: float = 0.05
    sigma_phi: float = 0.05
    sigma_v: float = 0.1
    sigma_m: float = 0.1
    init_cov_scale: float = 10.0

    def __post_init__(self):
        for name in ("sigma_p", "sigma_phi", "sigma_v", "sigma_m", "init_cov_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def from_physics(cls, cfg: PhysicsConfig) -> "NoiseConfig":
        return cls(cfg.sigma_p, cfg.sigma_phi, cfg.sigma_v, cfg.sigma_m, cfg.init_cov_scale)


class ExtendedKalmanFilter:
    """Discrete EKF with Joseph-form covariance updates.

    The motion and measurement models are passed per call, so the same
    machinery runs the bicycle filter and plain linear filters.
    """

    def __init__(self, x0, P0, Q, R):
        self.x = np.array(x0, dtype=float)
        self.P = np.array(P0, dtype=float)
        self.Q = np.array(Q, dtype=float)
        self.R = np.array(R, dtype=float)

    def predict(self, f, F):
        """``f`` maps the state forward; ``F`` is its Jacobian (array or callable)."""
        Fk = F(self.x) if callable(F) else np.asarray(F)
        self.x = f(self.x)
        self.P = Fk @ self.P @ Fk.T + self.Q
        self._check()

    def update(self, z, h, H):
        Hk = H(self.x) if callable(H) else np.asarray(H)
        innovation = np.asarray(z, dtype=float) - h(self.x)
        S = Hk @ self.P @ Hk.T + self.R
        K = np.linalg.solve(S, Hk @ self.P).T
        self.x = self.x + K @ innovation
        I_KH = np.eye(len(self.x)) - K @ Hk
        self.P = I_KH @ self.P @ I_KH.T + K @ self.R @ K.T
        self._check()

    def _check(self):
        self.P = 0.5 * (self.P + self.P.T)
        try:
            np.linalg.cholesky(self.P)
        except np.linalg.LinAlgError:
            raise NumericalError("state covariance lost positive definiteness") from None


@dataclass
class BicycleFilterResult:
    states: np.ndarray        # (n, 4) filtered (x, y, phi, v)
    covariances: np.ndarray   # (n, 4, 4)


def run_bicycle_ekf(history, noise: NoiseConfig, dt: float | None = None) -> BicycleFilterResult:
    """Filter a position track with state (x, y, heading, speed).

    Steering is not part of the state; its effect is absorbed by the
    heading process noise.
    """
    xy, dt = _as_history(history, dt)
    if len(xy) < 3:
        raise InputError("the filter needs at least 3 frames")
    d0 = xy[1] - xy[0]
    x0 = np.array([xy[0, 0], xy[0, 1], math.atan2(d0[1], d0[0]), np.hypot(*d0) / dt])
    P0 = noise.init_cov_scale * np.diag([noise.sigma_m**2, noise.sigma_m**2,
                                         noise.sigma_phi**2, noise.sigma_v**2])
    Q = np.diag([noise.sigma_p**2, noise.sigma_p**2, noise.sigma_phi**2, noise.sigma_v**2])
    R = noise.sigma_m**2 * np.eye(2)
    H = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])
    ekf = ExtendedKalmanFilter(x0, P0, Q, R)

    def f(s):
        return np.array([s[0] + s[3] * math.cos(s[2]) * dt, s[1] + s[3] * math.sin(s[2]) * dt, s[2], s[3]])

    def F(s):
        c, sn = math.cos(s[2]), math.sin(s[2])
        return np.array([[1.0, 0, -s[3] * sn * dt, c * dt],
                         [0, 1.0, s[3] * c * dt, sn * dt],
                         [0, 0, 1.0, 0],
                         [0, 0, 0, 1.0]])

    def h(s):
        return s[:2]

    states = [ekf.x.copy()]
    covs = [ekf.P.copy()]
    for z in xy[1:]:
        ekf.predict(f, F)
        ekf.update(z, h, H)
        states.append(ekf.x.copy())
        covs.append(ekf.P.copy())
    return BicycleFilterResult(np.array(states), np.array(covs))


def heading_rate(headings, dt: float, window: int) -> float:
    """Least-squares slope of the last ``window`` unwrapped headings."""
    tail = np.unwrap(np.asarray(headings, dtype=float)[-max(window, 2):])
    t = np.arange(len(tail)) * dt
    t = t - t.mean()
    return float(np.dot(t, tail - tail.mean()) / np.dot(t, t))


def forecast_xkalman(history, t_pred: int, noise: NoiseConfig | None = None, L_B: float = 1.8,
                     dt: float | None = None, v_min: float = 0.1,
                     delta_max: float = math.radians(45.0), rate_window: int = 25) -> np.ndarray:
    """EKF over the history, then bicycle-model rollout of the final state.

    Steering comes from the heading rate fitted to the last ``rate_window``
    filtered headings.
    """
    noise = noise or NoiseConfig()
    xy, dt = _as_history(history, dt)
    result = run_bicycle_ekf(xy, noise, dt)
    x, y, phi, v = result.states[-1]
    if v < 0:
        phi, v = phi + np.pi, -v
    phi = float(_wrap(phi))
    if v < v_min:
        return forecast_const_v(xy, t_pred, dt)
    phi_dot = heading_rate(result.states[:, 2], dt, rate_window)
    delta = float(np.clip(math.atan(L_B * phi_dot / v), -delta_max, delta_max))
    return forecast_kinematic(KinematicState(float(x), float(y), phi, float(v), delta, L_B), t_pred, dt)


def physics_forecasts(history, t_pred: int, dt: float | None = None,
                      cfg: PhysicsConfig | None = None) -> np.ndarray:
    """All four predictors stacked as (4, t_pred, 2) in ``PREDICTORS`` order."""
    cfg = cfg or PhysicsConfig()
    xy, dt = _as_history(history, dt)
    delta_max = math.radians(cfg.delta_max_deg)
    return np.stack([
        forecast_const_v(xy, t_pred, dt),
        forecast_const_a(xy, t_pred, dt),
        forecast_kinematic_from_history(xy, t_pred, dt, cfg),
        forecast_xkalman(xy, t_pred, NoiseConfig.from_physics(cfg), cfg.L_B, dt, cfg.v_min, delta_max,
                         cfg.heading_rate_window),
    ])


class PhysicsEncoder(nn.Module):
    """One LSTM per physics predictor; final hidden states concatenated."""

    def __init__(self, hidden: int = 64, n_models: int = len(PREDICTORS)):
        super().__init__()
        self.hidden = hidden
        self.encoders = nn.ModuleList(nn.LSTM(2, hidden, batch_first=True) for _ in range(n_models))

    @property
    def out_dim(self) -> int:
        return self.hidden * len(self.encoders)

    def forward(self, forecasts: torch.Tensor) -> torch.Tensor:
        """``forecasts``: (B, n_models, T, 2) -> (B, n_models * hidden)."""
        if forecasts.dim() != 4 or forecasts.shape[1] != len(self.encoders) or forecasts.shape[-1] != 2:
            raise ShapeError(f"expected (B, {len(self.encoders)}, T, 2), got {tuple(forecasts.shape)}")
        finals = []
        for m, lstm in enumerate(self.encoders):
            _, (h, _) = lstm(forecasts[:, m])
            finals.append(h[-1])
        return torch.cat(finals, dim=-1)


def encode_physics(encoder: PhysicsEncoder, forecasts) -> torch.Tensor:
    """Encode a list/array of four equal-length forecasts, batched or not."""
    if isinstance(forecasts, (list, tuple)):
        lengths = {len(f) for f in forecasts}
        if len(lengths) != 1:
            raise ShapeError(f"forecast lengths differ: {sorted(lengths)}")
        forecasts = np.stack([np.asarray(f, dtype=float) for f in forecasts])
    t = torch.as_tensor(np.asarray(forecasts) if not torch.is_tensor(forecasts) else forecasts,
                        dtype=next(encoder.parameters()).dtype)
    squeeze = t.dim() == 3
    if squeeze:
        t = t.unsqueeze(0)
    out = encoder(t)
    return out[0] if squeeze else out
