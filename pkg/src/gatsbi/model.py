"""Window featurisation and the assembled forecasting network."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import torch
from torch import nn

from .config import Config
from .data import SampleWindow
from .geometry import LaneFrame, align_branch, cartesian_to_polar, polar_to_lane
from .output import FusionDecoder, MixtureHead, UnimodalHead, sample
from .physics import PREDICTORS, PhysicsEncoder, forecast_const_v, physics_forecasts
from .social import SocialEncoder, anticipate_neighbors, build_edge_features, decay_weights


@dataclass
class WindowTensors:
    """Model inputs for a list of windows, in ego-relative model coordinates.

    Shapes use B windows, N = N_max neighbour slots, M = N + 1 nodes,
    Th = t_obs + 1 history frames and Tp = t_pred future frames.
    """

    ego_hist: np.ndarray       # (B, Th, 2)
    ego_fut: np.ndarray        # (B, Tp, 2)
    nb_hist: np.ndarray        # (B, N, Th, 2)
    nb_mask: np.ndarray        # (B, N, Th) bool
    nb_valid: np.ndarray       # (B, N) bool, present at the reference frame
    ego_ant: np.ndarray        # (B, Tp, 2)
    nb_ant: np.ndarray         # (B, N, Tp, 2)
    nb_ant_valid: np.ndarray   # (B, N) bool
    edges: np.ndarray          # (B, M, M, 4)
    physics: np.ndarray        # (B, 4, Tp, 2)
    window_ids: list
    scene_ids: list
    neighbor_ids: list
    dt: float

    def __len__(self):
        return len(self.window_ids)

    @property
    def t_obs(self) -> int:
        return self.ego_hist.shape[1] - 1

    @property
    def t_pred(self) -> int:
        return self.ego_fut.shape[1]

    def subset(self, idx) -> "WindowTensors":
        idx = np.asarray(idx, dtype=np.int64)
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, np.ndarray):
                out[f.name] = value[idx]
            elif isinstance(value, list):
                out[f.name] = [value[i] for i in idx]
            else:
                out[f.name] = value
        return WindowTensors(**out)

    def batch(self, idx=None, dtype=torch.float32) -> dict:
        data = self if idx is None else self.subset(idx)
        out = {}
        for f in fields(data):
            value = getattr(data, f.name)
            if isinstance(value, np.ndarray):
                out[f.name] = torch.as_tensor(value) if value.dtype == bool else torch.as_tensor(value, dtype=dtype)
        return out

    def index_of(self, window_id: str) -> int:
        try:
            return self.window_ids.index(window_id)
        except ValueError:
            raise KeyError(f"unknown window id {window_id!r}") from None


def _to_model_frame(window: SampleWindow, cfg: Config):
    """Ego track (history + future) and neighbour histories, relative to the ego
    reference pose, in lane or Cartesian coordinates."""
    ego = np.concatenate([window.ego_history, window.ego_future])
    t_ref = window.t_obs
    nb = np.array(window.neighbor_histories, dtype=float)
    masks = np.asarray(window.neighbor_masks, dtype=bool)
    if cfg.geometry.coordinates == "lane":
        frame = LaneFrame((cfg.geometry.center_x, cfg.geometry.center_y), cfg.geometry.ref_radius)
        ego = polar_to_lane(cartesian_to_polar(ego, frame), frame)
        for j in range(len(nb)):
            valid = np.flatnonzero(masks[j])
            lane = polar_to_lane(cartesian_to_polar(nb[j, valid], frame), frame)
            # neighbours are present at the reference frame, the last history frame
            lane = align_branch(lane, len(valid) - 1, ego[t_ref, 0], frame)
            nb[j] = 0.0
            nb[j, valid] = lane
    ref = ego[t_ref].copy()
    ego = ego - ref
    for j in range(len(nb)):
        nb[j, masks[j]] -= ref
    return ego, nb, masks


def featurize(windows: list[SampleWindow], cfg: Config) -> WindowTensors:
    if not windows:
        raise ValueError("no windows to featurise")
    t_obs, t_pred = windows[0].t_obs, windows[0].t_pred
    dt = windows[0].dt
    N = cfg.dataset.N_max
    Th, M = t_obs + 1, N + 1
    B = len(windows)
    out = dict(
        ego_hist=np.zeros((B, Th, 2)), ego_fut=np.zeros((B, t_pred, 2)),
        nb_hist=np.zeros((B, N, Th, 2)), nb_mask=np.zeros((B, N, Th), bool), nb_valid=np.zeros((B, N), bool),
        ego_ant=np.zeros((B, t_pred, 2)), nb_ant=np.zeros((B, N, t_pred, 2)), nb_ant_valid=np.zeros((B, N), bool),
        edges=np.zeros((B, M, M, 4)), physics=np.zeros((B, len(PREDICTORS), t_pred, 2)),
    )
    for b, w in enumerate(windows):
        if (w.t_obs, w.t_pred) != (t_obs, t_pred):
            raise ValueError("all windows must share t_obs and t_pred")
        ego, nb, masks = _to_model_frame(w, cfg)
        n = min(len(nb), N)
        hist = ego[:Th]
        out["ego_hist"][b] = hist
        out["ego_fut"][b] = ego[Th:]
        out["nb_hist"][b, :n] = nb[:n]
        out["nb_mask"][b, :n] = masks[:n]
        out["nb_valid"][b, :n] = masks[:n, -1]
        out["ego_ant"][b] = forecast_const_v(hist, t_pred, dt)
        if n:
            ant, ant_valid = anticipate_neighbors(nb[:n], masks[:n], t_pred, dt)
            out["nb_ant"][b, :n] = ant
            out["nb_ant_valid"][b, :n] = ant_valid
        node_xy = np.concatenate([hist[None], out["nb_hist"][b]])
        node_mask = np.concatenate([np.ones((1, Th), bool), out["nb_mask"][b]])
        out["edges"][b] = build_edge_features(node_xy, node_mask, dt)
        out["physics"][b] = physics_forecasts(hist, t_pred, dt, cfg.physics)
    return WindowTensors(
        **out,
        window_ids=[w.window_id for w in windows],
        scene_ids=[w.scene_id for w in windows],
        neighbor_ids=[tuple(w.neighbor_ids[:N]) for w in windows],
        dt=dt,
    )


class GATsBi(nn.Module):
    """Physics and/or social context -> fused latent sequence -> output head.

    ``cfg.model.name`` picks the variant: ``gatsbi`` (both contexts),
    ``physics_module`` or ``social_module``.
    """

    def __init__(self, cfg: Config, t_obs: int, t_pred: int):
        super().__init__()
        self.cfg = cfg
        self.t_obs = t_obs
        self.t_pred = t_pred
        hidden = cfg.model.hidden
        self.scale = float(cfg.model.coord_scale)
        self.multimodal = cfg.output.mode == "multimodal"
        in_dim = 0
        self.physics = None
        self.social = None
        if cfg.model.use_physics:
            self.physics = PhysicsEncoder(hidden)
            in_dim += self.physics.out_dim
        if cfg.model.use_social:
            inv = 1.0 / self.scale
            self.social = SocialEncoder(hidden, anticipation=cfg.social.anticipation == "on",
                                        topology=cfg.social.topology, dropout=cfg.social.dropout,
                                        edge_scale=(inv, 1.0, inv, inv))
            in_dim += self.social.out_dim
            lam_h, lam_p = cfg.social.effective_lambdas
            decay = decay_weights(lam_h, lam_p, t_obs, t_pred)
            self.register_buffer("D_h", torch.as_tensor(decay.D_h, dtype=torch.float32))
            self.register_buffer("D_p", torch.as_tensor(decay.D_p, dtype=torch.float32))
        self.decoder = FusionDecoder(in_dim, hidden)
        self.head = MixtureHead(hidden, cfg.output.K) if self.multimodal else UnimodalHead(hidden)

    def embed(self, batch: dict):
        parts, attention = [], None
        if self.physics is not None:
            parts.append(self.physics(batch["physics"] / self.scale))
        if self.social is not None:
            B = batch["ego_hist"].shape[0]
            hist = torch.cat([batch["ego_hist"][:, None], batch["nb_hist"]], dim=1) / self.scale
            hist_mask = torch.cat([torch.ones(B, 1, hist.shape[2], dtype=torch.bool), batch["nb_mask"]], dim=1)
            node_valid = torch.cat([torch.ones(B, 1, dtype=torch.bool), batch["nb_valid"]], dim=1)
            kwargs = {}
            if self.social.anticipation:
                kwargs = dict(
                    ant=torch.cat([batch["ego_ant"][:, None], batch["nb_ant"]], dim=1) / self.scale,
                    ant_valid=torch.cat([torch.ones(B, 1, dtype=torch.bool), batch["nb_ant_valid"]], dim=1),
                    D_p=self.D_p,
                )
            y_soc, attention = self.social(hist, hist_mask, node_valid, batch["edges"], D_h=self.D_h, **kwargs)
            parts.append(y_soc)
        return torch.cat(parts, dim=-1), attention

    def forward(self, batch: dict) -> dict:
        emb, attention = self.embed(batch)
        z = self.decoder(emb, self.t_pred)
        out = {"attention": attention, "latent": z}
        if self.multimodal:
            out["mixture"] = self.head(z).scaled(self.scale)
        else:
            out["trajectory"] = self.head(z) * self.scale
        return out

    def predict(self, batch: dict, sampler: str = "expected", truth=None) -> torch.Tensor:
        out = self.forward(batch)
        if not self.multimodal:
            return out["trajectory"]
        return sample(out["mixture"], sampler, truth)


def build_model(cfg: Config, t_obs: int, t_pred: int, seed: int | None = None) -> GATsBi:
    if seed is not None:
        torch.manual_seed(seed)
    return GATsBi(cfg, t_obs, t_pred)
