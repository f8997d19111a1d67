"""Fusion decoder, unimodal/mixture heads, losses and mixture samplers.

Mixture tensors carry a leading batch shape ``...`` followed by time
``T`` and component ``K``: ``mu_x`` is ``(..., T, K)`` and so on.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
import torch
from torch import nn

from .errors import NumericalError, ShapeError

RHO_LIMIT = 0.999
LOG_2PI = math.log(2 * math.pi)


class FusionDecoder(nn.Module):
    """Concatenated context embedding -> latent sequence Z of width ``hidden``."""

    def __init__(self, in_dim: int, hidden: int = 64):
        super().__init__()
        self.in_dim = in_dim
        self.lstm = nn.LSTM(in_dim, hidden, batch_first=True)

    def forward(self, embedding: torch.Tensor, t_pred: int) -> torch.Tensor:
        if embedding.shape[-1] != self.in_dim:
            raise ShapeError(f"decoder expects width {self.in_dim}, got {embedding.shape[-1]}")
        steps = embedding.unsqueeze(1).expand(-1, t_pred, -1)
        z, _ = self.lstm(steps)
        return z


def fuse(decoder: FusionDecoder, physics_embedding=None, social_embedding=None, t_pred: int = 1):
    parts = [e for e in (physics_embedding, social_embedding) if e is not None]
    if not parts:
        raise ShapeError("fuse needs at least one embedding")
    squeeze = parts[0].dim() == 1
    if squeeze:
        parts = [p.unsqueeze(0) for p in parts]
    z = decoder(torch.cat(parts, dim=-1), t_pred)
    return z[0] if squeeze else z


class UnimodalHead(nn.Module):
    def __init__(self, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(hidden, hidden), nn.LeakyReLU(0.2), nn.Linear(hidden, 2))

    def forward(self, z):
        return self.net(z)


def decode_unimodal(head: UnimodalHead, z: torch.Tensor) -> torch.Tensor:
    return head(z)


@dataclass
class MixtureForecast:
    mu_x: torch.Tensor
    mu_y: torch.Tensor
    sigma_x: torch.Tensor
    sigma_y: torch.Tensor
    rho: torch.Tensor
    pi: torch.Tensor
    log_pi: torch.Tensor | None = None

    def __post_init__(self):
        if self.log_pi is None:
            self.log_pi = torch.log(self.pi)

    @property
    def K(self) -> int:
        return self.pi.shape[-1]

    @property
    def means(self) -> torch.Tensor:
        """Component mean trajectories as (..., K, T, 2)."""
        return torch.stack([self.mu_x, self.mu_y], dim=-1).transpose(-3, -2)

    def map(self, fn) -> "MixtureForecast":
        return MixtureForecast(**{f.name: fn(getattr(self, f.name)) for f in fields(self)})

    def scaled(self, scale: float) -> "MixtureForecast":
        return MixtureForecast(self.mu_x * scale, self.mu_y * scale, self.sigma_x * scale,
                               self.sigma_y * scale, self.rho, self.pi, self.log_pi)

    def detach(self) -> "MixtureForecast":
        return self.map(lambda t: t.detach())

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name).detach().cpu().tolist() for f in fields(self) if f.name != "log_pi"}


class MixtureHead(nn.Module):
    def __init__(self, hidden: int = 64, K: int = 3):
        super().__init__()
        if K < 1:
            raise ValueError("K must be >= 1")
        self.K = K
        self.linear = nn.Linear(hidden, 6 * K)

    def forward(self, z) -> MixtureForecast:
        return mixture_from_raw(self.linear(z), self.K)


def mixture_from_raw(raw: torch.Tensor, K: int, check_finite: bool = True) -> MixtureForecast:
    """Squash (..., 6K) raw outputs into valid mixture parameters."""
    if check_finite and not torch.isfinite(raw).all():
        raise NumericalError("non-finite raw mixture outputs")
    mx, my, lsx, lsy, r, logits = raw.split(K, dim=-1)
    log_pi = torch.log_softmax(logits, dim=-1)
    return MixtureForecast(mx, my, torch.exp(lsx), torch.exp(lsy), RHO_LIMIT * torch.tanh(r),
                           torch.exp(log_pi), log_pi)


def decode_mixture(head: MixtureHead, z: torch.Tensor) -> MixtureForecast:
    return head(z)


def mixture_log_prob(forecast: MixtureForecast, truth: torch.Tensor) -> torch.Tensor:
    """Per-timestep log density of ``truth`` (..., T, 2) -> (..., T)."""
    x = truth[..., 0:1]
    y = truth[..., 1:2]
    sx, sy, rho = forecast.sigma_x, forecast.sigma_y, forecast.rho
    one_m_r2 = 1.0 - rho**2
    if bool((one_m_r2 <= 0).any()) or bool((sx <= 0).any()) or bool((sy <= 0).any()):
        raise NumericalError("degenerate mixture covariance")
    zx = (x - forecast.mu_x) / sx
    zy = (y - forecast.mu_y) / sy
    quad = (zx**2 + zy**2 - 2 * rho * zx * zy) / one_m_r2
    log_n = -LOG_2PI - torch.log(sx) - torch.log(sy) - 0.5 * torch.log(one_m_r2) - 0.5 * quad
    return torch.logsumexp(forecast.log_pi + log_n, dim=-1)


def mixture_nll(forecast: MixtureForecast, truth: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Negative log-likelihood summed over time; averaged over the batch by default."""
    truth = torch.as_tensor(truth, dtype=forecast.mu_x.dtype)
    if truth.shape[:-1] != forecast.mu_x.shape[:-1]:
        raise ShapeError(f"truth {tuple(truth.shape)} does not match forecast {tuple(forecast.mu_x.shape)}")
    nll = -mixture_log_prob(forecast, truth).sum(dim=-1)
    if reduction == "mean":
        return nll.mean()
    if reduction == "sum":
        return nll.sum()
    return nll


def _check_pair(pred, truth):
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs truth {tuple(truth.shape)}")
    if pred.shape[-1] != 2 or pred.shape[-2] == 0:
        raise ShapeError("trajectories must be non-empty (..., T, 2)")


def ade_loss(pred, truth):
    """Mean Euclidean displacement over time; torch in, torch out, else NumPy.

    Leading batch dimensions are kept.
    """
    if torch.is_tensor(pred) or torch.is_tensor(truth):
        pred = torch.as_tensor(pred)
        truth = torch.as_tensor(truth, dtype=pred.dtype)
        _check_pair(pred, truth)
        return torch.linalg.vector_norm(pred - truth, dim=-1).mean(dim=-1)
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    _check_pair(pred, truth)
    return np.linalg.norm(pred - truth, axis=-1).mean(axis=-1)


def fde_loss(pred, truth):
    if torch.is_tensor(pred) or torch.is_tensor(truth):
        pred = torch.as_tensor(pred)
        truth = torch.as_tensor(truth, dtype=pred.dtype)
        _check_pair(pred, truth)
        return torch.linalg.vector_norm(pred[..., -1, :] - truth[..., -1, :], dim=-1)
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    _check_pair(pred, truth)
    return np.linalg.norm(pred[..., -1, :] - truth[..., -1, :], axis=-1)


def sample_expected(forecast: MixtureForecast) -> torch.Tensor:
    """Mixture mean per timestep, (..., T, 2)."""
    return torch.stack([(forecast.pi * forecast.mu_x).sum(-1), (forecast.pi * forecast.mu_y).sum(-1)], dim=-1)


def _gather_component(forecast: MixtureForecast, k: torch.Tensor) -> torch.Tensor:
    means = forecast.means  # (..., K, T, 2)
    idx = k.reshape(*k.shape, 1, 1, 1).expand(*k.shape, 1, *means.shape[-2:])
    return torch.gather(means, -3, idx).squeeze(-3)


def most_probable_component(forecast: MixtureForecast) -> torch.Tensor:
    """Index of the largest weight at the last step; ties go to the lowest index."""
    # torch.argmax returns the first maximal index
    return torch.argmax(forecast.pi[..., -1, :], dim=-1)


def sample_most_probable(forecast: MixtureForecast) -> torch.Tensor:
    return _gather_component(forecast, most_probable_component(forecast))


def sample_best_mode(forecast: MixtureForecast, truth) -> torch.Tensor:
    if truth is None:
        raise ValueError("best-mode sampling needs the ground truth")
    truth = torch.as_tensor(truth, dtype=forecast.mu_x.dtype)
    means = forecast.means
    errors = torch.linalg.vector_norm(means - truth.unsqueeze(-3), dim=-1).mean(-1)  # (..., K)
    return _gather_component(forecast, torch.argmin(errors, dim=-1))


SAMPLERS = ("expected", "most_probable", "best_mode")


def sample(forecast: MixtureForecast, sampler: str, truth=None) -> torch.Tensor:
    if sampler == "expected":
        return sample_expected(forecast)
    if sampler == "most_probable":
        return sample_most_probable(forecast)
    if sampler == "best_mode":
        return sample_best_mode(forecast, truth)
    raise ValueError(f"unknown sampler {sampler!r}")
