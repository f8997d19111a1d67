"""Social context: perception decay, neighbour anticipation and graph attention."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence

from .errors import ConfigurationError, ShapeError
from .physics import forecast_const_v

EDGE_DIM = 4


@dataclass(frozen=True)
class DecayWeights:
    lambda_h: float
    lambda_p: float
    D_h: np.ndarray
    D_p: np.ndarray


def decay_weights(lambda_h: float, lambda_p: float, t_obs: int, t_pred: int) -> DecayWeights:
    """Exponential weights over the history (oldest first) and the anticipated future."""
    if lambda_h < 0 or lambda_p > 0:
        raise ConfigurationError(f"need lambda_h >= 0 and lambda_p <= 0, got {lambda_h}, {lambda_p}")
    D_h = np.exp(lambda_h * -np.arange(t_obs, -1, -1, dtype=float))
    D_p = np.exp(lambda_p * np.arange(t_pred, dtype=float))
    return DecayWeights(float(lambda_h), float(lambda_p), D_h, D_p)


def anticipate_neighbors(histories, masks, t_pred: int, dt: float):
    """Constant-velocity futures for padded neighbour histories.

    ``histories`` is (n, T, 2) and ``masks`` (n, T) marks valid frames.
    Neighbours without two valid trailing frames get a zero future and a
    cleared flag.  Returns ``(futures (n, t_pred, 2), valid (n,))``.
    """
    histories = np.asarray(histories, dtype=float)
    n = len(histories)
    masks = np.ones(histories.shape[:2], dtype=bool) if masks is None else np.asarray(masks, dtype=bool)
    futures = np.zeros((n, t_pred, 2))
    valid = np.zeros(n, dtype=bool)
    for j in range(n):
        if masks[j, -1] and masks[j, -2]:
            futures[j] = forecast_const_v(histories[j][-2:], t_pred, dt)
            valid[j] = True
    return futures, valid


def _wrap(angle):
    return (angle + np.pi) % (2 * np.pi) - np.pi


def edge_features(positions, velocities, valid=None) -> np.ndarray:
    """Pairwise ``[distance, heading difference, dvx, dvy]`` for M nodes.

    ``positions`` and ``velocities`` are (M, 2) at the reference frame.
    Entry ``[i, j]`` describes node j as seen from node i.  Rows and columns
    of invalid nodes are zero.
    """
    p = np.asarray(positions, dtype=float)
    v = np.asarray(velocities, dtype=float)
    speed = np.hypot(v[:, 0], v[:, 1])
    heading = np.where(speed > 0, np.arctan2(v[:, 1], v[:, 0]), 0.0)
    dp = p[None, :, :] - p[:, None, :]
    dv = v[None, :, :] - v[:, None, :]
    out = np.concatenate([
        np.hypot(dp[..., 0], dp[..., 1])[..., None],
        _wrap(heading[None, :] - heading[:, None])[..., None],
        dv,
    ], axis=-1)
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        out[~(valid[:, None] & valid[None, :])] = 0.0
    idx = np.arange(len(p))
    out[idx, idx] = 0.0
    return out


def build_edge_features(window_xy, window_masks, dt: float) -> np.ndarray:
    """Edge tensor from node tracks in model coordinates.

    ``window_xy`` is (M, T, 2) with the ego first and the reference frame
    last; velocities are two-frame differences at the reference frame.
    """
    xy = np.asarray(window_xy, dtype=float)
    masks = np.asarray(window_masks, dtype=bool)
    valid = masks[:, -1]
    has_vel = masks[:, -1] & masks[:, -2]
    vel = np.where(has_vel[:, None], (xy[:, -1] - xy[:, -2]) / dt, 0.0)
    return edge_features(xy[:, -1], vel, valid)


def topology_mask(n_nodes: int, topology: str = "full") -> torch.Tensor:
    if topology == "full":
        return torch.ones(n_nodes, n_nodes, dtype=torch.bool)
    if topology == "star":
        mask = torch.eye(n_nodes, dtype=torch.bool)
        mask[0, :] = True
        mask[:, 0] = True
        return mask
    raise ConfigurationError(f"unknown topology {topology!r}")


class GraphAttentionLayer(nn.Module):
    """Single-head graph attention with edge features in the logits.

    logit_ij = LeakyReLU_0.2(a_src . W h_i + a_dst . W h_j + a_edge . e_ij)
    """

    def __init__(self, node_dim: int, out_dim: int, edge_dim: int = EDGE_DIM, dropout: float = 0.1):
        super().__init__()
        self.W = nn.Linear(node_dim, out_dim, bias=False)
        self.a_src = nn.Linear(out_dim, 1, bias=False)
        self.a_dst = nn.Linear(out_dim, 1, bias=False)
        self.a_edge = nn.Linear(edge_dim, 1, bias=True)
        self.leaky = nn.LeakyReLU(0.2)
        self.dropout = nn.Dropout(dropout)

    def forward(self, nodes, edges, adjacency):
        """nodes (B, M, F), edges (B, M, M, E), adjacency (B, M, M) bool.

        Returns ``(out (B, M, out_dim), A (B, M, M))``; ``A`` is taken before
        dropout.
        """
        wh = self.W(nodes)
        logits = self.a_src(wh) + self.a_dst(wh).transpose(1, 2) + self.a_edge(edges).squeeze(-1)
        logits = self.leaky(logits).masked_fill(~adjacency, float("-inf"))
        attn = torch.softmax(logits, dim=-1)
        out = torch.matmul(self.dropout(attn), wh)
        return out, attn


class SocialEncoder(nn.Module):
    """History/anticipation LSTMs shared across agents, then one GAT layer.

    Node 0 is the ego; the ego row of the attention output, linearly
    projected, is the social embedding.
    """

    def __init__(self, hidden: int = 64, anticipation: bool = True, topology: str = "full",
                 dropout: float = 0.1, edge_scale=(1.0, 1.0, 1.0, 1.0)):
        super().__init__()
        self.hidden = hidden
        self.anticipation = anticipation
        self.topology = topology
        self.hist_lstm = nn.LSTM(2, hidden, batch_first=True)
        self.ant_lstm = nn.LSTM(2, hidden, batch_first=True) if anticipation else None
        node_dim = hidden * (2 if anticipation else 1)
        self.node_dim = node_dim
        self.gat = GraphAttentionLayer(node_dim, hidden, EDGE_DIM, dropout)
        self.proj = nn.Linear(hidden, hidden)
        self.register_buffer("edge_scale", torch.as_tensor(edge_scale, dtype=torch.float32), persistent=False)

    @property
    def out_dim(self) -> int:
        return self.hidden

    @staticmethod
    def _encode(lstm, seq, mask):
        """Final hidden state over the valid (trailing, contiguous) frames."""
        n, T, _ = seq.shape
        lengths = mask.sum(dim=1).clamp(min=1)
        if bool((lengths == T).all()):
            _, (h, _) = lstm(seq)
            return h[-1]
        # move the valid suffix to the front so packing skips the padding
        shift = T - lengths
        idx = (torch.arange(T, device=seq.device)[None, :] + shift[:, None]).clamp(max=T - 1)
        aligned = torch.gather(seq, 1, idx[..., None].expand(n, T, 2))
        packed = pack_padded_sequence(aligned, lengths.cpu(), batch_first=True, enforce_sorted=False)
        _, (h, _) = lstm(packed)
        return h[-1]

    def node_features(self, hist, hist_mask, ant=None, ant_valid=None, D_h=None, D_p=None):
        """hist (B, M, Th, 2), hist_mask (B, M, Th); ant (B, M, Tp, 2), ant_valid (B, M)."""
        B, M, Th, _ = hist.shape
        if D_h is not None:
            if D_h.shape[-1] != Th:
                raise ShapeError(f"history decay has {D_h.shape[-1]} weights for {Th} frames")
            hist = hist * D_h.view(1, 1, Th, 1)
        feats = [self._encode(self.hist_lstm, hist.reshape(B * M, Th, 2), hist_mask.reshape(B * M, Th))]
        if self.anticipation:
            if ant is None:
                raise ShapeError("anticipation enabled but no anticipated futures given")
            Tp = ant.shape[2]
            if D_p is not None:
                if D_p.shape[-1] != Tp:
                    raise ShapeError(f"future decay has {D_p.shape[-1]} weights for {Tp} frames")
                ant = ant * D_p.view(1, 1, Tp, 1)
            ant = ant * ant_valid[..., None, None].to(ant.dtype)
            _, (h, _) = self.ant_lstm(ant.reshape(B * M, Tp, 2))
            feats.append(h[-1])
        return torch.cat(feats, dim=-1).view(B, M, self.node_dim)

    def adjacency(self, node_valid):
        B, M = node_valid.shape
        topo = topology_mask(M, self.topology).to(node_valid.device)
        adj = topo[None] & node_valid[:, :, None] & node_valid[:, None, :]
        return adj | torch.eye(M, dtype=torch.bool, device=node_valid.device)[None]

    def forward(self, hist, hist_mask, node_valid, edges, ant=None, ant_valid=None, D_h=None, D_p=None):
        nodes = self.node_features(hist, hist_mask, ant, ant_valid, D_h, D_p)
        edges = edges * self.edge_scale.to(edges.dtype)
        out, attn = self.gat(nodes, edges, self.adjacency(node_valid))
        return self.proj(out[:, 0]), attn


def build_node_features(encoder: SocialEncoder, ego_history, ego_anticipation, neighbor_histories,
                        neighbor_anticipations, decay: DecayWeights, neighbor_masks=None,
                        anticipation_valid=None) -> torch.Tensor:
    """Node feature matrix for one window, ego in row 0."""
    dtype = next(encoder.parameters()).dtype
    ego_history = np.asarray(ego_history, dtype=float)
    neighbor_histories = np.asarray(neighbor_histories, dtype=float).reshape(-1, *ego_history.shape)
    n = len(neighbor_histories)
    if neighbor_masks is None:
        neighbor_masks = np.ones(neighbor_histories.shape[:2], dtype=bool)
    hist = np.concatenate([ego_history[None], neighbor_histories])
    mask = np.concatenate([np.ones((1, len(ego_history)), bool), np.asarray(neighbor_masks, bool)])
    if len(decay.D_h) != hist.shape[1]:
        raise ShapeError("history decay length does not match the history")
    kwargs = {}
    if encoder.anticipation:
        ego_anticipation = np.asarray(ego_anticipation, dtype=float)
        ants = np.asarray(neighbor_anticipations, dtype=float).reshape(n, *ego_anticipation.shape)
        if len(decay.D_p) != ego_anticipation.shape[0]:
            raise ShapeError("future decay length does not match the anticipation")
        valid = np.ones(n + 1, bool) if anticipation_valid is None else np.concatenate([[True], anticipation_valid])
        kwargs = dict(
            ant=torch.as_tensor(np.concatenate([ego_anticipation[None], ants])[None], dtype=dtype),
            ant_valid=torch.as_tensor(valid[None]),
            D_p=torch.as_tensor(decay.D_p, dtype=dtype),
        )
    return encoder.node_features(
        torch.as_tensor(hist[None], dtype=dtype),
        torch.as_tensor(mask[None]),
        D_h=torch.as_tensor(decay.D_h, dtype=dtype),
        **kwargs,
    )[0]


def social_attention(encoder: SocialEncoder, nodes, edges, node_valid=None):
    """Run the attention layer on precomputed node features (M, F) or (B, M, F)."""
    squeeze = nodes.dim() == 2
    if squeeze:
        nodes, edges = nodes[None], edges[None]
    B, M, _ = nodes.shape
    if node_valid is None:
        node_valid = torch.ones(B, M, dtype=torch.bool)
    elif squeeze:
        node_valid = node_valid[None]
    edges = torch.as_tensor(edges, dtype=nodes.dtype) * encoder.edge_scale.to(nodes.dtype)
    out, attn = encoder.gat(nodes, edges, encoder.adjacency(node_valid))
    y = encoder.proj(out[:, 0])
    return (y[0], attn[0]) if squeeze else (y, attn)
