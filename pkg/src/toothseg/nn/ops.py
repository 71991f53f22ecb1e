"""Point-set primitives shared by both branches. Tensors are (B, M, C), channels last."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from ..errors import ConfigError


def pairwise_sqdist(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # explicit differences: the matmul expansion loses precision for near points
    d = (a[..., 0:1] - b[..., 0].unsqueeze(-2)) ** 2
    for i in range(1, a.shape[-1]):
        d = d + (a[..., i:i + 1] - b[..., i].unsqueeze(-2)) ** 2
    return d


def knn(query: torch.Tensor, ref: torch.Tensor, k: int, exclude_self: bool = False) -> torch.Tensor:
    """Indices (B, m, k) of the k nearest ``ref`` points for every ``query`` point."""
    d = pairwise_sqdist(query, ref)
    if exclude_self:
        if query.shape[1] != ref.shape[1]:
            raise ConfigError("exclude_self needs query and ref to be the same set")
        eye = torch.eye(ref.shape[1], dtype=torch.bool, device=ref.device)
        d = d.masked_fill(eye, float("inf"))
    return d.topk(k, dim=-1, largest=False, sorted=True).indices


def gather_points(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """x (B, M, C), idx (B, *S) -> (B, *S, C)."""
    B = x.shape[0]
    flat = idx.reshape(B, -1)
    out = torch.gather(x, 1, flat.unsqueeze(-1).expand(-1, -1, x.shape[-1]))
    return out.reshape(*idx.shape, x.shape[-1])


@torch.no_grad()
def farthest_point_sample(points, m: int):
    """Greedy max-min subset of ``m`` indices.

    The first pick is the point farthest from the centroid, so the result only
    depends on point content, not on row order. Accepts an (M, 3) array or a
    (B, M, 3) tensor and returns indices of matching kind.
    """
    as_numpy = not isinstance(points, torch.Tensor)
    pts = torch.as_tensor(np.asarray(points, dtype=np.float64)) if as_numpy else points
    squeeze = pts.dim() == 2
    if squeeze:
        pts = pts.unsqueeze(0)
    B, M, _ = pts.shape
    if m > M:
        raise ConfigError(f"cannot sample {m} points from {M}")
    if m < 1:
        raise ConfigError(f"sample size must be positive, got {m}")
    out = torch.empty(B, m, dtype=torch.long, device=pts.device)
    centroid = pts.mean(dim=1, keepdim=True)
    cur = ((pts - centroid) ** 2).sum(-1).argmax(dim=1)
    mind = torch.full((B, M), float("inf"), dtype=pts.dtype, device=pts.device)
    ar = torch.arange(B, device=pts.device)
    for i in range(m):
        out[:, i] = cur
        d = ((pts - pts[ar, cur].unsqueeze(1)) ** 2).sum(-1)
        mind = torch.minimum(mind, d)
        # already-chosen points sit at distance 0 and never win again unless
        # every remaining point duplicates one of them
        mind[ar, cur] = -1.0
        cur = mind.argmax(dim=1)
    if squeeze:
        out = out[0]
    return out.numpy() if as_numpy else out


def interpolate_features(fine_xyz, coarse_xyz, coarse_feats, k: int = 3, eps: float = 1e-8):
    """Inverse-distance weighted propagation of coarse features onto fine points."""
    k = min(k, coarse_xyz.shape[1])
    d2 = pairwise_sqdist(fine_xyz, coarse_xyz)
    d2, idx = d2.topk(k, dim=-1, largest=False, sorted=True)
    w = 1.0 / (d2.clamp_min(0).sqrt() + eps)
    w = w / w.sum(-1, keepdim=True)
    return (gather_points(coarse_feats, idx) * w.unsqueeze(-1)).sum(-2)


class SharedMLP(nn.Module):
    """Per-point Linear -> BatchNorm -> activation over any leading shape."""

    def __init__(self, c_in: int, c_out: int, act: bool = True, bias: bool = False):
        super().__init__()
        self.linear = nn.Linear(c_in, c_out, bias=bias)
        self.norm = nn.BatchNorm1d(c_out)
        self.act = nn.ReLU() if act else nn.Identity()

    def forward(self, x):
        shape = x.shape
        y = self.linear(x.reshape(-1, shape[-1]))
        y = self.act(self.norm(y))
        return y.reshape(*shape[:-1], y.shape[-1])
