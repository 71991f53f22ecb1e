"""Geometry branch: hierarchical residual-MLP encoder with affine-normalized grouping."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from ..errors import ConfigError
from .ops import SharedMLP, farthest_point_sample, gather_points, interpolate_features, knn


@dataclass
class StageConfig:
    points: int
    k: int = 24
    pre_blocks: int = 1
    pos_blocks: int = 1
    channels: int = 64


def _default_stages(n: int = 16000) -> list[StageConfig]:
    return [
        StageConfig(n, 24, 1, 1, 64),
        StageConfig(n // 4, 24, 1, 1, 128),
        StageConfig(n // 16, 24, 1, 1, 256),
        StageConfig(n // 64, 24, 1, 1, 512),
    ]


@dataclass
class GeometryBranchConfig:
    in_dim: int = 6
    embed_dim: int = 64
    stages: list[StageConfig] = field(default_factory=_default_stages)
    decoder_k: int = 3
    out_dim: int = 256
    global_concat: bool = False
    eps: float = 1e-5

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages]

    @classmethod
    def for_points(cls, n: int, **kw) -> "GeometryBranchConfig":
        return cls(stages=_default_stages(n), **kw)

    @classmethod
    def desk(cls, n: int = 1024, in_dim: int = 6) -> "GeometryBranchConfig":
        chans = [32, 48, 64, 96]
        # small inputs drop the coarsest levels rather than walk on a handful of points
        stages = [StageConfig(n // 4 ** i, 16, 1, 1, c) for i, c in enumerate(chans) if i == 0 or n // 4 ** i >= 16]
        return cls(in_dim=in_dim, embed_dim=32, stages=stages, out_dim=64)

    def check(self, n_points: int | None = None) -> None:
        if self.in_dim not in (3, 6, 24):
            raise ConfigError(f"in_dim must be 3, 6 or 24, got {self.in_dim}")
        pts = [s.points for s in self.stages]
        if any(b >= a for a, b in zip(pts, pts[1:])):
            raise ConfigError(f"stage point counts must strictly decrease: {pts}")
        prev = n_points if n_points is not None else pts[0]
        for s in self.stages:
            if s.k > prev:
                raise ConfigError(f"stage k={s.k} exceeds the {prev} points it groups from")
            prev = s.points
        if n_points is not None and n_points < pts[0]:
            raise ConfigError(f"input has {n_points} cells but the first stage needs {pts[0]}")

    def to_dict(self) -> dict:
        return asdict(self)


class GeometricAffine(nn.Module):
    """alpha * (neighbors - center) / (sigma + eps) + beta.

    sigma is one scalar per sample: the standard deviation of every grouped
    difference entry together.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        if eps <= 0:
            raise ConfigError("epsilon must be positive")
        self.alpha = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, neighbor_feats, center_feats):
        return geometric_affine(neighbor_feats, center_feats, self.alpha, self.beta, self.eps)


def geometric_affine(neighbor_feats, center_feats, alpha=1.0, beta=0.0, eps: float = 1e-5):
    """neighbor_feats (..., m, k, C), center_feats (..., m, C) -> (..., m, k, C)."""
    d = neighbor_feats - center_feats.unsqueeze(-2)
    lead = d.shape[:-3]
    sigma = d.reshape(*lead, -1).std(dim=-1, correction=0).reshape(*lead, 1, 1, 1)
    return alpha * d / (sigma + eps) + beta


class ResPBlock(nn.Module):
    """x + BN(W2 relu(BN(W1 x))); zeroing the last norm's affine makes it the identity."""

    def __init__(self, channels: int, expansion: float = 1.0):
        super().__init__()
        hidden = max(1, int(channels * expansion))
        self.net1 = SharedMLP(channels, hidden, act=True)
        self.net2 = SharedMLP(hidden, channels, act=False)

    def forward(self, x):
        return x + self.net2(self.net1(x))


class GeometryStage(nn.Module):
    def __init__(self, c_in: int, cfg: StageConfig, eps: float):
        super().__init__()
        self.cfg = cfg
        grouped = c_in + 3
        self.affine = GeometricAffine(grouped, eps)
        self.transfer = SharedMLP(2 * grouped, cfg.channels)
        self.pre = nn.Sequential(*[ResPBlock(cfg.channels) for _ in range(cfg.pre_blocks)])
        self.pos = nn.Sequential(*[ResPBlock(cfg.channels) for _ in range(cfg.pos_blocks)])

    def forward(self, xyz, feats):
        B, M, _ = xyz.shape
        if self.cfg.points < M:
            idx = farthest_point_sample(xyz, self.cfg.points)
            new_xyz, center = gather_points(xyz, idx), gather_points(feats, idx)
        else:
            new_xyz, center = xyz, feats
        nb = knn(new_xyz, xyz, self.cfg.k)
        neighbors = torch.cat([gather_points(feats, nb), gather_points(xyz, nb)], dim=-1)
        anchor = torch.cat([center, new_xyz], dim=-1)
        g = self.affine(neighbors, anchor)
        g = torch.cat([g, anchor.unsqueeze(-2).expand_as(g)], dim=-1)
        g = self.pre(self.transfer(g))
        g = g.max(dim=-2).values
        return new_xyz, self.pos(g)


class GeometryBranch(nn.Module):
    """Encoder stages then inverse-distance decoder with skip links, one row per input cell."""

    def __init__(self, cfg: GeometryBranchConfig):
        super().__init__()
        cfg.check()
        self.cfg = cfg
        self.embed = SharedMLP(cfg.in_dim, cfg.embed_dim)
        stages, c = [], cfg.embed_dim
        for s in cfg.stages:
            stages.append(GeometryStage(c, s, cfg.eps))
            c = s.channels
        self.stages = nn.ModuleList(stages)
        chans = [cfg.embed_dim] + [s.channels for s in cfg.stages]
        # decoder walks back up: level i receives level i+1 and its own skip
        dec, c_up = [], chans[-1]
        for i in range(len(cfg.stages) - 1, -1, -1):
            c_out = chans[i]
            dec.append(nn.Sequential(SharedMLP(c_up + chans[i], c_out), ResPBlock(c_out)))
            c_up = c_out
        self.decoder = nn.ModuleList(dec)
        if cfg.global_concat:
            self.global_proj = SharedMLP(c_up + chans[-1], c_up)
        self.out = SharedMLP(c_up, cfg.out_dim)

    def forward(self, feats, xyz):
        """feats (B, N, in_dim), xyz (B, N, 3) barycenters -> (B, N, out_dim)."""
        if feats.shape[-1] != self.cfg.in_dim:
            raise ConfigError(f"geometry branch expects {self.cfg.in_dim}-dim features, got {feats.shape[-1]}")
        self.cfg.check(feats.shape[1])
        x = self.embed(feats)
        levels = [(xyz, x)]
        for stage in self.stages:
            xyz, x = stage(*levels[-1])
            levels.append((xyz, x))
        up_xyz, up = levels[-1]
        for block, (skip_xyz, skip) in zip(self.decoder, reversed(levels[:-1])):
            if skip_xyz is up_xyz:
                carried = up
            else:
                carried = interpolate_features(skip_xyz, up_xyz, up, self.cfg.decoder_k)
            up = block(torch.cat([carried, skip], dim=-1))
            up_xyz = skip_xyz
        if self.cfg.global_concat:
            g = levels[-1][1].max(dim=1, keepdim=True).values.expand(-1, up.shape[1], -1)
            up = self.global_proj(torch.cat([up, g], dim=-1))
        return self.out(up)


def geometry_forward(cloud, cfg: GeometryBranchConfig, model: GeometryBranch | None = None) -> torch.Tensor:
    """Run the branch on a single CellCloud; builds a fresh eval-mode branch if none given."""
    model = model or GeometryBranch(cfg).eval()
    if cloud.mode.dim != cfg.in_dim:
        raise ConfigError(f"cloud mode {cloud.mode.value} has dim {cloud.mode.dim}, branch expects {cfg.in_dim}")
    dtype = next(model.parameters()).dtype
    f = torch.as_tensor(cloud.features, dtype=dtype).unsqueeze(0)
    p = torch.as_tensor(cloud.barycenters, dtype=dtype).unsqueeze(0)
    with torch.no_grad():
        return model(f, p)[0]
