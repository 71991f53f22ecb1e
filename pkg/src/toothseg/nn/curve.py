"""Curve branch: local relative-feature aggregation plus guided walks over barycenters.

Only relative positions enter the computation, so outputs do not change when
the whole cloud is translated.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ConfigError
from .ops import SharedMLP, farthest_point_sample, gather_points, interpolate_features, knn


@dataclass
class CICStageConfig:
    points: int
    channels: int


def _default_cic(n: int = 16000, min_points: int = 21) -> list[CICStageConfig]:
    # levels too coarse to hold a full neighborhood are dropped (only matters for small n)
    chans = [64, 128, 256, 512]
    return [CICStageConfig(n // 4 ** i, c) for i, c in enumerate(chans) if i == 0 or n // 4 ** i >= min_points]


@dataclass
class CurveBranchConfig:
    k: int = 20
    n_curves: int = 16
    curve_length: int = 8
    embed_dim: int = 32
    cic_stages: list[CICStageConfig] = field(default_factory=_default_cic)
    decoder_k: int = 3
    out_dim: int = 256

    def __post_init__(self):
        self.cic_stages = [s if isinstance(s, CICStageConfig) else CICStageConfig(**s) for s in self.cic_stages]

    @classmethod
    def for_points(cls, n: int, **kw) -> "CurveBranchConfig":
        k, n_curves = kw.get("k", cls.k), kw.get("n_curves", cls.n_curves)
        return cls(cic_stages=_default_cic(n, max(n_curves, k + 1)), **kw)

    @classmethod
    def desk(cls, n: int = 1024) -> "CurveBranchConfig":
        chans = [32, 48, 64, 96]
        # small inputs drop the coarsest levels rather than walk on a handful of points
        stages = [CICStageConfig(n // 4 ** i, c) for i, c in enumerate(chans) if i == 0 or n // 4 ** i >= 16]
        return cls(k=12, n_curves=16, curve_length=8, embed_dim=24, cic_stages=stages, out_dim=64)

    def check(self) -> None:
        if self.curve_length < 2:
            raise ConfigError(f"curve_length must be >= 2, got {self.curve_length}")
        if self.n_curves < 1:
            raise ConfigError(f"n_curves must be >= 1, got {self.n_curves}")
        pts = [s.points for s in self.cic_stages]
        if any(b >= a for a, b in zip(pts, pts[1:])):
            raise ConfigError(f"CIC stage point counts must strictly decrease: {pts}")
        if pts and min(pts) < max(self.n_curves, self.k + 1):
            raise ConfigError(f"every CIC stage needs at least {max(self.n_curves, self.k + 1)} points, got {pts}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CurveSet:
    """Walk result: ``indices`` (B, n_curves, L) plus the walked features (B, n_curves, L, C).

    ``features`` carries the straight-through gradient of the walk and is
    None when the set was built from indices alone.
    """

    indices: torch.Tensor
    features: torch.Tensor | None = None
    descriptors: torch.Tensor | None = None


class LPFA(nn.Module):
    """Max-pooled MLP over [f_j | f_j - f_i | p_j - p_i] for the k nearest neighbors."""

    def __init__(self, c_in: int, c_out: int, k: int):
        super().__init__()
        self.k = k
        self.mlp = nn.Sequential(SharedMLP(2 * c_in + 3, c_out), SharedMLP(c_out, c_out))

    def forward(self, xyz, feats, query_idx=None):
        B, M, _ = xyz.shape
        if self.k >= M:
            raise ConfigError(f"LPFA needs k < M, got k={self.k}, M={M}")
        if query_idx is None:
            q_xyz, q_feats = xyz, feats
        else:
            q_xyz, q_feats = gather_points(xyz, query_idx), gather_points(feats, query_idx)
        nb = knn(q_xyz, xyz, self.k)
        fj = gather_points(feats, nb)
        rel = gather_points(xyz, nb) - q_xyz.unsqueeze(-2)
        enc = torch.cat([fj, fj - q_feats.unsqueeze(-2), rel], dim=-1)
        return self.mlp(enc).max(dim=-2).values


def lpfa(barycenters, feats, k: int, module: LPFA | None = None, c_out: int = 32):
    """Functional LPFA on (M, 3) / (M, C) or batched tensors."""
    squeeze = barycenters.dim() == 2
    if squeeze:
        barycenters, feats = barycenters.unsqueeze(0), feats.unsqueeze(0)
    if k >= barycenters.shape[1]:
        raise ConfigError(f"LPFA needs k < M, got k={k}, M={barycenters.shape[1]}")
    module = module or LPFA(feats.shape[-1], c_out, k).to(barycenters.dtype)
    out = module(barycenters, feats)
    return out[0] if squeeze else out


class CurveGrouping(nn.Module):
    """Guided walks of fixed length starting at the best-scoring points.

    Each step scores the current point's neighbors against the walk state
    (running mean of visited features), masks the point just left, and moves
    to the argmax. The step feature is the hard pick in the forward pass with
    the softmax gradient in the backward pass, so train and eval forward
    values agree.
    """

    def __init__(self, channels: int, k: int, n_curves: int, curve_length: int):
        super().__init__()
        if curve_length < 2 or n_curves < 1:
            raise ConfigError("need curve_length >= 2 and n_curves >= 1")
        self.k, self.n_curves, self.curve_length = k, n_curves, curve_length
        self.score = nn.Linear(channels, 1)
        self.compat = nn.Sequential(nn.Linear(2 * channels, channels), nn.ReLU(), nn.Linear(channels, 1))

    def forward(self, xyz, feats) -> CurveSet:
        B, M, C = feats.shape
        if M < self.n_curves:
            raise ConfigError(f"need at least n_curves={self.n_curves} points, got {M}")
        if M <= self.k:
            raise ConfigError(f"need more than k={self.k} points, got {M}")
        adj = knn(xyz, xyz, self.k, exclude_self=True)  # (B, M, k)

        s = self.score(feats).squeeze(-1)
        start = s.topk(self.n_curves, dim=-1).indices  # (B, n)
        gate = torch.sigmoid(torch.gather(s, 1, start)).unsqueeze(-1)
        cur_feat = gather_points(feats, start) * gate
        idx = [start]
        walk = [cur_feat]
        state = cur_feat
        prev = torch.full_like(start, -1)
        cur = start
        for step in range(1, self.curve_length):
            nb_idx = torch.gather(adj, 1, cur.unsqueeze(-1).expand(-1, -1, self.k))  # (B, n, k)
            nb_feat = gather_points(feats, nb_idx)  # (B, n, k, C)
            logits = self.compat(torch.cat([nb_feat, state.unsqueeze(-2).expand_as(nb_feat)], -1)).squeeze(-1)
            if self.k > 1:
                logits = logits.masked_fill(nb_idx == prev.unsqueeze(-1), float("-inf"))
            soft = F.softmax(logits, dim=-1)
            pick = soft.argmax(dim=-1)
            hard = F.one_hot(pick, self.k).to(soft.dtype)
            w = hard - soft.detach() + soft
            cur_feat = (w.unsqueeze(-1) * nb_feat).sum(-2)
            nxt = torch.gather(nb_idx, 2, pick.unsqueeze(-1)).squeeze(-1)
            prev, cur = cur, nxt
            idx.append(cur)
            walk.append(cur_feat)
            state = state + (cur_feat - state) / (step + 1)
        return CurveSet(torch.stack(idx, dim=2), torch.stack(walk, dim=2))


def curve_grouping(feats, barycenters, cfg: CurveBranchConfig, module: CurveGrouping | None = None) -> CurveSet:
    cfg.check()
    squeeze = feats.dim() == 2
    if squeeze:
        feats, barycenters = feats.unsqueeze(0), barycenters.unsqueeze(0)
    M = feats.shape[1]
    if M < cfg.n_curves or M <= cfg.k:
        raise ConfigError(f"curve grouping needs M >= n_curves and M > k (M={M})")
    module = module or CurveGrouping(feats.shape[-1], cfg.k, cfg.n_curves, cfg.curve_length).to(feats.dtype)
    cs = module(barycenters, feats)
    if squeeze:
        cs = CurveSet(cs.indices[0], cs.features[0])
    return cs


class CurveAggregation(nn.Module):
    """Curve descriptors -> per-point attention -> residual fusion."""

    def __init__(self, channels: int):
        super().__init__()
        # few curves per sample: batch statistics over them are too noisy for a norm layer
        self.desc = nn.Sequential(nn.Linear(2 * channels, channels), nn.ReLU())
        self.query = nn.Linear(channels, channels, bias=False)
        self.key = nn.Linear(channels, channels, bias=False)
        self.value = nn.Linear(channels, channels, bias=False)
        self.fuse = nn.Sequential(SharedMLP(2 * channels, channels), SharedMLP(channels, channels, act=False))

    def descriptors(self, curves: CurveSet, feats):
        cf = curves.features if curves.features is not None else gather_points(feats, curves.indices)
        pooled = torch.cat([cf.mean(dim=-2), cf.max(dim=-2).values], dim=-1)
        return self.desc(pooled)

    def forward(self, curves: CurveSet, feats):
        desc = self.descriptors(curves, feats)  # (B, n, C)
        logits = self.query(feats) @ self.key(desc).transpose(-1, -2) / math.sqrt(feats.shape[-1])
        att = F.softmax(logits, dim=-1) @ self.value(desc)
        curves.descriptors = desc
        return feats + self.fuse(torch.cat([feats, att], dim=-1))


def curve_aggregation(curves: CurveSet, feats, module: CurveAggregation | None = None):
    squeeze = feats.dim() == 2
    if squeeze:
        feats = feats.unsqueeze(0)
        curves = CurveSet(
            curves.indices.unsqueeze(0), None if curves.features is None else curves.features.unsqueeze(0)
        )
    module = module or CurveAggregation(feats.shape[-1]).to(feats.dtype)
    out = module(curves, feats)
    return out[0] if squeeze else out


class CICBlock(nn.Module):
    """Optional downsampling, LPFA, curve walk and curve aggregation."""

    def __init__(self, c_in: int, c_out: int, points: int | None, k: int, n_curves: int, curve_length: int):
        super().__init__()
        self.points = points
        self.lpfa = LPFA(c_in, c_out, k)
        self.grouping = CurveGrouping(c_out, k, n_curves, curve_length)
        self.aggregation = CurveAggregation(c_out)

    def forward(self, xyz, feats):
        M = xyz.shape[1]
        if self.points is not None and self.points < M:
            idx = farthest_point_sample(xyz, self.points)
            new_xyz = gather_points(xyz, idx)
        else:
            idx, new_xyz = None, xyz
        f = self.lpfa(xyz, feats, query_idx=idx)
        curves = self.grouping(new_xyz, f)
        return new_xyz, self.aggregation(curves, f)


def cic_block(barycenters, feats, cfg: CurveBranchConfig, stage: int, block: CICBlock | None = None):
    st = cfg.cic_stages[stage]
    squeeze = barycenters.dim() == 2
    if squeeze:
        barycenters, feats = barycenters.unsqueeze(0), feats.unsqueeze(0)
    if st.points > barycenters.shape[1]:
        raise ConfigError(f"stage {stage} wants {st.points} points from {barycenters.shape[1]}")
    block = block or CICBlock(
        feats.shape[-1], st.channels, st.points, cfg.k, cfg.n_curves, cfg.curve_length
    ).to(feats.dtype)
    xyz, f = block(barycenters, feats)
    return (xyz[0], f[0]) if squeeze else (xyz, f)


class CurveBranch(nn.Module):
    def __init__(self, cfg: CurveBranchConfig):
        super().__init__()
        cfg.check()
        self.cfg = cfg
        # relative offsets only: no per-point input feature
        self.embed = LPFA(0, cfg.embed_dim, cfg.k)
        enc, c = [], cfg.embed_dim
        for st in cfg.cic_stages:
            enc.append(CICBlock(c, st.channels, st.points, cfg.k, cfg.n_curves, cfg.curve_length))
            c = st.channels
        self.encoder = nn.ModuleList(enc)
        chans = [cfg.embed_dim] + [s.channels for s in cfg.cic_stages]
        props, ups, c_up = [], [], chans[-1]
        for i in range(len(cfg.cic_stages) - 1, -1, -1):
            props.append(SharedMLP(c_up + chans[i], chans[i]))
            # the embedding level shares its points with the first CIC level, which already has one
            ups.append(CICBlock(chans[i], chans[i], None, cfg.k, cfg.n_curves, cfg.curve_length) if i else nn.Identity())
            c_up = chans[i]
        self.propagate = nn.ModuleList(props)
        self.up_cic = nn.ModuleList(ups)
        self.out = SharedMLP(c_up, cfg.out_dim)

    def forward(self, xyz):
        """xyz (B, N, >=3); only the first three columns are read."""
        xyz = xyz[..., :3]
        B, N, _ = xyz.shape
        if self.cfg.cic_stages[0].points > N:
            raise ConfigError(f"input has {N} points but the first CIC stage needs {self.cfg.cic_stages[0].points}")
        x = self.embed(xyz, xyz.new_zeros(B, N, 0))
        levels = [(xyz, x)]
        for block in self.encoder:
            levels.append(block(*levels[-1]))
        up_xyz, up = levels[-1]
        for prop, ucic, (skip_xyz, skip) in zip(self.propagate, self.up_cic, reversed(levels[:-1])):
            carried = up if skip_xyz is up_xyz else interpolate_features(skip_xyz, up_xyz, up, self.cfg.decoder_k)
            up = prop(torch.cat([carried, skip], dim=-1))
            if isinstance(ucic, CICBlock):
                _, up = ucic(skip_xyz, up)
            up_xyz = skip_xyz
        return self.out(up)


def curve_forward(barycenters, cfg: CurveBranchConfig, model: CurveBranch | None = None) -> torch.Tensor:
    """(N, >=3) array or tensor -> (N, out_dim); extra columns beyond the first three are ignored."""
    model = model or CurveBranch(cfg).eval()
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(barycenters, dtype=dtype)
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    with torch.no_grad():
        out = model(x)
    return out[0] if squeeze else out
