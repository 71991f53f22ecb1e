from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from ..errors import ConfigError, ValidationError

NUM_CLASSES = 8


@dataclass
class HeadConfig:
    in_dim_a: int = 256
    in_dim_b: int = 256
    hidden: int = 256
    classes: int = NUM_CLASSES
    dropout: float = 0.5

    def check(self) -> None:
        if self.classes != NUM_CLASSES:
            raise ConfigError(f"the tooth task has {NUM_CLASSES} classes, got {self.classes}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.in_dim_a + self.in_dim_b < 1:
            raise ConfigError("head needs at least one input channel")

    def to_dict(self) -> dict:
        return asdict(self)


class SegHead(nn.Module):
    """Concatenate per-cell branch features; two kernel-1 convolutions to class logits."""

    def __init__(self, cfg: HeadConfig):
        super().__init__()
        cfg.check()
        self.cfg = cfg
        self.conv1 = nn.Conv1d(cfg.in_dim_a + cfg.in_dim_b, cfg.hidden, kernel_size=1, bias=False)
        self.norm = nn.BatchNorm1d(cfg.hidden)
        self.act = nn.ReLU()
        self.drop = nn.Dropout(cfg.dropout)
        self.conv2 = nn.Conv1d(cfg.hidden, cfg.classes, kernel_size=1)

    def forward(self, feats_a, feats_b=None):
        parts = [f for f in (feats_a, feats_b) if f is not None]
        if len(parts) == 2 and parts[0].shape[:-1] != parts[1].shape[:-1]:
            raise ValidationError(f"row count mismatch: {tuple(parts[0].shape)} vs {tuple(parts[1].shape)}")
        x = torch.cat(parts, dim=-1).transpose(1, 2)  # (B, C, N)
        x = self.drop(self.act(self.norm(self.conv1(x))))
        return self.conv2(x).transpose(1, 2)


def fuse_and_classify(feats_a, feats_b, cfg: HeadConfig, head: SegHead | None = None):
    """(N, Da) and (N, Db) -> (N, 8) logits; batched (B, N, D) inputs are passed through."""
    if feats_b is not None and feats_a.shape[-2] != feats_b.shape[-2]:
        raise ValidationError(f"row counts differ: {feats_a.shape[-2]} vs {feats_b.shape[-2]}")
    head = head or SegHead(cfg).to(feats_a.dtype)
    squeeze = feats_a.dim() == 2
    if squeeze:
        feats_a = feats_a.unsqueeze(0)
        feats_b = None if feats_b is None else feats_b.unsqueeze(0)
    out = head(feats_a, feats_b)
    return out[0] if squeeze else out
