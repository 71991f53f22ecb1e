"""Random rigid-similarity augmentation of cell clouds."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ValidationError
from .mesh import CellCloud
from .preprocess import normalize_cloud


@dataclass
class AugmentConfig:
    count: int = 40
    rotation_max_deg: tuple[float, float, float] = (30.0, 30.0, 30.0)
    translation_max: float = 0.1
    scale_range: tuple[float, float] = (0.8, 1.2)
    seed: int = 0
    # re-centering after the transform would undo translation and rescaling
    renormalize: bool = False

    def __post_init__(self):
        if np.isscalar(self.rotation_max_deg):
            self.rotation_max_deg = (float(self.rotation_max_deg),) * 3
        self.rotation_max_deg = tuple(float(x) for x in self.rotation_max_deg)
        self.scale_range = tuple(float(x) for x in self.scale_range)

    def check(self) -> None:
        lo, hi = self.scale_range
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}")
        if not 0 < lo <= hi:
            raise ConfigError(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")
        if self.translation_max < 0 or min(self.rotation_max_deg) < 0:
            raise ConfigError("rotation and translation ranges must be non-negative")


def rotation_matrix(angles_rad) -> np.ndarray:
    """R = Rz @ Ry @ Rx for per-axis angles (x, y, z)."""
    ax, ay, az = angles_rad
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def apply_rigid_similarity(cloud: CellCloud, R, t, s: float) -> CellCloud:
    """x -> s R x + t on coordinate blocks, n -> R n (renormalized) on normal blocks."""
    R = np.asarray(R, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64).reshape(3)
    if R.shape != (3, 3):
        raise ValidationError(f"rotation must be 3 x 3, got {R.shape}")
    if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1.0) > 1e-6:
        raise ValidationError("rotation must be orthogonal with determinant +1")
    if not s > 0:
        raise ValidationError(f"scale must be positive, got {s}")
    feats = cloud.features.copy()
    for blk in cloud.mode.coord_blocks:
        feats[:, blk] = s * feats[:, blk] @ R.T + t
    for blk in cloud.mode.normal_blocks:
        n = feats[:, blk] @ R.T
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        # zero normals of degenerate cells stay zero
        feats[:, blk] = np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)
    bary = s * cloud.barycenters @ R.T + t
    return cloud.replace(features=feats, barycenters=bary)


def generate_augmentations(cloud: CellCloud, cfg: AugmentConfig | None = None) -> list[CellCloud]:
    cfg = cfg or AugmentConfig()
    cfg.check()
    rng = np.random.default_rng(cfg.seed)
    lim = np.deg2rad(np.asarray(cfg.rotation_max_deg))
    out = []
    for _ in range(cfg.count):
        angles = rng.uniform(-lim, lim)
        t = rng.uniform(-cfg.translation_max, cfg.translation_max, size=3)
        s = rng.uniform(*cfg.scale_range)
        aug = apply_rigid_similarity(cloud, rotation_matrix(angles), t, s)
        if cfg.renormalize:
            aug, _ = normalize_cloud(aug)
        out.append(aug)
    return out
