"""Triangle mesh container and the per-cell geometric quantities derived from it."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ValidationError


class Representation(str, enum.Enum):
    """How a mesh cell is summarized as a feature vector.

    B      -> barycenter (3)
    B_N    -> barycenter + normal at the barycenter (6)
    BVN24  -> v0, v1, v2, barycenter, then the four matching normals (24)
    """

    B = "B"
    B_N = "B_N"
    BVN24 = "BVN24"

    @property
    def dim(self) -> int:
        return {"B": 3, "B_N": 6, "BVN24": 24}[self.value]

    @property
    def coord_blocks(self) -> list[slice]:
        n = {"B": 1, "B_N": 1, "BVN24": 4}[self.value]
        return [slice(3 * i, 3 * i + 3) for i in range(n)]

    @property
    def normal_blocks(self) -> list[slice]:
        if self is Representation.B:
            return []
        if self is Representation.B_N:
            return [slice(3, 6)]
        return [slice(12 + 3 * i, 15 + 3 * i) for i in range(4)]


def as_representation(mode) -> Representation:
    try:
        return Representation(mode.value if isinstance(mode, Representation) else mode)
    except ValueError:
        raise ConfigError(f"unknown representation mode {mode!r}; expected one of B, B_N, BVN24") from None


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    vertex_labels: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.vertex_labels is not None:
            self.vertex_labels = np.asarray(self.vertex_labels, dtype=np.int64)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def validate(self) -> "TriangleMesh":
        v, f = self.vertices, self.faces
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValidationError(f"vertices must be V x 3, got shape {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValidationError(f"faces must be F x 3, got shape {f.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("vertices contain non-finite coordinates")
        bad = np.flatnonzero(np.any((f < 0) | (f >= len(v)), axis=1))
        if len(bad):
            raise ValidationError(f"face {bad[0]} has a vertex index outside [0, {len(v)}): {f[bad[0]].tolist()}")
        rep = np.flatnonzero((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2]))
        if len(rep):
            raise ValidationError(f"face {rep[0]} repeats a vertex index: {f[rep[0]].tolist()}")
        if self.vertex_labels is not None and len(self.vertex_labels) != len(v):
            raise ValidationError(
                f"vertex label count {len(self.vertex_labels)} does not match vertex count {len(v)}"
            )
        return self

    def copy(self) -> "TriangleMesh":
        labels = None if self.vertex_labels is None else self.vertex_labels.copy()
        return TriangleMesh(self.vertices.copy(), self.faces.copy(), labels)


@dataclass
class CellCloud:
    """Network input: one feature row per mesh cell.

    ``barycenters`` is kept alongside ``features`` for every mode since grouping
    and curve walks always run on barycenter coordinates.
    """

    features: np.ndarray
    mode: Representation
    barycenters: np.ndarray
    labels: np.ndarray | None = None
    degenerate: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.mode = as_representation(self.mode)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.barycenters = np.asarray(self.barycenters, dtype=np.float64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.features)

    def validate(self, normal_atol: float = 1e-5) -> "CellCloud":
        n, d = self.features.shape
        if d != self.mode.dim:
            raise ValidationError(f"feature dim {d} does not match mode {self.mode.value} ({self.mode.dim})")
        if self.barycenters.shape != (n, 3):
            raise ValidationError(f"barycenters must be {n} x 3, got {self.barycenters.shape}")
        ok = np.ones(n, dtype=bool) if self.degenerate is None else ~self.degenerate
        for blk in self.mode.normal_blocks:
            norms = np.linalg.norm(self.features[ok, blk], axis=1)
            if len(norms) and np.max(np.abs(norms - 1.0)) > normal_atol:
                raise ValidationError(f"normal block {blk.start}:{blk.stop} is not unit length")
        if self.labels is not None:
            if len(self.labels) != n:
                raise ValidationError(f"label count {len(self.labels)} does not match cell count {n}")
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() > 7):
                raise ValidationError("cell labels must lie in [0, 7]")
        return self

    def replace(self, **changes) -> "CellCloud":
        kw = dict(
            features=self.features, mode=self.mode, barycenters=self.barycenters,
            labels=self.labels, degenerate=self.degenerate,
        )
        kw.update(changes)
        return CellCloud(**kw)


def compute_barycenters(mesh: TriangleMesh) -> np.ndarray:
    mesh.validate()
    return mesh.vertices[mesh.faces].mean(axis=1)


def _face_cross(mesh: TriangleMesh) -> np.ndarray:
    tri = mesh.vertices[mesh.faces]
    return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])


def compute_face_normals(mesh: TriangleMesh, return_degenerate: bool = False, eps: float = 1e-14):
    """Unit normals of (v1 - v0) x (v2 - v0).

    Zero-area faces get a zero normal; pass ``return_degenerate=True`` to also
    receive the boolean mask flagging them.
    """
    mesh.validate()
    cross = _face_cross(mesh)
    norm = np.linalg.norm(cross, axis=1)
    degenerate = norm <= eps
    normals = np.zeros_like(cross)
    normals[~degenerate] = cross[~degenerate] / norm[~degenerate, None]
    if return_degenerate:
        return normals, degenerate
    return normals


def compute_vertex_normals(mesh: TriangleMesh, return_isolated: bool = False, eps: float = 1e-14):
    """Area-weighted average of incident face normals, renormalized."""
    mesh.validate()
    # |cross| is twice the face area, so summing raw cross products weights by area
    cross = _face_cross(mesh)
    acc = np.zeros_like(mesh.vertices)
    for j in range(3):
        np.add.at(acc, mesh.faces[:, j], cross)
    norm = np.linalg.norm(acc, axis=1)
    isolated = norm <= eps
    normals = np.zeros_like(acc)
    normals[~isolated] = acc[~isolated] / norm[~isolated, None]
    if return_isolated:
        return normals, isolated
    return normals


def build_cell_features(mesh: TriangleMesh, mode, barycenter_normal: str = "face") -> CellCloud:
    """Summarize every face as a feature row.

    Column layout per mode:
      B      [bx by bz]
      B_N    [bx by bz | nx ny nz]
      BVN24  [v0 | v1 | v2 | b | n(v0) | n(v1) | n(v2) | n(b)]

    ``barycenter_normal`` selects n(b): ``"face"`` uses the face normal,
    ``"vertex"`` the renormalized mean of the three vertex normals.
    """
    mode = as_representation(mode)
    if barycenter_normal not in ("face", "vertex"):
        raise ConfigError(f"barycenter_normal must be 'face' or 'vertex', got {barycenter_normal!r}")
    bary = compute_barycenters(mesh)
    fn, degenerate = compute_face_normals(mesh, return_degenerate=True)
    vn = None
    if mode is Representation.BVN24 or barycenter_normal == "vertex":
        vn = compute_vertex_normals(mesh)
    if barycenter_normal == "vertex":
        m = vn[mesh.faces].sum(axis=1)
        nrm = np.linalg.norm(m, axis=1)
        degenerate = nrm <= 1e-14
        bn = np.zeros_like(m)
        bn[~degenerate] = m[~degenerate] / nrm[~degenerate, None]
    else:
        bn = fn

    if mode is Representation.B:
        feats = bary.copy()
    elif mode is Representation.B_N:
        feats = np.concatenate([bary, bn], axis=1)
    else:
        tri = mesh.vertices[mesh.faces]
        tri_n = vn[mesh.faces]
        feats = np.concatenate(
            [tri[:, 0], tri[:, 1], tri[:, 2], bary, tri_n[:, 0], tri_n[:, 1], tri_n[:, 2], bn], axis=1
        )
    return CellCloud(features=feats, mode=mode, barycenters=bary, degenerate=degenerate)


def select_representation(cloud: CellCloud, mode) -> CellCloud:
    """Re-express a cloud in a poorer representation (BVN24 -> B_N -> B).

    Works because every richer layout contains the barycenter and its normal.
    """
    mode = as_representation(mode)
    if mode is cloud.mode:
        return cloud
    f = cloud.features
    if cloud.mode is Representation.BVN24:
        b, n = f[:, 9:12], f[:, 21:24]
    elif cloud.mode is Representation.B_N:
        b, n = f[:, 0:3], f[:, 3:6]
    else:
        raise ConfigError(f"cannot derive {mode.value} features from a {cloud.mode.value} cloud")
    if mode is Representation.B:
        feats = b.copy()
    elif mode is Representation.B_N:
        feats = np.concatenate([b, n], axis=1)
    else:
        raise ConfigError(f"cannot derive {mode.value} features from a {cloud.mode.value} cloud")
    return cloud.replace(features=feats, mode=mode)
