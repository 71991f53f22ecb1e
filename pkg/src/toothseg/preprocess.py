"""Scan preprocessing: quadric decimation, kNN label transfer and cloud normalization."""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, DecimationError, ValidationError
from .mesh import CellCloud, TriangleMesh, build_cell_features

logger = logging.getLogger(__name__)


@dataclass
class DecimationConfig:
    target_cells: int = 16000
    preserve_boundary: bool = True
    max_quadric_error: float | None = None
    boundary_weight: float = 1000.0

    def check(self, n_faces: int) -> None:
        if self.target_cells < 4:
            raise ConfigError(f"target_cells must be >= 4, got {self.target_cells}")
        if self.target_cells > n_faces:
            raise ConfigError(f"target_cells {self.target_cells} exceeds input face count {n_faces}")


@dataclass
class LabelTransferConfig:
    k: int = 3
    tie_break: str = "lowest_class_id"

    def check(self) -> None:
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.tie_break != "lowest_class_id":
            raise ConfigError(f"unsupported tie_break {self.tie_break!r}")


# --------------------------------------------------------------------------
# quadric decimation
#
# A quadric is stored as its 10 upper-triangle coefficients of the symmetric
# 4x4 matrix built from plane (a, b, c, d):
#   (aa, ab, ac, ad, bb, bc, bd, cc, cd, dd)


def _plane_quadrics(normals: np.ndarray, offsets: np.ndarray, weights: np.ndarray) -> np.ndarray:
    a, b, c = normals[:, 0], normals[:, 1], normals[:, 2]
    d = offsets
    q = np.stack([a * a, a * b, a * c, a * d, b * b, b * c, b * d, c * c, c * d, d * d], axis=1)
    return q * weights[:, None]


def _solve_position(q, p1, p2):
    """Minimizer of v^T Q v (and its error); falls back to endpoints/midpoint when singular."""
    a00, a01, a02, b0, a11, a12, b1, a22, b2, c = q
    det = (a00 * (a11 * a22 - a12 * a12) - a01 * (a01 * a22 - a12 * a02) + a02 * (a01 * a12 - a11 * a02))
    scale = abs(a00) + abs(a11) + abs(a22)
    if scale > 0 and abs(det) > 1e-10 * scale ** 3:
        inv = 1.0 / det
        # Cramer's rule on A x = -b
        x = -(b0 * (a11 * a22 - a12 * a12) - a01 * (b1 * a22 - a12 * b2) + a02 * (b1 * a12 - a11 * b2)) * inv
        y = -(a00 * (b1 * a22 - a12 * b2) - b0 * (a01 * a22 - a12 * a02) + a02 * (a01 * b2 - b1 * a02)) * inv
        z = -(a00 * (a11 * b2 - b1 * a12) - a01 * (a01 * b2 - b1 * a02) + b0 * (a01 * a12 - a11 * a02)) * inv
        cands = [(x, y, z)]
    else:
        mid = ((p1[0] + p2[0]) * 0.5, (p1[1] + p2[1]) * 0.5, (p1[2] + p2[2]) * 0.5)
        cands = [tuple(p1), tuple(p2), mid]
    best = None
    for x, y, z in cands:
        err = (a00 * x * x + 2 * a01 * x * y + 2 * a02 * x * z + 2 * b0 * x
               + a11 * y * y + 2 * a12 * y * z + 2 * b1 * y
               + a22 * z * z + 2 * b2 * z + c)
        if best is None or err < best[0]:
            best = (err, (x, y, z))
    err, pos = best
    return max(err, 0.0), pos


def _tri_cross(p0, p1, p2):
    ux, uy, uz = p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]
    vx, vy, vz = p2[0] - p0[0], p2[1] - p0[1], p2[2] - p0[2]
    return (uy * vz - uz * vy, uz * vx - ux * vz, ux * vy - uy * vx)


def _initial_quadrics(vertices, faces, cfg: DecimationConfig):
    tri = vertices[faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    area2 = np.linalg.norm(cross, axis=1)
    n = np.zeros_like(cross)
    ok = area2 > 0
    n[ok] = cross[ok] / area2[ok, None]
    d = -np.einsum("ij,ij->i", n, tri[:, 0])
    fq = _plane_quadrics(n, d, 0.5 * area2)
    Q = np.zeros((len(vertices), 10))
    for j in range(3):
        np.add.at(Q, faces[:, j], fq)

    # undirected edges with their face multiplicity
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    owner = np.tile(np.arange(len(faces)), 3)
    e_sorted = np.sort(e, axis=1)
    uniq, inv, counts = np.unique(e_sorted, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    boundary_edges = uniq[counts == 1]
    is_boundary_vertex = np.zeros(len(vertices), dtype=bool)
    is_boundary_vertex[boundary_edges.ravel()] = True

    if cfg.preserve_boundary and len(boundary_edges):
        bmask = counts[inv] == 1
        be = e[bmask]
        bf = owner[bmask]
        p0, p1 = vertices[be[:, 0]], vertices[be[:, 1]]
        edge = p1 - p0
        length = np.linalg.norm(edge, axis=1)
        # constraint plane contains the edge and is perpendicular to its face
        pn = np.cross(edge, n[bf])
        pl = np.linalg.norm(pn, axis=1)
        good = pl > 0
        pn[good] /= pl[good, None]
        pd = -np.einsum("ij,ij->i", pn, p0)
        bq = _plane_quadrics(pn[good], pd[good], cfg.boundary_weight * length[good] ** 2)
        np.add.at(Q, be[good, 0], bq)
        np.add.at(Q, be[good, 1], bq)
    return Q, uniq, is_boundary_vertex


def decimate_quadric(mesh: TriangleMesh, cfg: DecimationConfig | None = None) -> TriangleMesh:
    """Garland-Heckbert edge-collapse simplification down to ``cfg.target_cells`` faces.

    Collapses are taken cheapest-first from a heap with lazy invalidation.
    Collapses that would flip a face normal, break the link condition or pinch
    the boundary are rejected. The result has between target and target + 1
    faces. Vertex labels are dropped.
    """
    cfg = cfg or DecimationConfig()
    mesh.validate()
    cfg.check(mesh.n_faces)
    if mesh.n_faces <= cfg.target_cells + 1:
        return TriangleMesh(mesh.vertices.copy(), mesh.faces.copy())

    Qarr, edges, is_bnd = _initial_quadrics(mesh.vertices, mesh.faces, cfg)
    pos = mesh.vertices.tolist()
    Q = [tuple(q) for q in Qarr.tolist()]
    faces = mesh.faces.tolist()
    face_alive = [True] * len(faces)
    vf = [set() for _ in range(len(pos))]
    for fi, (a, b, c) in enumerate(faces):
        vf[a].add(fi)
        vf[b].add(fi)
        vf[c].add(fi)
    is_bnd = is_bnd.tolist()
    stamp = [0] * len(pos)
    alive = [True] * len(pos)

    def edge_entry(u, v):
        q = tuple(x + y for x, y in zip(Q[u], Q[v]))
        err, p = _solve_position(q, pos[u], pos[v])
        return (err, u, v, stamp[u], stamp[v], p, q)

    heap = [edge_entry(int(u), int(v)) for u, v in edges]
    heapq.heapify(heap)

    def neighbors(u):
        out = set()
        for f in vf[u]:
            out.update(faces[f])
        out.discard(u)
        return out

    n_faces = len(faces)
    limit = cfg.max_quadric_error
    while n_faces >= cfg.target_cells + 2:
        if not heap:
            raise DecimationError(
                f"ran out of valid collapses at {n_faces} faces (target {cfg.target_cells})", achieved=n_faces
            )
        err, u, v, su, sv, p, q = heapq.heappop(heap)
        if not (alive[u] and alive[v]) or stamp[u] != su or stamp[v] != sv:
            continue
        if limit is not None and err > limit:
            raise DecimationError(
                f"next collapse error {err:.3g} exceeds max_quadric_error at {n_faces} faces", achieved=n_faces
            )
        shared = vf[u] & vf[v]
        if not shared:
            continue
        if len(neighbors(u) & neighbors(v)) != len(shared):
            continue
        if len(shared) == 2 and is_bnd[u] and is_bnd[v]:
            continue
        if not _collapse_keeps_orientation(u, v, p, shared, vf, faces, pos):
            continue

        for f in shared:
            face_alive[f] = False
            for w in faces[f]:
                if w != u and w != v:
                    vf[w].discard(f)
        vf[u] -= shared
        for f in vf[v] - shared:
            tri = faces[f]
            tri[tri.index(v)] = u
            vf[u].add(f)
        vf[v] = set()
        alive[v] = False
        pos[u] = list(p)
        Q[u] = q
        is_bnd[u] = is_bnd[u] or is_bnd[v]
        stamp[u] += 1
        n_faces -= len(shared)
        for w in neighbors(u):
            a, b = (u, w) if u < w else (w, u)
            heapq.heappush(heap, edge_entry(a, b))

    kept = np.array([f for f, ok in zip(faces, face_alive) if ok], dtype=np.int64)
    used = np.unique(kept)
    remap = -np.ones(len(pos), dtype=np.int64)
    remap[used] = np.arange(len(used))
    out = TriangleMesh(np.asarray(pos, dtype=np.float64)[used], remap[kept])
    out.validate()
    logger.debug("decimated %d -> %d faces", mesh.n_faces, out.n_faces)
    return out


def _collapse_keeps_orientation(u, v, p, shared, vf, faces, pos) -> bool:
    for f in (vf[u] | vf[v]) - shared:
        tri = faces[f]
        old = [pos[w] for w in tri]
        new = [p if w == u or w == v else pos[w] for w in tri]
        n0 = _tri_cross(*old)
        n1 = _tri_cross(*new)
        dot = n0[0] * n1[0] + n0[1] * n1[1] + n0[2] * n1[2]
        l0 = math.sqrt(n0[0] ** 2 + n0[1] ** 2 + n0[2] ** 2)
        l1 = math.sqrt(n1[0] ** 2 + n1[1] ** 2 + n1[2] ** 2)
        if l1 <= 1e-12 * max(l0, 1e-300) or dot <= 0.0:
            return False
    return True


# --------------------------------------------------------------------------
# label transfer


def transfer_labels_knn(source_points, source_labels, target, cfg: LabelTransferConfig | None = None) -> np.ndarray:
    """Majority label of the k nearest source points for every cell barycenter.

    Ties go to the lowest label value.
    """
    cfg = cfg or LabelTransferConfig()
    cfg.check()
    src = np.asarray(source_points, dtype=np.float64)
    lab = np.asarray(source_labels, dtype=np.int64)
    if len(src) == 0:
        raise ValidationError("label transfer needs a non-empty source point set")
    if len(src) != len(lab):
        raise ValidationError(f"{len(src)} source points but {len(lab)} labels")
    if len(src) < cfg.k:
        raise ValidationError(f"need at least k={cfg.k} source points, got {len(src)}")
    if lab.min() < 0:
        raise ValidationError("source labels must be non-negative")
    query = target.barycenters if isinstance(target, CellCloud) else np.asarray(target, dtype=np.float64)
    _, idx = cKDTree(src).query(query, k=cfg.k)
    idx = np.asarray(idx).reshape(len(query), cfg.k)
    nb = lab[idx]
    counts = np.zeros((len(query), int(lab.max()) + 1), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(len(query)), cfg.k), nb.ravel()), 1)
    return counts.argmax(axis=1)


# --------------------------------------------------------------------------
# normalization


@dataclass
class NormalizationRecord:
    centroid: np.ndarray
    scale: float

    def apply(self, points):
        return (np.asarray(points, dtype=np.float64) - self.centroid) / self.scale

    def invert(self, points):
        return np.asarray(points, dtype=np.float64) * self.scale + self.centroid

    def to_dict(self) -> dict:
        return {"centroid": [float(x) for x in self.centroid], "scale": float(self.scale)}

    @classmethod
    def from_dict(cls, d) -> "NormalizationRecord":
        return cls(np.asarray(d["centroid"], dtype=np.float64), float(d["scale"]))

    @classmethod
    def identity(cls) -> "NormalizationRecord":
        return cls(np.zeros(3), 1.0)


def normalize_cloud(cloud: CellCloud, eps: float = 1e-12) -> tuple[CellCloud, NormalizationRecord]:
    """Center barycenters at the origin and scale them into the unit ball.

    Every coordinate block of the features gets the same transform; normal
    blocks are left alone.
    """
    if len(cloud) < 1:
        raise ValidationError("cannot normalize an empty cloud")
    c = cloud.barycenters.mean(axis=0)
    r = float(np.linalg.norm(cloud.barycenters - c, axis=1).max())
    if r <= eps:
        raise ValidationError("all barycenters coincide; normalization scale would be zero")
    rec = NormalizationRecord(c, r)
    return apply_normalization(cloud, rec), rec


def apply_normalization(cloud: CellCloud, rec: NormalizationRecord) -> CellCloud:
    feats = cloud.features.copy()
    for blk in cloud.mode.coord_blocks:
        feats[:, blk] = rec.apply(feats[:, blk])
    return cloud.replace(features=feats, barycenters=rec.apply(cloud.barycenters))


# --------------------------------------------------------------------------


def preprocess_scan(
    mesh: TriangleMesh,
    mode="B_N",
    decimation: DecimationConfig | None = None,
    transfer: LabelTransferConfig | None = None,
    normalize: bool = True,
    barycenter_normal: str = "face",
):
    """Raw labeled scan -> (decimated mesh, network-ready cloud, normalization record).

    Labels come from the original vertices (not carried through collapses).
    Expects ``mesh.vertex_labels`` to already be class ids when present.
    """
    decimation = decimation or DecimationConfig()
    if mesh.n_faces > decimation.target_cells:
        dec = decimate_quadric(mesh, decimation)
    else:
        dec = TriangleMesh(mesh.vertices.copy(), mesh.faces.copy())
    cloud = build_cell_features(dec, mode, barycenter_normal=barycenter_normal)
    if mesh.vertex_labels is not None:
        cloud.labels = transfer_labels_knn(mesh.vertices, mesh.vertex_labels, cloud, transfer)
    if normalize:
        cloud, rec = normalize_cloud(cloud)
    else:
        rec = NormalizationRecord.identity()
    return dec, cloud, rec
