"""Procedural test geometry: labeled lower-jaw strips and icospheres."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError
from .mesh import TriangleMesh

# lower-jaw FDI positions from the midline outwards: central incisor .. 2nd molar
_POSITIONS = [1, 2, 3, 4, 5, 6, 7]
# mesiodistal width (mm), crown height (mm), lingual-buccal half extent (fraction of strip)
_TOOTH_SHAPE = {
    1: (5.4, 7.0, 0.45),
    2: (5.9, 7.0, 0.50),
    3: (6.9, 8.5, 0.60),
    4: (7.0, 6.5, 0.65),
    5: (7.2, 6.0, 0.68),
    6: (11.0, 5.5, 0.78),
    7: (10.5, 5.0, 0.76),
}


def _grid_size(cells_target: int, aspect: float) -> tuple[int, int]:
    # faces = 2 (nu - 1)(nv - 1) with (nu - 1) ~ aspect * (nv - 1)
    nv1 = max(2, int(math.ceil(math.sqrt(cells_target / (2.0 * aspect)))))
    nu1 = max(2, int(math.ceil(cells_target / (2.0 * nv1))))
    return nu1 + 1, nv1 + 1


def _crown_height(kind: int, du: np.ndarray, dt: np.ndarray, height: float) -> np.ndarray:
    """Height profile over the unit footprint disc (du, dt in [-1, 1])."""
    r2 = du ** 2 + dt ** 2
    inside = r2 < 1.0
    base = np.where(inside, np.sqrt(np.clip(1.0 - r2, 0.0, None)), 0.0)
    if kind in (1, 2):
        # incisors: thin blade raised along the arch direction
        prof = base * (1.0 - 0.5 * np.abs(dt))
    elif kind == 3:
        # canine: single pointed cusp
        prof = np.clip(1.0 - np.sqrt(r2), 0.0, None) ** 0.8
    elif kind in (4, 5):
        cusp = np.exp(-((du) ** 2 + (dt - 0.35) ** 2) / 0.08)
        prof = base * 0.75 + 0.35 * cusp * inside
    else:
        # molars: four cusps on a flat crown
        cusps = sum(
            np.exp(-((du - a) ** 2 + (dt - b) ** 2) / 0.06)
            for a in (-0.45, 0.45) for b in (-0.4, 0.4)
        )
        prof = (base ** 0.5) * 0.7 + 0.3 * cusps * inside
    return height * prof


def generate_synthetic_jaw(seed: int = 0, n_teeth: int = 14, cells_target: int = 20000) -> TriangleMesh:
    """U-shaped gum strip with one raised crown per tooth, labeled with FDI codes.

    Teeth are placed outward from the midline on both sides (quadrant 4 on the
    negative side, 3 on the positive side); missing teeth are chosen by
    ``seed``. Vertex labels are raw FDI codes with 0 for gingiva. The surface
    is a height field over a regular grid with ``~cells_target`` faces.
    """
    if not 1 <= n_teeth <= 14:
        raise ConfigError(f"n_teeth must be in [1, 14], got {n_teeth}")
    rng = np.random.default_rng(seed)

    slots = [(q, p) for q in (4, 3) for p in _POSITIONS]
    if n_teeth < 14:
        keep = np.sort(rng.choice(14, size=n_teeth, replace=False))
        present = {slots[i] for i in keep}
    else:
        present = set(slots)

    # arc-length placement from the midline, identical gaps on both sides
    gap = 0.4
    centers, half = {}, {}
    jitter = {p: 1.0 + 0.05 * rng.uniform(-1, 1) for p in _POSITIONS}
    a = gap / 2
    for p in _POSITIONS:
        w = _TOOTH_SHAPE[p][0] * jitter[p]
        centers[p] = a + w / 2
        half[p] = w / 2
        a += w + gap
    arch_half_len = a + 4.0  # gum margin behind the last molar

    strip_w = 11.0
    nu, nv = _grid_size(cells_target, aspect=2 * arch_half_len / strip_w)
    s = np.linspace(-arch_half_len, arch_half_len, nu)  # signed arc length
    t = np.linspace(-1.0, 1.0, nv)  # lingual (-1) .. buccal (+1)
    S, T = np.meshgrid(s, t, indexing="ij")

    # arch centerline: ellipse arc parametrized approximately by arc length
    radius_x, radius_y = 24.0, 28.0
    theta = S / (0.5 * (radius_x + radius_y))
    cx, cy = radius_x * np.sin(theta), -radius_y * np.cos(theta)
    tx, ty = radius_x * np.cos(theta), radius_y * np.sin(theta)
    tn = np.hypot(tx, ty)
    nx, ny = ty / tn, -tx / tn  # outward (buccal) direction in the xy-plane
    X = cx + nx * T * strip_w / 2
    Y = cy + ny * T * strip_w / 2
    Z = 3.0 * (1.0 - T ** 2) + 0.001 * S ** 2

    labels = np.zeros(S.shape, dtype=np.int64)
    for (q, p) in slots:
        if (q, p) not in present:
            continue
        _, height, tw = _TOOTH_SHAPE[p]
        sign = -1.0 if q == 4 else 1.0
        du = (S - sign * centers[p]) / (half[p] * 0.92)
        dt = (T - 0.05) / tw
        foot = du ** 2 + dt ** 2 < 1.0
        h = height * (1.0 + 0.05 * rng.uniform(-1, 1))
        Z = Z + _crown_height(p, du, dt, h) * foot
        labels[foot] = 10 * q + p

    verts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    idx = np.arange(nu * nv).reshape(nu, nv)
    v00, v01 = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    v10, v11 = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    faces = np.concatenate([np.stack([v00, v10, v11], 1), np.stack([v00, v11, v01], 1)])
    # orient faces so normals point up (+z) on the flat gum
    tri = verts[faces]
    nz = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])[:, 2]
    if np.median(nz) < 0:
        faces = faces[:, [0, 2, 1]]
    return TriangleMesh(verts, faces, labels.ravel()).validate()


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriangleMesh:
    """Subdivided icosahedron; 20 * 4**subdivisions faces, outward CCW winding."""
    phi = (1 + 5 ** 0.5) / 2
    verts = [
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriangleMesh(np.array(verts) * radius, np.array(faces)).validate()
