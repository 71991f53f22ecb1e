"""Scan ingestion, label taxonomy, dataset shards, manifests and prediction export."""

from __future__ import annotations

import json
import logging
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement

from .errors import ValidationError
from .mesh import CellCloud, TriangleMesh, as_representation
from .preprocess import NormalizationRecord

logger = logging.getLogger(__name__)

DATA_DIR_ENV = "BMS_DATA_DIR"


def data_root(override=None) -> Path | None:
    if override:
        return Path(override)
    env = os.environ.get(DATA_DIR_ENV)
    return Path(env) if env else None


# --------------------------------------------------------------------------
# label taxonomy


def _lower_jaw_fdi() -> dict[int, int]:
    # position 1 (central incisor) -> T7 ... position 7 (2nd molar) -> T1
    mapping = {0: 0}
    for quadrant in (3, 4):
        for pos in range(1, 8):
            mapping[10 * quadrant + pos] = 8 - pos
    return mapping


@dataclass
class LabelTaxonomy:
    mapping: dict[int, int] = field(default_factory=_lower_jaw_fdi)
    names: tuple[str, ...] = ("BG", "T1", "T2", "T3", "T4", "T5", "T6", "T7")

    def __post_init__(self):
        targets = set(self.mapping.values())
        if not targets <= set(range(8)):
            raise ValidationError(f"taxonomy maps onto {sorted(targets)}, expected a subset of 0..7")

    def map(self, raw) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.int64)
        codes = np.unique(raw)
        unknown = [int(c) for c in codes if int(c) not in self.mapping]
        if unknown:
            raise ValidationError(f"label codes not in taxonomy: {unknown}")
        lut = {int(c): self.mapping[int(c)] for c in codes}
        out = np.empty_like(raw)
        for c, v in lut.items():
            out[raw == c] = v
        return out


def map_labels(raw, taxonomy: LabelTaxonomy | None = None) -> np.ndarray:
    """Raw per-vertex FDI codes -> class ids in [0, 7]; 38/48 and other unknown codes are rejected."""
    return (taxonomy or LabelTaxonomy()).map(raw)


# --------------------------------------------------------------------------
# meshes


def _read_obj(path: Path):
    verts, faces, fanned = [], [], 0
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ValidationError(f"{path}:{ln}: vertex needs 3 coordinates")
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                try:
                    idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                except ValueError:
                    raise ValidationError(f"{path}:{ln}: cannot parse face {line.strip()!r}") from None
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                if len(idx) < 3:
                    raise ValidationError(f"{path}:{ln}: face with fewer than 3 vertices")
                if len(idx) > 3:
                    fanned += 1
                for j in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[j], idx[j + 1]])
    return np.asarray(verts, dtype=np.float64).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3), fanned


def _read_ply(path: Path):
    try:
        ply = PlyData.read(str(path))
    except Exception as exc:
        raise ValidationError(f"cannot parse PLY {path}: {exc}") from None
    v = ply["vertex"]
    verts = np.stack([np.asarray(v["x"], np.float64), np.asarray(v["y"], np.float64), np.asarray(v["z"], np.float64)], 1)
    faces, fanned = [], 0
    if "face" in ply:
        fe = ply["face"]
        key = "vertex_indices" if "vertex_indices" in fe.data.dtype.names else "vertex_index"
        for poly in fe[key]:
            poly = [int(i) for i in poly]
            if len(poly) > 3:
                fanned += 1
            for j in range(1, len(poly) - 1):
                faces.append([poly[0], poly[j], poly[j + 1]])
    return verts, np.asarray(faces, dtype=np.int64).reshape(-1, 3), fanned


def read_mesh(path) -> TriangleMesh:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        v, f, fanned = _read_obj(path)
    elif suffix == ".ply":
        v, f, fanned = _read_ply(path)
    else:
        raise ValidationError(f"unsupported mesh format {suffix!r}; use .obj or .ply")
    if fanned:
        warnings.warn(f"{path}: {fanned} polygon faces fan-triangulated", stacklevel=2)
    return TriangleMesh(v, f).validate()


def write_mesh(path, mesh: TriangleMesh, face_colors: np.ndarray | None = None) -> Path:
    """OBJ (coordinates written with round-trip precision) or binary PLY with float64 vertices."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".obj":
        if face_colors is not None:
            raise ValidationError("face colors need PLY output")
        with open(path, "w") as fh:
            for x, y, z in mesh.vertices.tolist():
                fh.write(f"v {x!r} {y!r} {z!r}\n")
            for a, b, c in (mesh.faces + 1).tolist():
                fh.write(f"f {a} {b} {c}\n")
        return path
    if path.suffix.lower() != ".ply":
        raise ValidationError(f"unsupported mesh format {path.suffix!r}")
    vert = np.empty(mesh.n_vertices, dtype=[("x", "f8"), ("y", "f8"), ("z", "f8")])
    vert["x"], vert["y"], vert["z"] = mesh.vertices.T
    fdt = [("vertex_indices", "i4", (3,))]
    if face_colors is not None:
        fdt += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    face = np.empty(mesh.n_faces, dtype=fdt)
    face["vertex_indices"] = mesh.faces
    if face_colors is not None:
        face["red"], face["green"], face["blue"] = np.asarray(face_colors, dtype=np.uint8).T
    PlyData([PlyElement.describe(vert, "vertex"), PlyElement.describe(face, "face")], byte_order="<").write(str(path))
    return path


def read_labels(path) -> np.ndarray:
    """JSON ``{"labels": [...]}`` or a bare JSON array; plain text with one label per line as fallback."""
    text = Path(path).read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        try:
            return np.asarray([int(t) for t in text.split()], dtype=np.int64)
        except ValueError:
            raise ValidationError(f"cannot parse label file {path}") from None
    if isinstance(obj, dict):
        if "labels" not in obj:
            raise ValidationError(f"label file {path} has no 'labels' entry")
        obj = obj["labels"]
    if not isinstance(obj, list):
        raise ValidationError(f"label file {path} must hold an array of integers")
    return np.asarray(obj, dtype=np.int64)


def write_labels(path, labels, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = dict(extra)
    payload["labels"] = [int(x) for x in np.asarray(labels).ravel()]
    path.write_text(json.dumps(payload))
    return path


def load_scan(mesh_path, label_path=None) -> TriangleMesh:
    mesh = read_mesh(mesh_path)
    if label_path is not None:
        labels = read_labels(label_path)
        if len(labels) != mesh.n_vertices:
            raise ValidationError(
                f"{label_path} has {len(labels)} labels but {mesh_path} has {mesh.n_vertices} vertices"
            )
        mesh.vertex_labels = labels
    return mesh


# --------------------------------------------------------------------------
# dataset shards

SHARD_MAGIC = b"TSSHARD\x00"
SHARD_VERSION = 1


def save_shard(path, clouds, record: NormalizationRecord | None = None, meta: dict | None = None) -> Path:
    """Binary container: magic, u32 version, u32 header length, JSON header, then raw blobs.

    Per sample: features (N x D float64), barycenters (N x 3 float64), labels (N int64, if present).
    """
    if isinstance(clouds, CellCloud):
        clouds = [clouds]
    if not clouds:
        raise ValidationError("cannot write an empty shard")
    mode = clouds[0].mode
    if any(c.mode is not mode for c in clouds):
        raise ValidationError("all clouds in a shard must share one representation")
    has_labels = all(c.labels is not None for c in clouds)
    sizes = [len(c) for c in clouds]
    header = {
        "version": SHARD_VERSION,
        "count": len(clouds),
        "N": sizes[0],
        "sizes": sizes,
        "D": mode.dim,
        "mode": mode.value,
        "has_labels": has_labels,
        "normalization": None if record is None else record.to_dict(),
        "meta": meta or {},
    }
    hb = json.dumps(header).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(SHARD_MAGIC)
        fh.write(struct.pack("<II", SHARD_VERSION, len(hb)))
        fh.write(hb)
        for c in clouds:
            fh.write(np.ascontiguousarray(c.features, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(c.barycenters, dtype="<f8").tobytes())
            if has_labels:
                fh.write(np.ascontiguousarray(c.labels, dtype="<i8").tobytes())
    return path


def read_shard_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path) -> dict:
    if fh.read(8) != SHARD_MAGIC:
        raise ValidationError(f"{path} is not a dataset shard")
    version, hlen = struct.unpack("<II", fh.read(8))
    if version != SHARD_VERSION:
        raise ValidationError(f"unsupported shard version {version}")
    return json.loads(fh.read(hlen))


def load_shard(path) -> tuple[list[CellCloud], NormalizationRecord | None]:
    with open(path, "rb") as fh:
        h = _read_header(fh, path)
        mode = as_representation(h["mode"])
        out = []
        for n in h["sizes"]:
            f = np.frombuffer(fh.read(8 * n * h["D"]), dtype="<f8").reshape(n, h["D"]).astype(np.float64)
            b = np.frombuffer(fh.read(8 * n * 3), dtype="<f8").reshape(n, 3).astype(np.float64)
            y = np.frombuffer(fh.read(8 * n), dtype="<i8").astype(np.int64) if h["has_labels"] else None
            out.append(CellCloud(f, mode, b, y))
    rec = None if h["normalization"] is None else NormalizationRecord.from_dict(h["normalization"])
    return out, rec


def load_shards(paths) -> list[CellCloud]:
    clouds = []
    for p in paths:
        clouds += load_shard(p)[0]
    return clouds


# --------------------------------------------------------------------------
# manifests

REFERENCE_SPLIT = (376, 95, 118)


@dataclass
class DatasetManifest:
    samples: list[dict]

    @property
    def counts(self) -> dict[str, int]:
        out = {"train": 0, "val": 0, "test": 0}
        for s in self.samples:
            out[s["split"]] += 1
        return out

    def split(self, name: str) -> list[dict]:
        return [s for s in self.samples if s["split"] == name]

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps({"version": 1, "counts": self.counts, "samples": self.samples}, indent=1))
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls(json.loads(Path(path).read_text())["samples"])


def split_sizes(n: int) -> tuple[int, int, int]:
    if n == sum(REFERENCE_SPLIT):
        return REFERENCE_SPLIT
    total = sum(REFERENCE_SPLIT)
    n_val = int(round(n * REFERENCE_SPLIT[1] / total))
    n_test = int(round(n * REFERENCE_SPLIT[2] / total))
    n_train = n - n_val - n_test
    if n_train < 1 and n >= 1:
        n_train, n_val = 1, max(0, n - 1 - n_test)
    return n_train, n_val, n_test


def make_manifest(entries: list[dict], seed: int = 0, sizes: tuple[int, int, int] | None = None) -> DatasetManifest:
    """Deterministic disjoint train/val/test assignment; entries need 'mesh' and 'labels' keys."""
    n = len(entries)
    sizes = sizes or split_sizes(n)
    if sum(sizes) != n:
        raise ValidationError(f"split sizes {sizes} do not add up to {n} samples")
    order = np.random.default_rng(seed).permutation(n)
    names = ["train"] * sizes[0] + ["val"] * sizes[1] + ["test"] * sizes[2]
    samples = []
    for split, i in zip(names, order):
        e = dict(entries[i])
        e["split"] = split
        e.setdefault("jaw", "lower")
        samples.append(e)
    samples.sort(key=lambda s: str(s.get("id", s["mesh"])))
    return DatasetManifest(samples)


def discover_scans(root) -> list[dict]:
    """Lower-jaw meshes under ``root`` that have a same-stem .json label file."""
    root = Path(root)
    out = []
    for mesh in sorted(list(root.rglob("*.obj")) + list(root.rglob("*.ply"))):
        if "upper" in mesh.stem.lower():
            continue
        lab = mesh.with_suffix(".json")
        if lab.exists():
            out.append({"id": mesh.stem, "mesh": str(mesh), "labels": str(lab), "jaw": "lower"})
    return out


# --------------------------------------------------------------------------
# export

PALETTE = np.array(
    [
        [200, 200, 200],  # BG
        [230, 25, 75],    # T1
        [60, 180, 75],    # T2
        [255, 225, 25],   # T3
        [0, 130, 200],    # T4
        [245, 130, 48],   # T5
        [145, 30, 180],   # T6
        [70, 240, 240],   # T7
    ],
    dtype=np.uint8,
)


def export_prediction(mesh: TriangleMesh, pred_labels, path, record: NormalizationRecord | None = None):
    """Colored PLY (one palette color per face) plus a JSON sidecar with the per-face class ids.

    If ``record`` is given the mesh is assumed to be in normalized space and is
    mapped back to scanner coordinates first.
    """
    pred = np.asarray(pred_labels, dtype=np.int64)
    if len(pred) != mesh.n_faces:
        raise ValidationError(f"{len(pred)} labels for {mesh.n_faces} faces")
    if len(pred) and (pred.min() < 0 or pred.max() > 7):
        raise ValidationError("predicted labels must lie in [0, 7]")
    verts = mesh.vertices if record is None else record.invert(mesh.vertices)
    path = Path(path)
    ply = write_mesh(path.with_suffix(".ply"), TriangleMesh(verts, mesh.faces), face_colors=PALETTE[pred])
    js = write_labels(path.with_suffix(".json"), pred, kind="per_face", classes=list(LabelTaxonomy().names))
    return ply, js


def read_face_colors(path) -> np.ndarray:
    fe = PlyData.read(str(path))["face"]
    return np.stack([np.asarray(fe["red"]), np.asarray(fe["green"]), np.asarray(fe["blue"])], 1)
