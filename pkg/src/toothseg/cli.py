"""Command-line entry point: ``toothseg <verb> [--config file.json] [flags]``.

Exit codes: 0 success, 2 validation/configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, ToothSegError, ValidationError

log = logging.getLogger("toothseg")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


class Options:
    """Flag values layered over a JSON config file over built-in defaults."""

    def __init__(self, ns: argparse.Namespace, defaults: dict):
        self._ns = vars(ns)
        self._cfg = {}
        if self._ns.get("config"):
            try:
                self._cfg = json.loads(Path(self._ns["config"]).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {self._ns['config']}: {exc}") from None
            if not isinstance(self._cfg, dict):
                raise ConfigError("config file must hold a JSON object")
        self._defaults = defaults

    def __getattr__(self, name):
        v = self._ns.get(name)
        if v is not None:
            return v
        key = name.replace("_", "-")
        for k in (name, key):
            if k in self._cfg:
                return self._cfg[k]
        return self._defaults.get(name)

    def require(self, name):
        v = getattr(self, name)
        if v is None:
            raise ConfigError(f"--{name.replace('_', '-')} is required (flag or config file)")
        return v


def _paths(values) -> list[Path]:
    if values is None:
        return []
    if isinstance(values, (str, Path)):
        values = [values]
    out = []
    for v in values:
        p = Path(v)
        out += sorted(p.glob("*.shard")) if p.is_dir() else [p]
    return out


# --------------------------------------------------------------------------


def cmd_synth(o: Options) -> int:
    from .io import write_labels, write_mesh
    from .synthetic import generate_synthetic_jaw

    out = Path(o.require("out"))
    entries = []
    for i in range(int(o.count)):
        seed = int(o.seed) + i
        mesh = generate_synthetic_jaw(seed, int(o.n_teeth), int(o.cells))
        name = f"synth_{seed:04d}_lower"
        mpath = write_mesh(out / f"{name}.{o.format}", mesh)
        lpath = write_labels(out / f"{name}.json", mesh.vertex_labels, id_patient=name, jaw="lower")
        entries.append({"id": name, "mesh": str(mpath), "labels": str(lpath)})
        log.info("wrote %s (%d faces)", mpath, mesh.n_faces)
    print(json.dumps({"written": len(entries), "out": str(out)}))
    return EXIT_OK


def _preprocess_one(mesh_path, label_path, o: Options):
    from .io import LabelTaxonomy, load_scan, map_labels
    from .preprocess import DecimationConfig, LabelTransferConfig, preprocess_scan

    mesh = load_scan(mesh_path, label_path)
    if mesh.vertex_labels is not None:
        mesh.vertex_labels = map_labels(mesh.vertex_labels, LabelTaxonomy())
    target = min(int(o.target_cells), mesh.n_faces)
    return preprocess_scan(
        mesh,
        mode=o.mode,
        decimation=DecimationConfig(target_cells=target, preserve_boundary=not o.no_preserve_boundary),
        transfer=LabelTransferConfig(k=int(o.k)),
        normalize=not o.raw_space,
        barycenter_normal=o.barycenter_normal,
    )


def cmd_preprocess(o: Options) -> int:
    from .io import data_root, discover_scans, make_manifest, save_shard, write_mesh

    out = Path(o.require("out"))
    if o.mesh:
        dec, cloud, rec = _preprocess_one(o.mesh, o.labels, o)
        shard = out if out.suffix == ".shard" else out / (Path(o.mesh).stem + ".shard")
        save_shard(shard, cloud, rec, meta={"source": str(o.mesh)})
        write_mesh(shard.with_suffix(".mesh.ply"), dec)
        print(json.dumps({"shard": str(shard), "cells": len(cloud)}))
        return EXIT_OK

    root = data_root(o.data_dir)
    if root is None:
        raise ConfigError("give --mesh, --data-dir, or set BMS_DATA_DIR")
    entries = discover_scans(root)
    if not entries:
        raise ValidationError(f"no labeled lower-jaw scans found under {root}")
    manifest = make_manifest(entries, seed=int(o.seed))
    for s in manifest.samples:
        dec, cloud, rec = _preprocess_one(s["mesh"], s["labels"], o)
        shard = out / s["split"] / f"{s['id']}.shard"
        save_shard(shard, cloud, rec, meta={"source": s["mesh"]})
        write_mesh(shard.with_suffix(".mesh.ply"), dec)
        s["shard"] = str(shard)
        log.info("%s -> %s", s["mesh"], shard)
    manifest.save(out / "manifest.json")
    print(json.dumps({"manifest": str(out / "manifest.json"), "counts": manifest.counts}))
    return EXIT_OK


def cmd_augment(o: Options) -> int:
    from .augment import AugmentConfig, generate_augmentations
    from .io import load_shard, save_shard

    src = _paths(o.require("shard"))
    out = Path(o.require("out"))
    cfg = AugmentConfig(
        count=int(o.count), rotation_max_deg=o.rotation_max_deg, translation_max=float(o.translation_max),
        scale_range=tuple(o.scale_range), seed=int(o.seed), renormalize=bool(o.renormalize),
    )
    written = []
    for i, path in enumerate(src):
        clouds, rec = load_shard(path)
        variants = []
        for j, c in enumerate(clouds):
            cfg.seed = int(o.seed) + 1000 * i + j
            variants += generate_augmentations(c, cfg)
        dest = out if out.suffix == ".shard" and len(src) == 1 else out / f"{path.stem}_aug.shard"
        save_shard(dest, variants, rec, meta={"augmented_from": str(path), "count": cfg.count})
        written.append(str(dest))
    print(json.dumps({"written": written}))
    return EXIT_OK


def cmd_train(o: Options) -> int:
    from .augment import AugmentConfig
    from .io import load_shards
    from .training import ModelConfig, TrainConfig, train

    train_set = load_shards(_paths(o.require("train")))
    val_set = load_shards(_paths(o.require("val")))
    if not train_set or not val_set:
        raise ValidationError("no training or validation samples found")
    n_points = int(o.n_points or min(len(c) for c in train_set + val_set))
    mcfg = ModelConfig.create(o.ablation, n_points, o.preset, dropout=float(o.dropout))
    cfg = TrainConfig(
        lr=float(o.lr), epochs=int(o.epochs), batch_size=int(o.batch_size), seed=int(o.seed),
        ablation=o.ablation, class_weights=o.class_weights, log_path=o.log,
        deterministic=not o.nondeterministic,
        augment=AugmentConfig(count=1, seed=int(o.seed)) if o.online_augment else None,
    )
    ck = train(cfg, train_set, val_set, model_config=mcfg)
    path = ck.save(o.require("out"))
    print(json.dumps({"checkpoint": str(path), "best_epoch": ck.epoch, "val_dsc": ck.val_dsc}))
    return EXIT_OK


def cmd_eval(o: Options) -> int:
    from .io import load_shards
    from .training import Checkpoint, evaluate_model

    ck = Checkpoint.load(o.require("checkpoint"))
    clouds = load_shards(_paths(o.require("shards")))
    report = evaluate_model(ck.build(), clouds)
    if o.out:
        Path(o.out).parent.mkdir(parents=True, exist_ok=True)
        Path(o.out).write_text(report.to_json(indent=1))
    print(report.format_table())
    return EXIT_OK


def cmd_predict(o: Options) -> int:
    from .io import export_prediction, load_shard, read_mesh
    from .training import Checkpoint, predict

    ck = Checkpoint.load(o.require("checkpoint"))
    model = ck.build()
    out = Path(o.require("out"))
    if o.shard:
        clouds, rec = load_shard(o.shard)
        pred = predict(model, clouds[:1])[0]
        mesh_path = o.mesh or Path(o.shard).with_suffix(".mesh.ply")
        mesh = read_mesh(mesh_path)
    else:
        dec, cloud, rec = _preprocess_one(o.require("mesh"), None, o)
        pred = predict(model, [cloud])[0]
        mesh = dec
    ply, js = export_prediction(mesh, pred, out)
    counts = np.bincount(pred, minlength=8).tolist()
    print(json.dumps({"ply": str(ply), "labels": str(js), "class_counts": counts}))
    return EXIT_OK


def cmd_export_vis(o: Options) -> int:
    from .io import export_prediction, read_labels, read_mesh, read_shard_header
    from .preprocess import NormalizationRecord

    mesh = read_mesh(o.require("mesh"))
    labels = read_labels(o.require("labels"))
    rec = None
    if o.normalization:
        p = Path(o.normalization)
        d = read_shard_header(p)["normalization"] if p.suffix == ".shard" else json.loads(p.read_text())
        rec = NormalizationRecord.from_dict(d)
    ply, js = export_prediction(mesh, labels, o.require("out"), record=rec)
    print(json.dumps({"ply": str(ply), "labels": str(js)}))
    return EXIT_OK


# --------------------------------------------------------------------------

DEFAULTS = {
    "synth": dict(count=1, seed=0, n_teeth=14, cells=20000, format="ply"),
    "preprocess": dict(mode="B_N", target_cells=16000, k=3, seed=0, barycenter_normal="face"),
    "augment": dict(count=40, rotation_max_deg=30.0, translation_max=0.1, scale_range=[0.8, 1.2], seed=0),
    "train": dict(ablation="ours", preset="desk", lr=0.001, epochs=60, batch_size=4, seed=0, dropout=0.5),
    "eval": {},
    "predict": dict(mode="B_N", target_cells=1024, k=3, barycenter_normal="face"),
    "export-vis": {},
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="toothseg", description="Tooth mesh segmentation pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON file with option values; flags override it")
        sp.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
        return sp

    sp = add("synth", "generate labeled synthetic lower-jaw meshes")
    sp.add_argument("--out")
    sp.add_argument("--count", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--n-teeth", type=int)
    sp.add_argument("--cells", type=int)
    sp.add_argument("--format", choices=["ply", "obj"])

    for name, help_ in (("preprocess", "decimate, label and normalize scans into shards"),
                        ("predict", "segment a scan with a trained checkpoint")):
        sp = add(name, help_)
        sp.add_argument("--mesh")
        sp.add_argument("--out")
        sp.add_argument("--mode", choices=["B", "B_N", "BVN24"])
        sp.add_argument("--target-cells", type=int)
        sp.add_argument("--k", type=int)
        sp.add_argument("--raw-space", action="store_true", default=None, help="skip unit-sphere normalization")
        sp.add_argument("--no-preserve-boundary", action="store_true", default=None)
        sp.add_argument("--barycenter-normal", choices=["face", "vertex"])
        if name == "preprocess":
            sp.add_argument("--labels")
            sp.add_argument("--data-dir", help="corpus root (default: $BMS_DATA_DIR)")
            sp.add_argument("--seed", type=int)
        else:
            sp.add_argument("--checkpoint")
            sp.add_argument("--shard", help="predict on an existing shard instead of a raw mesh")

    sp = add("augment", "write randomized rotation/translation/scale variants")
    sp.add_argument("--shard", nargs="+")
    sp.add_argument("--out")
    sp.add_argument("--count", type=int)
    sp.add_argument("--rotation-max-deg", type=float)
    sp.add_argument("--translation-max", type=float)
    sp.add_argument("--scale-range", type=float, nargs=2)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--renormalize", action="store_true", default=None)

    sp = add("train", "train a model and keep the best-validation-DSC checkpoint")
    sp.add_argument("--train", nargs="+", help="shard files or directories")
    sp.add_argument("--val", nargs="+")
    sp.add_argument("--out")
    sp.add_argument("--log", help="JSON-lines training log")
    sp.add_argument("--ablation", choices=["ours", "ablation1", "ablation2", "ablation3", "ablation4"])
    sp.add_argument("--preset", choices=["desk", "full"])
    sp.add_argument("--n-points", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--dropout", type=float)
    sp.add_argument("--class-weights", choices=["none", "inverse_freq"])
    sp.add_argument("--online-augment", action="store_true", default=None)
    sp.add_argument("--nondeterministic", action="store_true", default=None)

    sp = add("eval", "score a checkpoint on labeled shards")
    sp.add_argument("--checkpoint")
    sp.add_argument("--shards", nargs="+")
    sp.add_argument("--out", help="JSON report path")

    sp = add("export-vis", "write a colored PLY for per-face labels")
    sp.add_argument("--mesh")
    sp.add_argument("--labels")
    sp.add_argument("--out")
    sp.add_argument("--normalization", help="shard or JSON record to map normalized vertices back")
    return p


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "augment": cmd_augment,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "export-vis": cmd_export_vis,
}


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[ns.verb](Options(ns, DEFAULTS[ns.verb]))
    except (ValidationError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ToothSegError as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled", exc_info=True)
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
