"""Model assembly for the ablation matrix, the training loop and checkpoints."""

from __future__ import annotations

import contextlib
import copy
import enum
import io
import json
import logging
import time
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .augment import AugmentConfig, generate_augmentations
from .errors import ConfigError, TrainingDiverged, ValidationError
from .mesh import CellCloud, Representation, select_representation
from .metrics import MetricsReport, evaluate
from .nn.curve import CurveBranch, CurveBranchConfig
from .nn.geometry import GeometryBranch, GeometryBranchConfig
from .nn.head import HeadConfig, SegHead

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "toothseg-checkpoint"
CHECKPOINT_VERSION = 1


class Ablation(str, enum.Enum):
    OURS = "ours"
    ABLATION1 = "ablation1"  # geometry branch on the 24-dim cell vector
    ABLATION2 = "ablation2"  # geometry branch on barycenter + normal
    ABLATION3 = "ablation3"  # geometry branch on barycenter only
    ABLATION4 = "ablation4"  # curve branch on barycenter only

    @property
    def representation(self) -> Representation:
        return {
            "ours": Representation.B_N,
            "ablation1": Representation.BVN24,
            "ablation2": Representation.B_N,
            "ablation3": Representation.B,
            "ablation4": Representation.B,
        }[self.value]

    @property
    def uses_geometry(self) -> bool:
        return self is not Ablation.ABLATION4

    @property
    def uses_curve(self) -> bool:
        return self in (Ablation.OURS, Ablation.ABLATION4)


def as_ablation(a) -> Ablation:
    try:
        return Ablation(a.value if isinstance(a, Ablation) else a)
    except ValueError:
        raise ConfigError(f"unknown ablation {a!r}; expected one of {[x.value for x in Ablation]}") from None


@dataclass
class ModelConfig:
    ablation: Ablation
    n_points: int
    geometry: GeometryBranchConfig | None
    curve: CurveBranchConfig | None
    head: HeadConfig

    @property
    def representation(self) -> Representation:
        return self.ablation.representation

    @classmethod
    def create(cls, ablation="ours", n_points: int = 1024, preset: str = "desk", dropout: float = 0.5) -> "ModelConfig":
        ablation = as_ablation(ablation)
        dim = ablation.representation.dim
        if preset == "desk":
            geo = GeometryBranchConfig.desk(n_points, in_dim=dim) if ablation.uses_geometry else None
            cur = CurveBranchConfig.desk(n_points) if ablation.uses_curve else None
            hidden = 128
        elif preset == "full":
            geo = GeometryBranchConfig.for_points(n_points, in_dim=dim) if ablation.uses_geometry else None
            cur = CurveBranchConfig.for_points(n_points) if ablation.uses_curve else None
            hidden = 256
        else:
            raise ConfigError(f"unknown preset {preset!r}; expected 'desk' or 'full'")
        head = HeadConfig(
            in_dim_a=geo.out_dim if geo else 0,
            in_dim_b=cur.out_dim if cur else 0,
            hidden=hidden,
            dropout=dropout,
        )
        return cls(ablation, n_points, geo, cur, head)

    def to_dict(self) -> dict:
        return {
            "ablation": self.ablation.value,
            "n_points": self.n_points,
            "geometry": None if self.geometry is None else self.geometry.to_dict(),
            "curve": None if self.curve is None else self.curve.to_dict(),
            "head": self.head.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            as_ablation(d["ablation"]),
            int(d["n_points"]),
            None if d.get("geometry") is None else GeometryBranchConfig(**d["geometry"]),
            None if d.get("curve") is None else CurveBranchConfig(**d["curve"]),
            HeadConfig(**d["head"]),
        )


class ToothSegNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.geometry = GeometryBranch(cfg.geometry) if cfg.geometry is not None else None
        self.curve = CurveBranch(cfg.curve) if cfg.curve is not None else None
        self.head = SegHead(cfg.head)

    @property
    def representation(self) -> Representation:
        return self.cfg.representation

    def forward(self, feats, xyz):
        """feats (B, N, D), xyz (B, N, 3) -> logits (B, N, 8)."""
        a = self.geometry(feats, xyz) if self.geometry is not None else None
        b = self.curve(xyz) if self.curve is not None else None
        return self.head(a, b)


def build_model(ablation="ours", n_points: int = 1024, preset: str = "desk", config: ModelConfig | None = None,
                **kw) -> ToothSegNet:
    cfg = config or ModelConfig.create(ablation, n_points, preset, **kw)
    return ToothSegNet(cfg)


# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 0.001
    epochs: int = 800
    batch_size: int = 24
    seed: int = 0
    ablation: str = "ours"
    optimizer: str = "adam"
    loss: str = "cross_entropy"
    select_metric: str = "val_dsc"
    weight_decay: float = 0.0
    grad_clip: float | None = None
    lr_step: int | None = None
    lr_gamma: float = 0.5
    class_weights: str | list | None = None
    deterministic: bool = True
    log_path: str | None = None
    # one fresh random similarity per sample and step; None trains on the data as given
    augment: AugmentConfig | None = None
    # stop once validation DSC reaches this value; 1.0 cannot change the selected epoch
    stop_at_dsc: float | None = None

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        base = dict(epochs=60, batch_size=4)
        base.update(kw)
        return cls(**base)

    def check(self) -> None:
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer != "adam" or self.loss != "cross_entropy" or self.select_metric != "val_dsc":
            raise ConfigError("only adam / cross_entropy / val_dsc are supported")
        as_ablation(self.ablation)
        if self.augment is not None:
            self.augment.check()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Checkpoint:
    state: dict
    model_config: dict
    train_config: dict
    epoch: int
    val_dsc: float
    history: list = field(default_factory=list)
    normalization: str = "unit_sphere"

    def build(self) -> ToothSegNet:
        model = build_model(config=ModelConfig.from_dict(self.model_config))
        model.load_state_dict(self.state)
        return model.eval()

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        names = list(self.state)
        meta = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "model_config": self.model_config,
            "train_config": self.train_config,
            "epoch": self.epoch,
            "val_dsc": self.val_dsc,
            "history": self.history,
            "normalization": self.normalization,
            "params": names,
        }
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
            zf.writestr("meta.json", json.dumps(meta, indent=1))
            for i, name in enumerate(names):
                buf = io.BytesIO()
                np.save(buf, self.state[name].detach().cpu().numpy(), allow_pickle=False)
                zf.writestr(f"params/{i:05d}.npy", buf.getvalue())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise ValidationError(f"{path} is not a checkpoint file")
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValidationError(f"unsupported checkpoint version {meta.get('version')}")
            state = {}
            for i, name in enumerate(meta["params"]):
                arr = np.load(io.BytesIO(zf.read(f"params/{i:05d}.npy")), allow_pickle=False)
                state[name] = torch.from_numpy(arr)
        return cls(state, meta["model_config"], meta["train_config"], meta["epoch"], meta["val_dsc"],
                   meta["history"], meta["normalization"])


@contextlib.contextmanager
def _deterministic(enabled: bool):
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(enabled)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


def _crop(clouds: list[CellCloud], rng: np.random.Generator) -> list[CellCloud]:
    """Random subsets so every cloud in a training batch has the smallest cell count."""
    n = min(len(c) for c in clouds)
    out = []
    for c in clouds:
        if len(c) == n:
            out.append(c)
            continue
        keep = np.sort(rng.choice(len(c), n, replace=False))
        out.append(c.replace(features=c.features[keep], barycenters=c.barycenters[keep],
                             labels=None if c.labels is None else c.labels[keep],
                             degenerate=None if c.degenerate is None else c.degenerate[keep]))
    return out


def _stack(clouds: list[CellCloud], mode: Representation, dtype=torch.float32):
    clouds = [select_representation(c, mode) for c in clouds]
    n = {len(c) for c in clouds}
    if len(n) != 1:
        raise ValidationError(f"all samples in a batch need the same cell count, got {sorted(n)}")
    f = torch.as_tensor(np.stack([c.features for c in clouds]), dtype=dtype)
    p = torch.as_tensor(np.stack([c.barycenters for c in clouds]), dtype=dtype)
    y = None
    if all(c.labels is not None for c in clouds):
        y = torch.as_tensor(np.stack([c.labels for c in clouds]), dtype=torch.long)
    return f, p, y


@torch.no_grad()
def predict(model: ToothSegNet, clouds: list[CellCloud], batch_size: int = 4) -> list[np.ndarray]:
    was_training = model.training
    model.eval()
    out = []
    i = 0
    while i < len(clouds):
        # batch only runs of equal cell count so every cell gets a prediction
        j = i + 1
        while j < len(clouds) and j - i < batch_size and len(clouds[j]) == len(clouds[i]):
            j += 1
        f, p, _ = _stack(clouds[i:j], model.representation)
        out += list(model(f, p).argmax(-1).numpy())
        i = j
    model.train(was_training)
    return out


def evaluate_model(model: ToothSegNet, clouds: list[CellCloud], batch_size: int = 4) -> MetricsReport:
    preds = predict(model, clouds, batch_size)
    return evaluate([c.labels for c in clouds], preds)


def _class_weights(weights, train_set) -> torch.Tensor | None:
    if weights is None or weights == "none":
        return None
    if weights == "inverse_freq":
        counts = np.bincount(np.concatenate([c.labels for c in train_set]), minlength=8).astype(np.float64)
        w = np.where(counts > 0, counts.sum() / np.maximum(counts, 1), 0.0)
        w = w / w[w > 0].mean()
        return torch.as_tensor(w, dtype=torch.float32)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (8,):
        raise ConfigError("class_weights list must have 8 entries")
    return torch.as_tensor(w, dtype=torch.float32)


def _augment_one(cloud: CellCloud, acfg: AugmentConfig, rng: np.random.Generator) -> CellCloud:
    one = copy.copy(acfg)
    one.count, one.seed = 1, int(rng.integers(2**31))
    return generate_augmentations(cloud, one)[0]


def train(cfg: TrainConfig, train_set: list[CellCloud], val_set: list[CellCloud],
          model_config: ModelConfig | None = None, on_epoch=None) -> Checkpoint:
    """Adam + cross-entropy; keeps the parameters of the epoch with the best validation DSC."""
    cfg.check()
    if not train_set or not val_set:
        raise ValidationError("train and validation splits must be non-empty")
    for c in list(train_set) + list(val_set):
        if c.labels is None:
            raise ValidationError("every training/validation sample needs cell labels")
        if c.labels.min() < 0 or c.labels.max() > 7:
            raise ValidationError("cell labels must lie in [0, 7]")
    ablation = as_ablation(cfg.ablation)
    if model_config is None:
        model_config = ModelConfig.create(ablation, len(train_set[0]))
    elif model_config.ablation is not ablation:
        raise ConfigError(f"model config is {model_config.ablation.value}, train config says {ablation.value}")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    log_file = open(cfg.log_path, "w") if cfg.log_path else None
    try:
        with _deterministic(cfg.deterministic):
            model = build_model(config=model_config)
            opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
            sched = torch.optim.lr_scheduler.StepLR(opt, cfg.lr_step, cfg.lr_gamma) if cfg.lr_step else None
            weights = _class_weights(cfg.class_weights, train_set)
            mode = model.representation

            history, best = [], None
            for epoch in range(1, cfg.epochs + 1):
                t0 = time.perf_counter()
                model.train()
                order = rng.permutation(len(train_set))
                losses = []
                for b, start in enumerate(range(0, len(order), cfg.batch_size)):
                    batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
                    if cfg.augment is not None:
                        batch = [_augment_one(c, cfg.augment, rng) for c in batch]
                    batch = _crop(batch, rng)
                    f, p, y = _stack(batch, mode)
                    logits = model(f, p)
                    loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), y.reshape(-1), weight=weights)
                    opt.zero_grad(set_to_none=True)
                    loss.backward()
                    if not torch.isfinite(loss):
                        diag = {
                            "epoch": epoch,
                            "batch": b,
                            "loss": loss.item(),
                            "grad_norms": {
                                n: float(q.grad.norm()) for n, q in model.named_parameters() if q.grad is not None
                            },
                        }
                        if cfg.log_path:
                            Path(cfg.log_path).with_suffix(".nan.json").write_text(json.dumps(diag, indent=1))
                        raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}", diag)
                    if cfg.grad_clip:
                        nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                    opt.step()
                    losses.append(loss.item())
                if sched is not None:
                    sched.step()

                report = evaluate_model(model, val_set, cfg.batch_size)
                rec = {
                    "epoch": epoch,
                    "loss": float(np.mean(losses)),
                    "val_dsc": report.overall["dsc"],
                    "val_oa": report.overall["oa"],
                    "val_sen": report.overall["sen"],
                    "val_ppv": report.overall["ppv"],
                    "seconds": round(time.perf_counter() - t0, 3),
                }
                history.append(rec)
                if log_file:
                    log_file.write(json.dumps(rec) + "\n")
                    log_file.flush()
                if on_epoch is not None:
                    on_epoch(rec)
                logger.info("epoch %d loss %.4f val DSC %.4f", epoch, rec["loss"], rec["val_dsc"])
                if best is None or rec["val_dsc"] > best[1]:
                    best = (epoch, rec["val_dsc"], {k: v.detach().clone() for k, v in model.state_dict().items()})
                if cfg.stop_at_dsc is not None and rec["val_dsc"] >= cfg.stop_at_dsc:
                    break
    finally:
        if log_file:
            log_file.close()

    epoch, dsc, state = best
    return Checkpoint(state, model_config.to_dict(), cfg.to_dict(), epoch, dsc, history)


def clone_model(model: ToothSegNet) -> ToothSegNet:
    return copy.deepcopy(model)
