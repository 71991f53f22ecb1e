"""Confusion-matrix segmentation metrics: DSC, OA, SEN, PPV."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

CLASS_NAMES = ["BG", "T1", "T2", "T3", "T4", "T5", "T6", "T7"]
NUM_CLASSES = len(CLASS_NAMES)


def confusion_matrix(truth, pred, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Rows are ground truth, columns are predictions."""
    t = np.asarray(truth, dtype=np.int64).ravel()
    p = np.asarray(pred, dtype=np.int64).ravel()
    if len(t) != len(p):
        raise ValidationError(f"truth has {len(t)} entries, prediction has {len(p)}")
    for name, arr in (("truth", t), ("pred", p)):
        bad = np.flatnonzero((arr < 0) | (arr >= num_classes))
        if len(bad):
            raise ValidationError(f"{name}[{bad[0]}] = {arr[bad[0]]} is outside [0, {num_classes - 1}]")
    return np.bincount(t * num_classes + p, minlength=num_classes ** 2).reshape(num_classes, num_classes)


@dataclass
class ClassScores:
    dsc: float
    sen: float
    ppv: float
    absent: bool = False


@dataclass
class MetricsReport:
    confusion: np.ndarray
    per_class: list[ClassScores]
    overall: dict[str, float]
    counts: int
    micro: dict[str, float] = field(default_factory=dict)
    sample_mean: dict[str, float] | None = None

    @property
    def dsc(self) -> float:
        return self.overall["dsc"]

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "per_class": {
                name: {"dsc": c.dsc, "sen": c.sen, "ppv": c.ppv, "absent": c.absent}
                for name, c in zip(CLASS_NAMES, self.per_class)
            },
            "overall": dict(self.overall),
            "micro": dict(self.micro),
            "sample_mean": None if self.sample_mean is None else dict(self.sample_mean),
            "counts": int(self.counts),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def format_table(self) -> str:
        """Label-wise DSC row followed by the OA/DSC/SEN/PPV summary row."""
        head = " | ".join(f"{n:>7}" for n in CLASS_NAMES)
        row = " | ".join(f"{c.dsc:.4f}" + ("*" if c.absent else " ") for c in self.per_class)
        o = self.overall
        lines = [
            head,
            row,
            f"OA {o['oa']:.4f}, DSC {o['dsc']:.4f}, SEN {o['sen']:.4f}, PPV {o['ppv']:.4f}",
        ]
        if any(c.absent for c in self.per_class):
            lines.append("* class absent from truth and prediction; excluded from means")
        return "\n".join(lines)


def compute_report(confusion) -> MetricsReport:
    m = np.asarray(confusion, dtype=np.int64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValidationError(f"confusion matrix must be square, got {m.shape}")
    if (m < 0).any():
        raise ValidationError("confusion matrix has negative entries")
    total = int(m.sum())
    if total == 0:
        raise ValidationError("confusion matrix is empty")
    tp = np.diag(m).astype(np.float64)
    fp = m.sum(axis=0) - tp
    fn = m.sum(axis=1) - tp
    per_class = []
    for c in range(len(m)):
        if tp[c] + fp[c] + fn[c] == 0:
            per_class.append(ClassScores(1.0, 1.0, 1.0, absent=True))
            continue
        dsc = 2 * tp[c] / (2 * tp[c] + fp[c] + fn[c])
        sen = tp[c] / (tp[c] + fn[c]) if tp[c] + fn[c] else 0.0
        ppv = tp[c] / (tp[c] + fp[c]) if tp[c] + fp[c] else 0.0
        per_class.append(ClassScores(float(dsc), float(sen), float(ppv)))
    present = [c for c in per_class if not c.absent]
    overall = {
        "oa": float(tp.sum() / total),
        "dsc": float(np.mean([c.dsc for c in present])),
        "sen": float(np.mean([c.sen for c in present])),
        "ppv": float(np.mean([c.ppv for c in present])),
    }
    s_tp, s_fp, s_fn = tp.sum(), fp.sum(), fn.sum()
    micro = {
        "dsc": float(2 * s_tp / (2 * s_tp + s_fp + s_fn)),
        "sen": float(s_tp / (s_tp + s_fn)),
        "ppv": float(s_tp / (s_tp + s_fp)),
    }
    return MetricsReport(m, per_class, overall, total, micro)


def evaluate(truths, preds) -> MetricsReport:
    """Pool the confusion over several samples; also attach the per-sample mean of the macro scores."""
    if not isinstance(truths, (list, tuple)):
        truths, preds = [truths], [preds]
    mats = [confusion_matrix(t, p) for t, p in zip(truths, preds)]
    report = compute_report(sum(mats))
    if len(mats) > 1:
        per = [compute_report(mm).overall for mm in mats]
        report.sample_mean = {k: float(np.mean([p[k] for p in per])) for k in per[0]}
    return report
