"""Segmentation evaluation: per-class IoU, base/novel/overall means, their
harmonic mean, and the logit-drift statistics between consecutive steps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import model as mdl
from . import numcore as nc
from .csvio import fmt_real, write_csv
from .synthdata import BACKGROUND_ID, ScenarioPlan, SegSample


class ConfusionMatrix:
    """(K+1) x (K+1) pixel counts indexed by (ground truth, prediction)."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)

    def update(self, gt: np.ndarray, pred: np.ndarray) -> None:
        gt = np.asarray(gt).reshape(-1)
        pred = np.asarray(pred).reshape(-1)
        if gt.shape != pred.shape:
            raise ValueError("ground truth and prediction sizes differ")
        n = self.num_classes + 1
        if gt.min() < 0 or gt.max() >= n or pred.min() < 0 or pred.max() >= n:
            raise ValueError("class id outside 0..K")
        flat = np.bincount(gt * n + pred, minlength=n * n)
        self.counts += flat.reshape(n, n)

    def merge(self, other: "ConfusionMatrix") -> None:
        if other.num_classes != self.num_classes:
            raise ValueError("confusion matrices cover different class counts")
        self.counts += other.counts

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def iou(cm: ConfusionMatrix, class_id: int) -> Optional[float]:
    """Intersection over union in [0, 1]; None when the class appears in
    neither ground truth nor prediction (excluded from means)."""
    if not 0 <= class_id <= cm.num_classes:
        raise ValueError(f"unknown class id {class_id}")
    tp = int(cm.counts[class_id, class_id])
    fn = int(cm.counts[class_id, :].sum()) - tp
    fp = int(cm.counts[:, class_id].sum()) - tp
    denom = tp + fp + fn
    if denom == 0:
        return None
    return tp / denom


@dataclass
class MetricsReport:
    """Per-step evaluation summary; every aggregate is a percentage.

    ``miou_novel`` and ``hiou`` are None at the first step, where no novel
    classes exist yet.
    """

    step: int
    per_class_iou: dict[int, Optional[float]] = field(default_factory=dict)
    miou_base: float = 0.0
    miou_novel: Optional[float] = None
    miou_all: float = 0.0
    hiou: Optional[float] = None


def harmonic_iou(base: float, novel: float) -> float:
    """2ab / (a + b), zero when either mean is zero."""
    if base <= 0.0 or novel <= 0.0:
        return 0.0
    return 2.0 * base * novel / (base + novel)


def _mean_present(values: Sequence[Optional[float]]) -> float:
    present = [v for v in values if v is not None]
    if not present:
        return 0.0
    return float(sum(present) / len(present))


def summarize(cm: ConfusionMatrix, plan: ScenarioPlan, t: int) -> MetricsReport:
    """Aggregate IoUs at step t: base = background + the initial class set,
    novel = everything added in steps 2..t."""
    base_ids = (BACKGROUND_ID,) + plan.classes_at(1)
    novel_ids = tuple(c for g in plan.class_schedule[1:t] for c in g)
    scored = base_ids + novel_ids

    per_class = {c: iou(cm, c) for c in scored}
    miou_base = 100.0 * _mean_present([per_class[c] for c in base_ids])
    miou_all = 100.0 * _mean_present([per_class[c] for c in scored])
    if t == 1:
        return MetricsReport(
            step=t,
            per_class_iou=per_class,
            miou_base=miou_base,
            miou_novel=None,
            miou_all=miou_all,
            hiou=None,
        )
    miou_novel = 100.0 * _mean_present([per_class[c] for c in novel_ids])
    return MetricsReport(
        step=t,
        per_class_iou=per_class,
        miou_base=miou_base,
        miou_novel=miou_novel,
        miou_all=miou_all,
        hiou=harmonic_iou(miou_base, miou_novel),
    )


@dataclass(frozen=True)
class DriftStats:
    """Per-entry-normalized L2 distances between a model's old-class logits
    (and reasoning scores) and the previous model's, over one batch."""

    dz: float
    dz_plus: float
    dz_minus: float


def _old_class_scores(state: mdl.ModelState, image: np.ndarray, n_old: int):
    f = mdl.forward_features(state.backbone, image)
    z = mdl.logits(f, state.bank)
    dec = mdl.decompose(f, state.bank, head_range=(0, n_old))
    return z.data[:, :n_old], dec.z_plus.data, dec.z_minus.data


def drift(
    current: mdl.ModelState,
    previous: Optional[mdl.ModelState],
    batch: Sequence[SegSample],
) -> DriftStats:
    """Compare old-class logits between models over a validation batch."""
    if previous is None or current.step < 2:
        raise ValueError("drift is undefined at the first step (no previous model)")
    old_ids = previous.bank.class_ids
    n_old = len(old_ids)
    if current.bank.class_ids[:n_old] != old_ids:
        raise ValueError("current bank does not extend the previous model's classes")

    sq_z = sq_p = sq_m = 0.0
    count = 0
    for sample in batch:
        z_c, zp_c, zm_c = _old_class_scores(current, sample.image, n_old)
        z_p, zp_p, zm_p = _old_class_scores(previous, sample.image, n_old)
        sq_z += float(((z_c - z_p) ** 2).sum())
        sq_p += float(((zp_c - zp_p) ** 2).sum())
        sq_m += float(((zm_c - zm_p) ** 2).sum())
        count += z_c.size
    if count == 0:
        raise ValueError("empty drift batch")
    scale = 1.0 / np.sqrt(count)
    return DriftStats(
        dz=float(np.sqrt(sq_z) * scale),
        dz_plus=float(np.sqrt(sq_p) * scale),
        dz_minus=float(np.sqrt(sq_m) * scale),
    )


# ---------------------------------------------------------------------------
# CSV emission


def write_metrics_csv(path, reports: Sequence[MetricsReport]):
    """Per-class rows carry (step, class_id, iou); one aggregate row per step
    leaves class_id/iou empty and fills the miou columns."""
    header = ["step", "class_id", "iou", "miou_b", "miou_n", "miou_all", "hiou"]
    rows = []
    for rep in reports:
        for cid in sorted(rep.per_class_iou):
            val = rep.per_class_iou[cid]
            rows.append(
                [rep.step, cid, None if val is None else fmt_real(100.0 * val), None, None, None, None]
            )
        rows.append(
            [
                rep.step,
                None,
                None,
                fmt_real(rep.miou_base),
                None if rep.miou_novel is None else fmt_real(rep.miou_novel),
                fmt_real(rep.miou_all),
                None if rep.hiou is None else fmt_real(rep.hiou),
            ]
        )
    return write_csv(path, header, rows)


def write_drift_csv(path, rows):
    """Rows are (step, iter, DriftStats)."""
    header = ["step", "iter", "dz", "dz_plus", "dz_minus"]
    return write_csv(
        path,
        header,
        [
            [step, it, fmt_real(d.dz), fmt_real(d.dz_plus), fmt_real(d.dz_minus)]
            for step, it, d in rows
        ],
    )
