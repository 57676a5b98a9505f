"""The four training terms and their weighted combination.

All terms are per-image and normalized by the pixel count HW only; the batch
reduction is the mean of per-image losses. Probabilities are clamped to
[1e-12, 1 - 1e-12] before every log, which keeps each term finite and
non-negative for any finite logits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import model as mdl
from . import numcore as nc
from .numcore import Tensor

CLAMP_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Balance factors: alpha scales kd, beta scales dkd, gamma weights
    positive pixels inside mbce."""

    alpha: float
    beta: float
    gamma: float

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and np.isfinite(self.beta) and np.isfinite(self.gamma)):
            raise ValueError("loss weights must be finite")
        if self.alpha < 0 or self.beta < 0 or self.gamma <= 0:
            raise ValueError("alpha/beta must be >= 0 and gamma > 0")


@dataclass(frozen=True)
class DistillTargets:
    """Frozen previous-model probabilities over old classes, one image.

    Plain arrays: targets never participate in the gradient tape.
    """

    p: np.ndarray  # sigma(old logits incl. bias), (HW, C_old)
    p_plus: np.ndarray  # sigma(positive reasoning scores), (HW, C_old)
    p_minus: np.ndarray  # sigma(negative reasoning scores), (HW, C_old)

    def __post_init__(self):
        for arr in (self.p, self.p_plus, self.p_minus):
            if arr.shape != self.p.shape:
                raise ValueError("distill target arrays must share one shape")
            if np.any(arr <= 0.0) or np.any(arr >= 1.0):
                raise ValueError("distill targets must lie strictly inside (0, 1)")


def compute_distill_targets(prev_state: mdl.ModelState, image: np.ndarray) -> DistillTargets:
    """Run the frozen previous model once, outside any tape."""
    f = mdl.forward_features(prev_state.backbone, image)
    z = mdl.logits(f, prev_state.bank)
    dec = mdl.decompose(f, prev_state.bank)
    clip = lambda a: np.clip(a, CLAMP_EPS, 1.0 - CLAMP_EPS)
    return DistillTargets(
        p=clip(nc._sigmoid_values(z.data)),
        p_plus=clip(nc._sigmoid_values(dec.z_plus.data)),
        p_minus=clip(nc._sigmoid_values(dec.z_minus.data)),
    )


def _log_prob(z: Tensor) -> tuple[Tensor, Tensor]:
    """log p and log(1 - p) for p = sigma(z), clamped before the log."""
    p = nc.sigmoid(z)
    ones = Tensor(np.ones(p.shape))
    log_p = nc.log(nc.clamp(p, CLAMP_EPS, 1.0 - CLAMP_EPS))
    log_q = nc.log(nc.clamp(nc.sub(ones, p), CLAMP_EPS, 1.0 - CLAMP_EPS))
    return log_p, log_q


def mbce(z: Tensor, labels: np.ndarray, classes: Sequence[int], gamma: float) -> Tensor:
    """Per-class binary cross-entropy over the current step's classes.

    ``z`` holds one column per entry of ``classes``; ``labels`` is the
    remapped per-pixel ground truth, restricted to ``classes`` plus the
    unknown id. Positive pixels are weighted by ``gamma``.
    """
    y = np.asarray(labels).reshape(-1)
    if z.shape != (y.size, len(classes)):
        raise nc.ShapeMismatchError("mbce", z.shape, (y.size, len(classes)))
    allowed = set(classes) | {0}
    present = set(int(v) for v in np.unique(y))
    if not present <= allowed:
        raise ValueError(f"labels {sorted(present - allowed)} outside the step alphabet")

    hw = y.size
    pos = np.stack([y == c for c in classes], axis=1).astype(np.float64)
    pos_mask = Tensor(pos)
    neg_mask = Tensor(1.0 - pos)
    log_p, log_q = _log_prob(z)
    terms = nc.add(nc.scalar_mul(nc.mul(pos_mask, log_p), gamma), nc.mul(neg_mask, log_q))
    return nc.scalar_mul(nc.tsum(terms), -1.0 / hw)


def kd(z_old: Tensor, targets: Optional[DistillTargets]) -> Tensor:
    """Cross-entropy of current old-class probabilities against the frozen
    previous model's; keeps logits from moving abruptly."""
    if targets is None:
        raise ValueError("kd needs previous-model targets; none exist at the first step")
    if z_old.shape != targets.p.shape:
        raise nc.ShapeMismatchError("kd", z_old.shape, targets.p.shape)
    hw = z_old.shape[0]
    log_p, log_q = _log_prob(z_old)
    prev = Tensor(targets.p)
    prev_c = Tensor(1.0 - targets.p)
    terms = nc.add(nc.mul(prev, log_p), nc.mul(prev_c, log_q))
    return nc.scalar_mul(nc.tsum(terms), -1.0 / hw)


def _score_kd(score: Tensor, target: np.ndarray) -> Tensor:
    hw = score.shape[0]
    log_p, log_q = _log_prob(score)
    prev = Tensor(target)
    prev_c = Tensor(1.0 - target)
    terms = nc.add(nc.mul(prev, log_p), nc.mul(prev_c, log_q))
    return nc.scalar_mul(nc.tsum(terms), -1.0 / hw)


def dkd(z_plus: Tensor, z_minus: Tensor, targets: Optional[DistillTargets]) -> Tensor:
    """Distillation applied separately to the positive and negative reasoning
    scores, constraining each instead of only their sum."""
    if targets is None:
        raise ValueError("dkd needs previous-model targets; none exist at the first step")
    if z_plus.shape != targets.p_plus.shape or z_minus.shape != targets.p_minus.shape:
        raise nc.ShapeMismatchError("dkd", z_plus.shape, targets.p_plus.shape)
    return nc.add(_score_kd(z_plus, targets.p_plus), _score_kd(z_minus, targets.p_minus))


def ac(z_prime: Tensor) -> Tensor:
    """Push the auxiliary head towards 'negative' on every pixel."""
    hw = z_prime.shape[0]
    _, log_q = _log_prob(z_prime)
    return nc.scalar_mul(nc.tsum(log_q), -1.0 / hw)


@dataclass
class ImageLosses:
    """The four terms for one image; kd/dkd are None when no previous model exists
    or when the corresponding term is ablated."""

    mbce: Tensor
    ac: Tensor
    kd: Optional[Tensor] = None
    dkd: Optional[Tensor] = None


@dataclass(frozen=True)
class LossBreakdown:
    """Batch-mean component values, for traces and NaN diagnostics."""

    mbce: float
    kd: float
    dkd: float
    ac: float
    total: float


def total(
    batch: Sequence[ImageLosses], weights: LossWeights, step: int
) -> tuple[Tensor, LossBreakdown]:
    """Combine per-image terms into the training objective, batch-averaged.

    At the first step there is no previous model, so kd/dkd must be absent.
    """
    if not batch:
        raise ValueError("empty batch")
    if step < 1:
        raise ValueError(f"invalid step {step}")
    if step == 1 and any(item.kd is not None or item.dkd is not None for item in batch):
        raise ValueError("kd/dkd terms are undefined at the first step")

    per_image = []
    for item in batch:
        t = item.mbce
        if item.kd is not None:
            t = nc.add(t, nc.scalar_mul(item.kd, weights.alpha))
        if item.dkd is not None:
            t = nc.add(t, nc.scalar_mul(item.dkd, weights.beta))
        per_image.append(nc.add(t, item.ac))

    combined = per_image[0]
    for t in per_image[1:]:
        combined = nc.add(combined, t)
    combined = nc.scalar_mul(combined, 1.0 / len(batch))

    n = len(batch)
    mean = lambda xs: float(sum(xs) / n)
    breakdown = LossBreakdown(
        mbce=mean([i.mbce.item() for i in batch]),
        kd=mean([i.kd.item() if i.kd is not None else 0.0 for i in batch]),
        dkd=mean([i.dkd.item() if i.dkd is not None else 0.0 for i in batch]),
        ac=mean([i.ac.item() for i in batch]),
        total=combined.item(),
    )
    return combined, breakdown
