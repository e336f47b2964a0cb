"""Training objectives as losses to minimize (negated log-likelihoods).

The total loss for a batch is

    L = L_W + lambda2 * (lambda1 * L_cls + L_det)

with L_W the image-level term (malignant part averaged over weakly labeled
images, benign part over all images), L_cls the summed region
classification loss on fully labeled images and L_det the mean detection
loss over fully labeled images that have at least one M region.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .domain import RegionBag, RegionLabel
from .model import CLS_INDEX, DET_INDEX, ForwardTrace, unmasked_detection

EPS = 1e-12


class DegenerateSplitError(ValueError):
    pass


def clamp(p):
    return np.clip(p, EPS, 1.0 - EPS)


@dataclass(frozen=True)
class SupervisionSplit:
    weak_indices: tuple[int, ...]
    full_indices: tuple[int, ...]
    m_f: int
    n: int
    det_indices: tuple[int, ...] = ()  # full images with >= 1 M-labeled region

    def __post_init__(self):
        w, f = set(self.weak_indices), set(self.full_indices)
        if w & f:
            raise ValueError("weak and full index sets overlap")
        if w | f != set(range(self.n)):
            raise ValueError("weak and full index sets must cover the batch")

    @classmethod
    def from_batch(cls, bags: Sequence[RegionBag],
                   labels: Sequence[list[RegionLabel] | None]) -> "SupervisionSplit":
        """Bags with region labels count as fully labeled, the rest as weak."""
        weak, full, det = [], [], []
        m_f = 0
        for t, lab in enumerate(labels):
            if lab is None:
                weak.append(t)
                continue
            full.append(t)
            m_f += sum(1 for y in lab if y is not RegionLabel.IGNORED)
            if any(y is RegionLabel.M for y in lab):
                det.append(t)
        return cls(tuple(weak), tuple(full), m_f, len(bags), tuple(det))


@dataclass(frozen=True)
class LossWeights:
    lambda1: float
    lambda2: float = 1.0
    beta: float = 1.0

    @classmethod
    def from_split(cls, split: SupervisionSplit, beta: float = 1.0,
                   lambda2: float = 1.0) -> "LossWeights":
        lambda1 = beta / split.m_f if split.m_f > 0 else beta
        return cls(lambda1=lambda1, lambda2=lambda2, beta=beta)


def weak_image_loss(trace: ForwardTrace, label) -> tuple[float, float]:
    """(-log p(y_M|x), -log p(y_B|x)) for one image."""
    out = []
    for c, y in (("M", label.y_M), ("B", label.y_B)):
        p = clamp(trace.p_image[DET_INDEX[c]])
        out.append(-math.log(p) if y else -math.log(1.0 - p))
    return out[0], out[1]


def full_cls_loss(trace: ForwardTrace, labels: Sequence[RegionLabel]) -> float:
    p = trace.p_cls
    total = 0.0
    for i, y in enumerate(labels):
        if y is RegionLabel.M:
            total -= math.log(clamp(p[i, CLS_INDEX["M"]]))
        elif y is RegionLabel.BN:
            total -= math.log(clamp(p[i, CLS_INDEX["B"]] + p[i, CLS_INDEX["N"]]))
    return total


def full_det_loss(trace: ForwardTrace, labels: Sequence[RegionLabel]) -> float | None:
    """-log of the unmasked malignant detection mass on M-labeled regions.

    Returns None when the image has no M-labeled region (the image is then
    left out of the detection average).
    """
    sel = np.array([y is RegionLabel.M for y in labels])
    if not sel.any():
        return None
    s = unmasked_detection(trace, "M")[sel].sum()
    return -math.log(min(max(s, EPS), 1.0))


@dataclass(frozen=True)
class TermCoefficients:
    weak_M: float
    weak_B: float
    cls: float
    det: float
    weak_B_indices: tuple[int, ...]


def term_coefficients(split: SupervisionSplit, weights: LossWeights,
                      b_term_all: bool = True, skip_empty_weak: bool = False) -> TermCoefficients:
    """Per-image multipliers of each loss term for a batch."""
    n_w = len(split.weak_indices)
    if n_w == 0 and not skip_empty_weak:
        raise DegenerateSplitError("no weakly labeled images in the batch")
    weak_M = 1.0 / n_w if n_w else 0.0
    if b_term_all:
        b_idx = tuple(range(split.n))
        weak_B = 1.0 / split.n
    else:
        b_idx = split.weak_indices
        weak_B = weak_M
    n_det = len(split.det_indices)
    return TermCoefficients(
        weak_M=weak_M,
        weak_B=weak_B,
        cls=weights.lambda2 * weights.lambda1,
        det=weights.lambda2 / n_det if n_det else 0.0,
        weak_B_indices=b_idx,
    )


def loss_terms(traces: Sequence[ForwardTrace], bags: Sequence[RegionBag],
               labels: Sequence[list[RegionLabel] | None], split: SupervisionSplit,
               weights: LossWeights, b_term_all: bool = True,
               skip_empty_weak: bool = False) -> dict[str, float]:
    """Unweighted component sums plus the weighted total."""
    co = term_coefficients(split, weights, b_term_all, skip_empty_weak)
    weak = [weak_image_loss(tr, bag.weak_label) for tr, bag in zip(traces, bags)]
    weak_M = math.fsum(weak[t][0] for t in split.weak_indices)
    weak_B = math.fsum(weak[t][1] for t in co.weak_B_indices)
    cls = math.fsum(full_cls_loss(traces[t], labels[t]) for t in split.full_indices)
    det = 0.0
    if traces and traces[0].variant.has_detection:
        det = math.fsum(full_det_loss(traces[t], labels[t]) for t in split.det_indices)
    L_W = co.weak_M * weak_M + co.weak_B * weak_B
    L_F_scaled = co.cls * cls + co.det * det
    return {"weak_M": weak_M, "weak_B": weak_B, "cls": cls, "det": det,
            "L_W": L_W, "L_F": L_F_scaled, "total": L_W + L_F_scaled}


def total_loss(traces: Sequence[ForwardTrace], bags: Sequence[RegionBag],
               labels: Sequence[list[RegionLabel] | None], split: SupervisionSplit,
               weights: LossWeights, b_term_all: bool = True,
               skip_empty_weak: bool = False) -> float:
    return loss_terms(traces, bags, labels, split, weights, b_term_all, skip_empty_weak)["total"]
