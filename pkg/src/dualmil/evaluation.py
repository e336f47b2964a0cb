"""Classification and localization metrics.

ROC curves run from the (0, 0) corner at threshold +inf through one point
per distinct score, ties grouped. FROC curves are computed per class from
region scores with IoM >= 0.5 as the localization criterion.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .domain import RegionBag, RegionGeometry, LesionAnnotation, iom
from .model import DET_INDEX, ModelParams, forward

LOCALIZATION_IOM = 0.5
DEFAULT_SENS_BAND = (0.8, 1.0)
DEFAULT_SENS_POINTS = (0.85, 0.90)
TASKS = ("MvsBN", "MBvsN")


class UndefinedMetricError(ValueError):
    pass


@dataclass
class ScoredImage:
    image_id: str
    p_M: float
    p_B: float
    true_class: str
    region_scores: np.ndarray  # m x 2, columns (d^B, d^M)
    geometry: list[RegionGeometry] = field(default_factory=list)
    annotations: list[LesionAnnotation] = field(default_factory=list)

    def lesions(self, cls: str):
        return [a.box for a in self.annotations if a.cls == cls]


@dataclass
class EvalCurve:
    points: list[tuple[float, float, float]]  # (threshold, x, y)
    kind: str  # "ROC" or "FROC"

    @property
    def x(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])

    @property
    def y(self) -> np.ndarray:
        return np.array([p[2] for p in self.points])


def score_bags(bags: Sequence[RegionBag], params: ModelParams) -> list[ScoredImage]:
    out = []
    for b in bags:
        tr = forward(b, params, "infer")
        out.append(ScoredImage(b.image_id, tr.p_M, tr.p_B, b.true_class, tr.d_scores,
                               list(b.geometry), list(b.annotations)))
    return out


def task_scores(scored: ScoredImage, task: str) -> tuple[float, int]:
    if task == "MvsBN":
        return scored.p_M, int(scored.true_class in ("M", "MB"))
    if task == "MBvsN":
        return max(scored.p_M, scored.p_B), int(scored.true_class != "N")
    raise ValueError(f"unknown task {task!r}")


def task_arrays(scored_set: Sequence[ScoredImage], task: str) -> tuple[np.ndarray, np.ndarray]:
    pairs = [task_scores(s, task) for s in scored_set]
    return np.array([p[0] for p in pairs], dtype=float), np.array([p[1] for p in pairs], dtype=int)


# --------------------------------------------------------------------------
# ROC family


def _check_binary(labels) -> tuple[int, int]:
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos + n_neg != labels.size:
        raise ValueError("labels must be 0/1")
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("both classes must be present")
    return n_pos, n_neg


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate: P(positive outscores negative), ties count 1/2."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n_pos, n_neg = _check_binary(labels)
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(len(s))
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        ranks[i:j + 1] = (i + j) / 2.0 + 1.0  # average rank of the tie group
        i = j + 1
    pos_rank_sum = ranks[labels[order] == 1].sum()
    u = pos_rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels) -> EvalCurve:
    """x = 1 - specificity, y = sensitivity, thresholds strictly decreasing."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n_pos, n_neg = _check_binary(labels)
    points = [(math.inf, 0.0, 0.0)]
    tp = fp = 0
    for thr in np.unique(scores)[::-1]:
        hit = scores == thr
        tp += int(np.sum(labels[hit] == 1))
        fp += int(np.sum(labels[hit] == 0))
        points.append((float(thr), fp / n_neg, tp / n_pos))
    return EvalCurve(points, "ROC")


def paucr(curve: EvalCurve, sens_lo: float = DEFAULT_SENS_BAND[0],
          sens_hi: float = DEFAULT_SENS_BAND[1]) -> float:
    """Mean specificity over the sensitivity band [sens_lo, sens_hi],
    integrating the piecewise-linear ROC exactly."""
    if not 0 <= sens_lo < sens_hi <= 1:
        raise ValueError("need 0 <= sens_lo < sens_hi <= 1")
    x, y = curve.x, curve.y
    area = 0.0
    for i in range(len(x) - 1):
        y0, y1 = y[i], y[i + 1]
        if y1 <= y0:
            continue  # horizontal segment: no extent along the sensitivity axis
        lo, hi = max(y0, sens_lo), min(y1, sens_hi)
        if hi <= lo:
            continue
        # specificity is linear in sensitivity on this segment
        def spec(t):
            return 1.0 - (x[i] + (x[i + 1] - x[i]) * (t - y0) / (y1 - y0))
        area += 0.5 * (spec(lo) + spec(hi)) * (hi - lo)
    return float(area / (sens_hi - sens_lo))


class SpecAtSens(NamedTuple):
    specificity: float
    reached: bool


def spec_at_sens(curve: EvalCurve, sens: float) -> SpecAtSens:
    """Specificity where the ROC first reaches ``sens``, interpolating linearly."""
    x, y = curve.x, curve.y
    for j in range(len(y)):
        if y[j] >= sens:
            if y[j] == sens or j == 0:
                return SpecAtSens(1.0 - float(x[j]), True)
            f = (sens - y[j - 1]) / (y[j] - y[j - 1])
            return SpecAtSens(1.0 - float(x[j - 1] + f * (x[j] - x[j - 1])), True)
    return SpecAtSens(0.0, False)


def classification_report(scored_set: Sequence[ScoredImage], task: str) -> dict[str, float]:
    scores, labels = task_arrays(scored_set, task)
    curve = roc_curve(scores, labels)
    out = {"AUROC": auroc(scores, labels), "pAUCR": paucr(curve)}
    for s in DEFAULT_SENS_POINTS:
        out[f"spec@{s:.2f}"] = spec_at_sens(curve, s).specificity
    return out


# --------------------------------------------------------------------------
# FROC


def _region_hits(scored: ScoredImage, cls: str) -> np.ndarray:
    """True where a region localizes some ground-truth lesion of class cls."""
    lesions = scored.lesions(cls)
    return np.array([any(iom(g.rect, c) >= LOCALIZATION_IOM for c in lesions)
                     for g in scored.geometry], dtype=bool)


def froc(scored_set: Sequence[ScoredImage], cls: str, thresholds=None,
         fppi_population: str = "all", classifier_filter: float | None = None,
         task: str = "MvsBN") -> EvalCurve:
    """Free-response curve for class ``cls``.

    y: fraction of images containing a ``cls`` lesion with at least one
    firing region (d^cls >= threshold) that localizes one (IoM >= 0.5).
    x: false-positive firings per image, averaged over all evaluated images
    (``fppi_population="all"``) or only the lesion-bearing ones ("tp").

    ``classifier_filter`` restricts evaluation to images flagged by the
    image-level classifier at that sensitivity operating point of ``task``.
    Default thresholds: every distinct region score plus one above the max.
    """
    images = list(scored_set)
    if classifier_filter is not None:
        images = _filter_by_operating_point(images, classifier_filter, task)
    col = DET_INDEX[cls]
    positives = [s for s in images if s.lesions(cls)]
    if not positives:
        raise UndefinedMetricError(f"no images with {cls} annotations")
    if fppi_population not in ("all", "tp"):
        raise ValueError("fppi_population must be 'all' or 'tp'")
    fp_images = images if fppi_population == "all" else positives

    scores = [s.region_scores[:, col] for s in images]
    hits = [_region_hits(s, cls) for s in images]
    pos_ids = {id(s) for s in positives}
    fp_ids = {id(s) for s in fp_images}

    # an image is detected at thr iff its best lesion-localizing score >= thr
    best_hit = np.array([sc[h].max() if h.any() else -math.inf
                         for s, sc, h in zip(images, scores, hits) if id(s) in pos_ids])
    best_hit.sort()
    miss_scores = np.sort(np.concatenate(
        [sc[~h] for s, sc, h in zip(images, scores, hits) if id(s) in fp_ids] + [np.empty(0)]))

    if thresholds is None:
        allv = np.unique(np.concatenate(scores))
        thresholds = np.concatenate([[math.inf], allv[::-1]])
    thr = np.array(sorted({float(t) for t in thresholds}, reverse=True))
    detected = len(best_hit) - np.searchsorted(best_hit, thr, side="left")
    false_pos = len(miss_scores) - np.searchsorted(miss_scores, thr, side="left")
    points = [(float(t), int(f) / len(fp_images), int(d) / len(positives))
              for t, f, d in zip(thr, false_pos, detected)]
    return EvalCurve(points, "FROC")


def froc_sensitivity_at(curve: EvalCurve, fppi: float) -> float:
    """Best sensitivity among operating points with FPPI <= fppi."""
    ok = [y for _, x, y in curve.points if x <= fppi]
    return max(ok) if ok else 0.0


def _filter_by_operating_point(images, sens: float, task: str):
    scores, labels = task_arrays(images, task)
    curve = roc_curve(scores, labels)
    thr = next(t for t, _, y in curve.points if y >= sens)
    return [s for s, v in zip(images, scores) if v >= thr]


# --------------------------------------------------------------------------
# text outputs


def curve_csv(curve: EvalCurve, task: str) -> str:
    buf = io.StringIO()
    buf.write(f"# kind={curve.kind} task={task}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "x", "y"])
    for t, x, y in curve.points:
        w.writerow([repr(float(t)), repr(float(x)), repr(float(y))])
    return buf.getvalue()


def write_curve(curve: EvalCurve, task: str, path) -> None:
    Path(path).write_text(curve_csv(curve, task))


def probability_plane_csv(scored_set: Sequence[ScoredImage]) -> str:
    if not scored_set:
        raise ValueError("nothing to export")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image_id", "p_M", "p_B", "true_class"])
    for s in scored_set:
        w.writerow([s.image_id, repr(float(s.p_M)), repr(float(s.p_B)), s.true_class])
    return buf.getvalue()


def probability_plane_export(scored_set: Sequence[ScoredImage], path) -> None:
    Path(path).write_text(probability_plane_csv(scored_set))


def read_probability_plane(path) -> list[tuple[str, float, float, str]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(r["image_id"], float(r["p_M"]), float(r["p_B"]), r["true_class"]) for r in rows]
