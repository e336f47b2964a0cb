"""Dual-branch forward pass: region classification, detection ranking,
top-k region selection and image-level aggregation."""

from __future__ import annotations

from dataclasses import dataclass, fields
from enum import Enum

import numpy as np

from .domain import RegionBag

# Column order of the classification branch and of the detection branch.
CLS_COLUMNS = ("N", "B", "M")
DET_COLUMNS = ("B", "M")
CLS_INDEX = {c: i for i, c in enumerate(CLS_COLUMNS)}
DET_INDEX = {c: i for i, c in enumerate(DET_COLUMNS)}

DEFAULT_K = 10
DEFAULT_HIDDEN = 128


class Variant(str, Enum):
    CLS_DET_RS = "cls-det-rs"
    CLS_DET = "cls-det"
    DB_BASELINE = "db-baseline"
    MAX_REGION = "max-region"

    @property
    def has_detection(self) -> bool:
        return self is not Variant.MAX_REGION

    @property
    def has_normal_class(self) -> bool:
        return self is not Variant.DB_BASELINE


class ShapeError(ValueError):
    pass


class InvalidMaskError(ValueError):
    pass


@dataclass
class ModelParams:
    """Shared layer (W, b), classifier (Wc, bc; columns N, B, M) and
    detectors (U, bu; columns B, M)."""

    W: np.ndarray
    b: np.ndarray
    Wc: np.ndarray
    bc: np.ndarray
    U: np.ndarray
    bu: np.ndarray
    k: int = DEFAULT_K
    variant: Variant = Variant.CLS_DET_RS

    TENSORS = ("W", "b", "Wc", "bc", "U", "bu")
    WEIGHTS = ("W", "Wc", "U")

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if self.k < 1:
            raise ValueError("k must be >= 1")
        d_in, d_h = self.W.shape
        expected = {"b": (d_h,), "Wc": (d_h, 3), "bc": (3,), "U": (d_h, 2), "bu": (2,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def feature_dim(self) -> int:
        return self.W.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.W.shape[1]

    def tensor_names(self) -> tuple[str, ...]:
        """Tensors that the variant actually uses."""
        if self.variant.has_detection:
            return self.TENSORS
        return ("W", "b", "Wc", "bc")

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in self.TENSORS}

    def copy(self) -> "ModelParams":
        return ModelParams(**{n: getattr(self, n).copy() for n in self.TENSORS},
                           k=self.k, variant=self.variant)

    def replace(self, **arrays) -> "ModelParams":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(arrays)
        return ModelParams(**kw)

    @classmethod
    def zeros(cls, feature_dim: int, hidden_dim: int = DEFAULT_HIDDEN, k: int = DEFAULT_K,
              variant: Variant = Variant.CLS_DET_RS) -> "ModelParams":
        return cls(W=np.zeros((feature_dim, hidden_dim)), b=np.zeros(hidden_dim),
                   Wc=np.zeros((hidden_dim, 3)), bc=np.zeros(3),
                   U=np.zeros((hidden_dim, 2)), bu=np.zeros(2), k=k, variant=variant)


@dataclass
class ForwardTrace:
    features: np.ndarray
    pre: np.ndarray          # affine output of the shared layer, before the rectifier
    dropout: np.ndarray      # multiplicative dropout factors (ones in infer mode)
    hidden: np.ndarray       # m x D_h
    cls_logits: np.ndarray   # m x 3
    p_cls: np.ndarray        # m x 3, columns N, B, M
    det_logits: np.ndarray   # m x 2, columns B, M
    mask: np.ndarray         # m x 2, {0, 1}
    p_det: np.ndarray        # m x 2, masked detection distributions
    p_image: np.ndarray      # (p(y_B=1|x), p(y_M=1|x))
    d_scores: np.ndarray     # m x 2, region scores
    variant: Variant

    @property
    def m(self) -> int:
        return self.hidden.shape[0]

    @property
    def p_M(self) -> float:
        return float(self.p_image[DET_INDEX["M"]])

    @property
    def p_B(self) -> float:
        return float(self.p_image[DET_INDEX["B"]])


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over entries where mask is 1; exact zeros elsewhere."""
    sel = np.asarray(mask) > 0
    if not sel.any():
        raise InvalidMaskError("mask selects no regions")
    out = np.zeros_like(logits, dtype=np.float64)
    z = logits[sel] - np.max(logits[sel])
    e = np.exp(z)
    out[sel] = e / e.sum()
    return out


def sample_dropout(rng: np.random.Generator, shape: tuple[int, ...], keep: float) -> np.ndarray:
    """Inverted dropout factors: 1/keep for kept units, 0 for dropped ones."""
    if not 0 < keep <= 1:
        raise ValueError("dropout keep probability must lie in (0, 1]")
    if keep == 1:
        return np.ones(shape)
    return (rng.random(shape) < keep) / keep


def shared_embed(features: np.ndarray, params: ModelParams,
                 dropout: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Returns (pre-activation, hidden). Dropout factors multiply the
    rectified output; pass None for inference."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != params.feature_dim:
        raise ShapeError(f"features of shape {features.shape} do not match "
                         f"feature_dim={params.feature_dim}")
    pre = features @ params.W + params.b
    hidden = np.maximum(pre, 0.0)
    if dropout is not None:
        hidden = hidden * dropout
    return pre, hidden


def classify_regions(hidden: np.ndarray, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Per-region class distribution over (N, B, M); returns (logits, probs).

    Without the normal class, the softmax runs over (B, M) and the N column
    is held at zero.
    """
    logits = hidden @ params.Wc + params.bc
    if params.variant.has_normal_class:
        return logits, softmax(logits, axis=1)
    probs = np.zeros_like(logits)
    probs[:, 1:] = softmax(logits[:, 1:], axis=1)
    return logits, probs


def select_regions(p_cls: np.ndarray, k: int, cls: str) -> np.ndarray:
    """Binary mask of the top-k regions by p_cls(cls); ties go to the lower index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    col = p_cls[:, CLS_INDEX[cls]]
    # stable sort on the negated column keeps lower indices first among ties
    order = np.argsort(-col, kind="stable")
    mask = np.zeros(len(col), dtype=np.int8)
    mask[order[:k]] = 1
    return mask


def detect_regions(hidden: np.ndarray, params: ModelParams, mask: np.ndarray,
                   cls: str) -> np.ndarray:
    j = DET_INDEX[cls]
    logits = hidden @ params.U[:, j] + params.bu[j]
    return masked_softmax(logits, mask)


def aggregate_image(p_cls: np.ndarray, p_det: np.ndarray) -> np.ndarray:
    """(p(y_B=1|x), p(y_M=1|x)) as detection-weighted averages of region probabilities."""
    return np.array([p_det[:, DET_INDEX[c]] @ p_cls[:, CLS_INDEX[c]] for c in DET_COLUMNS])


def score_regions(trace: ForwardTrace) -> np.ndarray:
    cols = [CLS_INDEX[c] for c in DET_COLUMNS]
    return trace.p_cls[:, cols] * trace.p_det


def compute_masks(p_cls: np.ndarray, params: ModelParams) -> np.ndarray:
    m = p_cls.shape[0]
    if params.variant is Variant.CLS_DET_RS:
        k = params.k
    elif params.variant is Variant.MAX_REGION:
        # the max-probability region alone: a one-region masked softmax is
        # a point mass, so the weighted average collapses to the max
        k = 1
    else:
        return np.ones((m, 2), dtype=np.int8)
    return np.stack([select_regions(p_cls, k, c) for c in DET_COLUMNS], axis=1)


def forward(bag: RegionBag | np.ndarray, params: ModelParams, mode: str = "infer",
            rng: np.random.Generator | None = None, keep: float = 0.5,
            dropout: np.ndarray | None = None, mask: np.ndarray | None = None) -> ForwardTrace:
    """Full forward pass for one bag.

    In train mode dropout factors are sampled from ``rng`` unless given
    explicitly. ``mask`` overrides region selection (used to freeze the
    discrete choices when differentiating numerically).
    """
    features = bag.features if isinstance(bag, RegionBag) else np.asarray(bag, dtype=np.float64)
    m = features.shape[0]
    if mode == "train" and dropout is None:
        if rng is None:
            raise ValueError("train mode needs an rng for dropout")
        dropout = sample_dropout(rng, (m, params.hidden_dim), keep)
    elif mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if dropout is None:
        dropout = np.ones((m, params.hidden_dim))

    pre, hidden = shared_embed(features, params, dropout)
    cls_logits, p_cls = classify_regions(hidden, params)
    if mask is None:
        mask = compute_masks(p_cls, params)
    mask = np.asarray(mask, dtype=np.int8)

    if params.variant.has_detection:
        det_logits = hidden @ params.U + params.bu
        p_det = np.stack([masked_softmax(det_logits[:, j], mask[:, j]) for j in range(2)], axis=1)
    else:
        det_logits = np.zeros((m, 2))
        p_det = mask.astype(np.float64)

    trace = ForwardTrace(features=features, pre=pre, dropout=dropout, hidden=hidden,
                         cls_logits=cls_logits, p_cls=p_cls, det_logits=det_logits, mask=mask,
                         p_det=p_det, p_image=aggregate_image(p_cls, p_det),
                         d_scores=np.zeros((m, 2)), variant=params.variant)
    trace.d_scores = score_regions(trace)
    return trace


def unmasked_detection(trace: ForwardTrace, cls: str = "M") -> np.ndarray:
    """Detection distribution over all regions, ignoring the selection mask."""
    return softmax(trace.det_logits[:, DET_INDEX[cls]])
