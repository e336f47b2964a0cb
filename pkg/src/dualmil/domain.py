"""Core data types, region-grid geometry, IoM and region labeling."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

import numpy as np

DEFAULT_SIDE = 224
DEFAULT_STRIDE = 112
DEFAULT_ALPHA = 0.5


class GeometryError(ValueError):
    pass


class Rect(NamedTuple):
    """Half-open axis-aligned rectangle [x_min, x_max) x [y_min, y_max)."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


class RegionGeometry(NamedTuple):
    row_index: int
    col_index: int
    x0: int
    y0: int
    side: int

    @property
    def rect(self) -> Rect:
        return Rect(self.x0, self.y0, self.x0 + self.side, self.y0 + self.side)


class WeakLabel(NamedTuple):
    y_M: int
    y_B: int

    @property
    def true_class(self) -> str:
        return {(0, 0): "N", (0, 1): "B", (1, 0): "M", (1, 1): "MB"}[(self.y_M, self.y_B)]


@dataclass(frozen=True)
class LesionAnnotation:
    cls: str  # "M" or "B"
    box: Rect

    def __post_init__(self):
        if self.cls not in ("M", "B"):
            raise ValueError(f"lesion class must be M or B, got {self.cls!r}")
        b = self.box
        if not (b.x_max > b.x_min and b.y_max > b.y_min):
            raise GeometryError(f"lesion box has non-positive area: {b}")


class RegionLabel(str, Enum):
    M = "M"
    BN = "BN"
    IGNORED = "Ignored"


@dataclass
class RegionBag:
    """One image: m region feature rows plus grid geometry and labels."""

    image_id: str
    features: np.ndarray
    geometry: list[RegionGeometry]
    weak_label: WeakLabel
    annotations: list[LesionAnnotation] = field(default_factory=list)
    supervision: str = "weak"  # "weak" or "full"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"{self.image_id}: features must be an m x D matrix with m >= 1")
        if len(self.geometry) != self.features.shape[0]:
            raise ValueError(f"{self.image_id}: {len(self.geometry)} geometries for "
                             f"{self.features.shape[0]} feature rows")
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"{self.image_id}: non-finite feature values")
        if self.supervision not in ("weak", "full"):
            raise ValueError(f"{self.image_id}: supervision must be weak or full")

    @property
    def m(self) -> int:
        return self.features.shape[0]

    @property
    def true_class(self) -> str:
        return self.weak_label.true_class

    def lesions(self, cls: str) -> list[Rect]:
        return [a.box for a in self.annotations if a.cls == cls]


def build_grid(image_width: int, image_height: int, side: int = DEFAULT_SIDE,
               stride: int = DEFAULT_STRIDE) -> list[RegionGeometry]:
    """All square windows that fit inside the image, row-major."""
    if stride <= 0 or side <= 0:
        raise GeometryError("side and stride must be positive")
    if side > image_width or side > image_height:
        raise GeometryError(f"empty grid: {side}px window does not fit "
                            f"{image_width}x{image_height} image")
    n_cols = (image_width - side) // stride + 1
    n_rows = (image_height - side) // stride + 1
    return [RegionGeometry(r, c, c * stride, r * stride, side)
            for r in range(n_rows) for c in range(n_cols)]


def grid_from_shape(n_rows: int, n_cols: int, side: int, stride: int) -> list[RegionGeometry]:
    return [RegionGeometry(r, c, c * stride, r * stride, side)
            for r in range(n_rows) for c in range(n_cols)]


def intersection_area(a: Rect, b: Rect) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iom(region: Rect, lesion: Rect) -> float:
    """Intersection over the smaller of the two areas."""
    ra, la = region.area, lesion.area
    if not (region.x_max > region.x_min and region.y_max > region.y_min) or \
            not (lesion.x_max > lesion.x_min and lesion.y_max > lesion.y_min):
        raise GeometryError("iom requires rectangles with positive area")
    return intersection_area(region, lesion) / min(ra, la)


def label_regions(bag: RegionBag, alpha: float = DEFAULT_ALPHA) -> list[RegionLabel]:
    """Region labels from malignant annotations.

    M if IoM >= alpha with any malignant lesion, BN if disjoint from all of
    them, Ignored otherwise. Benign annotations are not used.
    """
    if bag.supervision != "full":
        raise ValueError(f"{bag.image_id}: region labels need a fully supervised bag")
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    malignant = bag.lesions("M")
    labels = []
    for g in bag.geometry:
        r = g.rect
        best = max((iom(r, c) for c in malignant), default=0.0)
        if best >= alpha:
            labels.append(RegionLabel.M)
        elif best == 0.0:
            labels.append(RegionLabel.BN)
        else:
            labels.append(RegionLabel.IGNORED)
    return labels
