"""Synthetic region-feature bags with planted lesions, and the text dataset format.

Feature model: every region is isotropic unit noise around a class mean.
Background regions sit at the origin; a region whose IoM with a planted
lesion is at least 0.5 is shifted by ``separation`` along the lesion
class's axis (axis 0 for M, axis 1 for B). Malignant takes precedence when
a region covers lesions of both kinds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .domain import (DEFAULT_SIDE, DEFAULT_STRIDE, LesionAnnotation, Rect, RegionBag, WeakLabel,
                     build_grid, grid_from_shape, iom)
from .seeding import derive_rng

CLASSES = ("N", "B", "M", "MB")
HEADER = "DMILDS"
VERSION = "v1"
PLANT_IOM = 0.5


class GenerationError(RuntimeError):
    pass


class DatasetParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass
class GenConfig:
    n_images: int = 300
    image_width: int = 896
    image_height: int = 1344
    side: int = DEFAULT_SIDE
    stride: int = DEFAULT_STRIDE
    feature_dim: int = 128
    class_mix: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    separation: float = 4.0
    lesion_size_range: tuple[int, int] = (64, 256)
    seed: int = 0
    full_ratio: float = 0.0
    max_retries: int = 100

    def __post_init__(self):
        self.class_mix = tuple(float(x) for x in self.class_mix)
        self.lesion_size_range = tuple(int(x) for x in self.lesion_size_range)
        if len(self.class_mix) != 4 or any(p < 0 for p in self.class_mix) \
                or not math.isclose(sum(self.class_mix), 1.0, abs_tol=1e-9):
            raise ValueError("class_mix must be four non-negative proportions summing to 1")
        if self.separation < 0:
            raise ValueError("separation must be >= 0")
        lo, hi = self.lesion_size_range
        if not 0 < lo <= hi or hi > min(self.image_width, self.image_height):
            raise ValueError("lesion sizes must be positive and fit inside the image")
        if not 0 <= self.full_ratio <= 1:
            raise ValueError("full_ratio must lie in [0, 1]")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")


def class_means(feature_dim: int, separation: float) -> dict[str, np.ndarray]:
    mu = {c: np.zeros(feature_dim) for c in ("N", "B", "M")}
    mu["M"][0] = separation
    mu["B"][1] = separation
    return mu


def _plant(rng, cfg: GenConfig, grid) -> Rect:
    lo, hi = cfg.lesion_size_range
    for _ in range(cfg.max_retries):
        w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        x0 = int(rng.integers(0, cfg.image_width - w + 1))
        y0 = int(rng.integers(0, cfg.image_height - h + 1))
        box = Rect(x0, y0, x0 + w, y0 + h)
        if any(iom(g.rect, box) >= PLANT_IOM for g in grid):
            return box
    raise GenerationError(f"could not place a lesion after {cfg.max_retries} tries")


def _generate_one(cfg: GenConfig, idx: int, grid, mu) -> RegionBag:
    rng = derive_rng(cfg.seed, "image", idx)
    cls = CLASSES[int(rng.choice(4, p=cfg.class_mix))]
    annotations = []
    for lesion_cls in ("M", "B"):
        if lesion_cls in cls:
            for _ in range(int(rng.integers(1, 4))):
                annotations.append(LesionAnnotation(lesion_cls, _plant(rng, cfg, grid)))
    feats = rng.normal(0.0, 1.0, size=(len(grid), cfg.feature_dim))
    for i, g in enumerate(grid):
        hit = {a.cls for a in annotations if iom(g.rect, a.box) >= PLANT_IOM}
        if "M" in hit:
            feats[i] += mu["M"]
        elif "B" in hit:
            feats[i] += mu["B"]
    label = WeakLabel(int("M" in cls), int("B" in cls))
    return RegionBag(f"img{idx:05d}", feats, list(grid), label, annotations, "weak")


def generate(cfg: GenConfig) -> list[RegionBag]:
    grid = build_grid(cfg.image_width, cfg.image_height, cfg.side, cfg.stride)
    mu = class_means(cfg.feature_dim, cfg.separation)
    bags = [_generate_one(cfg, i, grid, mu) for i in range(cfg.n_images)]
    return apply_full_ratio(bags, cfg.full_ratio, cfg.seed)


def apply_full_ratio(bags: Sequence[RegionBag], ratio: float, seed: int) -> list[RegionBag]:
    """Tag round(ratio * n) of the n M-containing, M-annotated bags as fully
    supervised and every other bag as weak.

    The chosen subsets are nested in ratio for a fixed seed.
    """
    if not 0 <= ratio <= 1:
        raise ValueError("ratio must lie in [0, 1]")
    candidates = [t for t, b in enumerate(bags) if b.weak_label.y_M and b.lesions("M")]
    n_full = int(math.floor(ratio * len(candidates) + 0.5))
    order = derive_rng(seed, "full-ratio").permutation(len(candidates))
    full = {candidates[j] for j in order[:n_full]}
    out = []
    for t, b in enumerate(bags):
        sup = "full" if t in full else "weak"
        out.append(b if b.supervision == sup else
                   RegionBag(b.image_id, b.features, b.geometry, b.weak_label, b.annotations, sup))
    return out


def class_counts(bags: Iterable[RegionBag]) -> dict[str, int]:
    counts = {c: 0 for c in CLASSES}
    for b in bags:
        counts[b.true_class] += 1
    return counts


# --------------------------------------------------------------------------
# dataset file format


def _fmt(x) -> str:
    return repr(float(x))


def dumps_dataset(bags: Sequence[RegionBag], feature_dim: int | None = None,
                  side: int = DEFAULT_SIDE, stride: int = DEFAULT_STRIDE) -> str:
    if bags:
        feature_dim = bags[0].features.shape[1]
        side = bags[0].geometry[0].side
        stride = _stride_of(bags[0], stride)
    elif feature_dim is None:
        feature_dim = 128
    lines = [f"{HEADER} {VERSION} {feature_dim} {side} {stride}"]
    for b in bags:
        if b.features.shape[1] != feature_dim:
            raise ValueError(f"{b.image_id}: feature_dim differs from the dataset's")
        rows = max(g.row_index for g in b.geometry) + 1
        cols = max(g.col_index for g in b.geometry) + 1
        if rows * cols != b.m:
            raise ValueError(f"{b.image_id}: geometry is not a full grid")
        lines.append(f"IMG {b.image_id} {rows} {cols} {b.weak_label.y_M} {b.weak_label.y_B} "
                     f"{b.supervision}")
        for a in b.annotations:
            lines.append("LES {} {} {} {} {}".format(a.cls, *(_fmt_coord(v) for v in a.box)))
        lines.extend(" ".join(map(repr, row)) for row in b.features.tolist())
    return "\n".join(lines) + "\n"


def _fmt_coord(v) -> str:
    return str(int(v)) if float(v).is_integer() else _fmt(v)


def _stride_of(bag: RegionBag, default: int) -> int:
    for g in bag.geometry:
        if g.col_index == 1 and g.row_index == 0:
            return g.x0
        if g.row_index == 1 and g.col_index == 0:
            return g.y0
    return default


def write_dataset(bags: Sequence[RegionBag], path, **kw) -> None:
    Path(path).write_text(dumps_dataset(bags, **kw))


def loads_dataset(text: str) -> list[RegionBag]:
    lines = text.splitlines()
    if not lines:
        raise DatasetParseError(1, "empty file, expected header")
    head = lines[0].split()
    if len(head) != 5 or head[0] != HEADER or head[1] != VERSION:
        raise DatasetParseError(1, f"bad header {lines[0]!r}")
    try:
        feature_dim, side, stride = (int(v) for v in head[2:])
    except ValueError:
        raise DatasetParseError(1, "header dimensions must be integers") from None

    bags = []
    pos = 1
    n = len(lines)
    while pos < n:
        line_no = pos + 1
        parts = lines[pos].split()
        if not parts:
            pos += 1
            continue
        if parts[0] != "IMG" or len(parts) != 7:
            raise DatasetParseError(line_no, f"expected IMG record, got {lines[pos][:40]!r}")
        image_id = parts[1]
        try:
            rows, cols, y_m, y_b = (int(v) for v in parts[2:6])
        except ValueError:
            raise DatasetParseError(line_no, f"image {image_id}: malformed IMG fields") from None
        supervision = parts[6]
        if supervision not in ("weak", "full") or y_m not in (0, 1) or y_b not in (0, 1):
            raise DatasetParseError(line_no, f"image {image_id}: bad label or supervision")
        pos += 1
        annotations = []
        while pos < n and lines[pos].startswith("LES"):
            p = lines[pos].split()
            try:
                if len(p) != 6:
                    raise ValueError
                annotations.append(LesionAnnotation(p[1], Rect(*(_parse_num(v) for v in p[2:]))))
            except ValueError:
                raise DatasetParseError(pos + 1, f"image {image_id}: malformed LES line") from None
            pos += 1
        m = rows * cols
        feats = np.empty((m, feature_dim))
        for i in range(m):
            if pos >= n:
                raise DatasetParseError(pos + 1, f"image {image_id}: truncated, expected {m} "
                                                 f"feature rows, found {i}")
            vals = lines[pos].split()
            if len(vals) != feature_dim:
                raise DatasetParseError(pos + 1, f"image {image_id}: feature row {i} has "
                                                 f"{len(vals)} values, expected {feature_dim}")
            try:
                feats[i] = [float(v) for v in vals]
            except ValueError:
                raise DatasetParseError(pos + 1, f"image {image_id}: non-numeric feature") from None
            pos += 1
        try:
            bags.append(RegionBag(image_id, feats, grid_from_shape(rows, cols, side, stride),
                                  WeakLabel(y_m, y_b), annotations, supervision))
        except ValueError as e:
            raise DatasetParseError(line_no, str(e)) from None
    return bags


def _parse_num(v: str):
    try:
        return int(v)
    except ValueError:
        return float(v)


def read_dataset(path) -> list[RegionBag]:
    return loads_dataset(Path(path).read_text())
