"""Gradient-check suite and annotation-ratio / variant sweeps."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .domain import RegionBag, label_regions
from .evaluation import (classification_report, froc, froc_sensitivity_at, score_bags)
from .model import ModelParams, Variant
from .objectives import LossWeights, SupervisionSplit
from .seeding import derive_rng
from .synthdata import GenConfig, apply_full_ratio, generate
from .training import (TrainConfig, backward, batch_loss, finite_difference_oracle,
                       relative_errors, train)

log = logging.getLogger(__name__)

SPLIT_KINDS = ("weak", "semi", "full")
DEFAULT_RATIOS = (0.0, 0.25, 0.5, 0.75, 1.0)
SWEEP_FPPI = 0.5


# --------------------------------------------------------------------------
# gradient check


@dataclass
class GradcheckCase:
    index: int
    variant: Variant
    split: str
    errors: dict[str, float]

    @property
    def worst(self) -> float:
        return max(self.errors.values())


def _gradcheck_batch(rng: np.random.Generator, split: str, seed: int) -> list[RegionBag]:
    cols, rows = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    cfg = GenConfig(n_images=int(rng.integers(2, 5)), image_width=224 + 112 * (cols - 1),
                    image_height=224 + 112 * (rows - 1), feature_dim=int(rng.integers(3, 7)),
                    separation=1.0, lesion_size_range=(48, 224), seed=seed)
    bags = generate(cfg)
    if split == "weak":
        return bags
    if split == "full":
        return [RegionBag(b.image_id, b.features, b.geometry, b.weak_label, b.annotations, "full")
                for b in bags]
    # semi: first bag full, second weak, the rest random
    out = []
    for t, b in enumerate(bags):
        sup = "full" if t == 0 else "weak" if t == 1 else ("full" if rng.random() < 0.5 else "weak")
        out.append(RegionBag(b.image_id, b.features, b.geometry, b.weak_label, b.annotations, sup))
    return out


def _random_params(rng, feature_dim: int, variant: Variant) -> ModelParams:
    d_h = int(rng.integers(2, 6))
    return ModelParams(W=rng.normal(0, 0.7, (feature_dim, d_h)), b=rng.normal(0, 0.3, d_h),
                       Wc=rng.normal(0, 1.0, (d_h, 3)), bc=rng.normal(0, 0.5, 3),
                       U=rng.normal(0, 1.0, (d_h, 2)), bu=rng.normal(0, 0.5, 2),
                       k=int(rng.integers(1, 5)), variant=variant)


def gradcheck_suite(n_configs: int = 100, seed: int = 0, step: float = 1e-4,
                    variants: Sequence[Variant] = tuple(Variant),
                    splits: Sequence[str] = SPLIT_KINDS, l2: float = 1e-3,
                    sign_flip: str | None = None) -> list[GradcheckCase]:
    """Analytic vs central-difference gradients over random small problems.

    Cases cycle through every (variant, split) pair. ``sign_flip`` negates
    one analytic gradient tensor, to confirm the check can fail.
    """
    combos = [(Variant(v), s) for v in variants for s in splits]
    cases = []
    for i in range(n_configs):
        variant, split = combos[i % len(combos)]
        rng = derive_rng(seed, "gradcheck", i)
        bags = _gradcheck_batch(rng, split, seed * 100003 + i)
        params = _random_params(rng, bags[0].features.shape[1], variant)
        labels = [label_regions(b) if b.supervision == "full" else None for b in bags]
        split_obj = SupervisionSplit.from_batch(bags, labels)
        weights = LossWeights.from_split(split_obj, beta=float(rng.uniform(0.5, 2.0)),
                                         lambda2=float(rng.uniform(0.5, 2.0)))
        _, grads, traces = backward(params, bags, labels, weights, l2=l2, skip_empty_weak=True)
        if sign_flip is not None:
            grads[sign_flip] = -grads[sign_flip]
        masks = [tr.mask for tr in traces]

        def loss_fn(p, bags=bags, labels=labels, weights=weights, masks=masks):
            return batch_loss(p, bags, labels, weights, masks=masks, l2=l2,
                              skip_empty_weak=True)[0]

        numeric = finite_difference_oracle(params, bags, labels, weights, step=step,
                                           loss_fn=loss_fn)
        cases.append(GradcheckCase(i, variant, split, relative_errors(grads, numeric)))
    return cases


def worst_per_tensor(cases: Iterable[GradcheckCase]) -> dict[str, float]:
    out: dict[str, float] = {}
    for c in cases:
        for name, e in c.errors.items():
            out[name] = max(out.get(name, 0.0), e)
    return out


# --------------------------------------------------------------------------
# sweeps


@dataclass
class SweepRow:
    variant: str
    ratio: float
    seed: int
    auroc: float
    paucr: float
    spec85: float
    spec90: float
    froc_sens: float

    FIELDS = ("variant", "ratio", "seed", "AUROC", "pAUCR", "spec@0.85", "spec@0.90",
              f"FROC_sens@FPPI={SWEEP_FPPI}")

    def values(self) -> list:
        return [self.variant, repr(self.ratio), self.seed, repr(self.auroc), repr(self.paucr),
                repr(self.spec85), repr(self.spec90), repr(self.froc_sens)]


def evaluate_run(train_bags: Sequence[RegionBag], test_bags: Sequence[RegionBag],
                 config: TrainConfig, ratio: float) -> SweepRow:
    tagged = apply_full_ratio(train_bags, ratio, config.seed)
    result = train(tagged, config)
    scored = score_bags(test_bags, result.params)
    rep = classification_report(scored, "MvsBN")
    sens = froc_sensitivity_at(froc(scored, "M"), SWEEP_FPPI)
    return SweepRow(config.variant.value, float(ratio), config.seed, rep["AUROC"], rep["pAUCR"],
                    rep["spec@0.85"], rep["spec@0.90"], sens)


def run_sweep(train_bags: Sequence[RegionBag], test_bags: Sequence[RegionBag],
              base: TrainConfig, ratios: Sequence[float] = DEFAULT_RATIOS,
              seeds: Sequence[int] = (0, 1, 2, 3, 4),
              variants: Sequence[Variant] = (Variant.CLS_DET_RS,)) -> list[SweepRow]:
    """Train and evaluate every (variant, ratio, seed); rows sorted in that order."""
    rows = []
    for v in variants:
        for r in ratios:
            for s in seeds:
                cfg = replace(base, variant=Variant(v), seed=int(s))
                rows.append(evaluate_run(train_bags, test_bags, cfg, r))
                log.info("sweep %s ratio=%.2f seed=%d auroc=%.4f froc=%.4f", v, r, s,
                         rows[-1].auroc, rows[-1].froc_sens)
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SweepRow.FIELDS)
    for r in rows:
        w.writerow(r.values())
    return buf.getvalue()


def group_stats(rows: Sequence[SweepRow], key, metric: str) -> dict:
    """Mean and sample std of ``metric`` per group, plus the group size."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(key(r), []).append(getattr(r, metric))
    return {k: (float(np.mean(v)), float(np.std(v, ddof=1)) if len(v) > 1 else 0.0, len(v))
            for k, v in groups.items()}


def pooled_standard_error(stats: Sequence[tuple[float, float, int]]) -> float:
    """sqrt(mean within-group variance / n): the standard error of one group mean."""
    var = np.mean([s ** 2 for _, s, _ in stats])
    n = np.mean([k for _, _, k in stats])
    return float(np.sqrt(var / n))


# --------------------------------------------------------------------------
# hard synthetic setting: replicated runs with fresh data per seed


def _hard_train_config() -> TrainConfig:
    # beta scales the per-region classification mean; with ~3 M regions out
    # of 77 the default beta=1 leaves all-annotated runs with too little
    # positive signal once the weak M term holds only negatives
    return TrainConfig(epochs=20, batch_size=8, lr=1e-3, beta=50.0)


@dataclass
class HardSetting:
    """Low-separation data on which supervision ratios and variants differ.

    Each replicate seed draws its own training and test sets, so the spread
    across seeds covers data as well as initialization and dropout.
    """
    n_train: int = 1000
    n_test: int = 300
    separation: float = 1.5
    train_config: TrainConfig = field(default_factory=_hard_train_config)

    def datasets(self, seed: int) -> tuple[list[RegionBag], list[RegionBag]]:
        train_bags = generate(GenConfig(n_images=self.n_train, separation=self.separation,
                                        seed=seed))
        test_bags = generate(GenConfig(n_images=self.n_test, separation=self.separation,
                                       seed=seed + 1000))
        return train_bags, test_bags


def replicate(setting: HardSetting, arms: Sequence[tuple[Variant, float]],
              seeds: Sequence[int] = (0, 1, 2, 3, 4)) -> list[SweepRow]:
    """One row per (seed, arm); an arm is a (variant, full ratio) pair."""
    rows = []
    for s in seeds:
        train_bags, test_bags = setting.datasets(int(s))
        for variant, ratio in arms:
            cfg = replace(setting.train_config, variant=Variant(variant), seed=int(s))
            rows.append(evaluate_run(train_bags, test_bags, cfg, ratio))
            log.info("replicate %s ratio=%.2f seed=%d auroc=%.4f froc=%.4f", variant, ratio, s,
                     rows[-1].auroc, rows[-1].froc_sens)
    return rows
