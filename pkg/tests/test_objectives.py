import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dualmil.domain import RegionLabel as RL
from dualmil.model import Variant
from dualmil.objectives import (DegenerateSplitError, LossWeights, SupervisionSplit, full_cls_loss,
                                full_det_loss, loss_terms, total_loss, weak_image_loss)
from dualmil.domain import WeakLabel

from conftest import make_bag, make_trace


def one_region(p_m, p_b):
    return make_trace([[1 - p_m - p_b, p_b, p_m]])


class TestWeakImageLoss:
    def test_perfect(self):
        assert weak_image_loss(one_region(1.0, 0.0), WeakLabel(1, 0)) == pytest.approx((0, 0), abs=1e-11)

    def test_both_half(self):
        lm, lb = weak_image_loss(one_region(0.5, 0.5), WeakLabel(1, 0))
        assert lm + lb == pytest.approx(-2 * math.log(0.5), abs=1e-9)
        assert lm + lb == pytest.approx(1.3863, abs=1e-4)

    def test_benign_false_positive(self):
        _, lb = weak_image_loss(one_region(0.0, 0.9), WeakLabel(0, 0))
        assert lb == pytest.approx(-math.log(0.1), abs=1e-9)
        assert lb == pytest.approx(2.3026, abs=1e-4)

    def test_clamped_extremes_finite(self):
        lm, lb = weak_image_loss(one_region(0.0, 1.0), WeakLabel(1, 0))
        assert math.isfinite(lm) and math.isfinite(lb)
        assert lm == pytest.approx(-math.log(1e-12))

    @given(st.floats(0.01, 0.98), st.floats(0.001, 0.01))
    def test_strictly_decreasing_toward_label(self, p, dp):
        lo, _ = weak_image_loss(one_region(p, 0.0), WeakLabel(1, 0))
        hi, _ = weak_image_loss(one_region(p + dp, 0.0), WeakLabel(1, 0))
        assert hi < lo


class TestFullClsLoss:
    def test_perfect(self):
        tr = make_trace([[0, 0, 1.0], [0.5, 0.5, 0]])
        assert full_cls_loss(tr, [RL.M, RL.BN]) == pytest.approx(0, abs=1e-11)

    def test_half_m(self):
        tr = make_trace([[0.25, 0.25, 0.5]])
        assert full_cls_loss(tr, [RL.M]) == pytest.approx(-math.log(0.5), abs=1e-9)
        assert full_cls_loss(tr, [RL.M]) == pytest.approx(0.6931, abs=1e-4)

    def test_bn_complement(self):
        tr = make_trace([[0.4, 0.3, 0.3]])
        assert full_cls_loss(tr, [RL.BN]) == pytest.approx(-math.log(0.7), abs=1e-9)
        assert full_cls_loss(tr, [RL.BN]) == pytest.approx(0.3567, abs=1e-4)

    def test_ignored_contributes_nothing(self):
        tr = make_trace([[0.4, 0.3, 0.3], [0.1, 0.1, 0.8]])
        assert full_cls_loss(tr, [RL.IGNORED, RL.IGNORED]) == 0.0


class TestFullDetLoss:
    def test_half_mass(self):
        tr = make_trace(np.full((3, 3), 1 / 3), det_logits=np.log([[1, 0.25], [1, 0.25], [1, 0.5]]))
        assert full_det_loss(tr, [RL.M, RL.M, RL.BN]) == pytest.approx(-math.log(0.5), abs=1e-9)

    def test_all_mass_on_m(self):
        tr = make_trace(np.full((2, 3), 1 / 3), det_logits=[[0, 50.0], [0, -50.0]])
        assert full_det_loss(tr, [RL.M, RL.BN]) == pytest.approx(0, abs=1e-12)

    def test_single_region(self):
        tr = make_trace([[0.3, 0.3, 0.4]], det_logits=[[3.0, -7.0]])
        assert full_det_loss(tr, [RL.M]) == 0.0

    def test_no_m_region_skipped(self):
        tr = make_trace(np.full((2, 3), 1 / 3))
        assert full_det_loss(tr, [RL.BN, RL.IGNORED]) is None

    def test_unmasked(self):
        # the masked distribution puts zero mass on region 0, the loss must not
        tr = make_trace(np.full((2, 3), 1 / 3), det_logits=[[0, 0], [0, 0]],
                        mask=[[1, 0], [1, 1]], p_det=[[0.5, 0.0], [0.5, 1.0]])
        assert full_det_loss(tr, [RL.M, RL.BN]) == pytest.approx(math.log(2), abs=1e-12)

    @given(st.floats(-1e3, 1e3))
    def test_shift_invariant(self, c):
        logits = np.array([[0.0, 0.3], [0.0, -1.2], [0.0, 2.0]])
        a = full_det_loss(make_trace(np.full((3, 3), 1 / 3), det_logits=logits), [RL.M, RL.BN, RL.M])
        b = full_det_loss(make_trace(np.full((3, 3), 1 / 3), det_logits=logits + c),
                          [RL.M, RL.BN, RL.M])
        assert a == pytest.approx(b, abs=1e-9)


def two_image_batch():
    """Weak image with both weak terms 0.5; full image with L_cls = 1, L_det = 0.2."""
    q = math.exp(-0.5)
    weak_tr = make_trace([[0.0, 1 - q, q]])
    weak_bag = make_bag(np.zeros((1, 2)), label=(1, 0), image_id="w")
    pd = math.exp(-0.2)
    full_tr = make_trace([[1 - math.exp(-1) - 0.1, 0.1, math.exp(-1)], [0.5, 0.3, 0.2]],
                         det_logits=[[0.0, math.log(pd)], [0.0, math.log(1 - pd)]])
    full_bag = make_bag(np.zeros((2, 2)), label=(1, 0), supervision="full", image_id="f")
    labels = [None, [RL.M, RL.IGNORED]]
    return [weak_tr, full_tr], [weak_bag, full_bag], labels


def test_two_image_total_by_hand():
    traces, bags, labels = two_image_batch()
    split = SupervisionSplit.from_batch(bags, labels)
    assert split.m_f == 1 and split.weak_indices == (0,) and split.full_indices == (1,)
    weights = LossWeights.from_split(split)
    assert weights.lambda1 == 1.0 and weights.lambda2 == 1.0

    # independent assembly: plain arithmetic on the constructed probabilities
    pd = math.exp(-0.2)
    pm_full = pd * math.exp(-1) + (1 - pd) * 0.2
    pb_full = 0.5 * 0.1 + 0.5 * 0.3  # uniform B detection over two regions
    weak_m = 0.5
    weak_b_sum = 0.5 + (-math.log(1 - pb_full))
    expected = weak_m / 1 + weak_b_sum / 2 + 1.0 * 1.0 * 1.0 + 0.2 / 1
    assert traces[1].p_image[1] == pytest.approx(pm_full)
    assert total_loss(traces, bags, labels, split, weights) == pytest.approx(expected, abs=1e-9)


def test_weak_only_is_mean_weak_loss(rng):
    traces, bags = [], []
    for t in range(5):
        p = rng.dirichlet(np.ones(3), size=4)
        traces.append(make_trace(p))
        bags.append(make_bag(np.zeros((4, 2)), label=(t % 2, t // 3), image_id=str(t)))
    labels = [None] * 5
    split = SupervisionSplit.from_batch(bags, labels)
    total = total_loss(traces, bags, labels, split, LossWeights.from_split(split))
    direct = sum(sum(weak_image_loss(tr, b.weak_label)) for tr, b in zip(traces, bags)) / 5
    assert total == pytest.approx(direct, abs=1e-12)


def test_beta_doubles_cls_term():
    traces, bags, labels = two_image_batch()
    split = SupervisionSplit.from_batch(bags, labels)
    a = loss_terms(traces, bags, labels, split, LossWeights.from_split(split, beta=1.0))
    b = loss_terms(traces, bags, labels, split, LossWeights.from_split(split, beta=2.0))
    assert b["total"] - a["total"] == pytest.approx(a["cls"] * split.m_f ** -1, abs=1e-12)


def test_b_term_weak_only_option():
    traces, bags, labels = two_image_batch()
    split = SupervisionSplit.from_batch(bags, labels)
    terms = loss_terms(traces, bags, labels, split, LossWeights.from_split(split), b_term_all=False)
    assert terms["L_W"] == pytest.approx(1.0, abs=1e-9)


def test_degenerate_split():
    traces, bags, labels = two_image_batch()
    labels = [[RL.BN], labels[1]]
    split = SupervisionSplit.from_batch(bags, labels)
    with pytest.raises(DegenerateSplitError):
        total_loss(traces, bags, labels, split, LossWeights.from_split(split))


def test_split_must_cover_batch():
    with pytest.raises(ValueError):
        SupervisionSplit((0,), (0, 1), 1, 2)


def test_components_nonnegative_finite(rng):
    for variant in Variant:
        traces, bags, labels = [], [], []
        for t in range(4):
            traces.append(make_trace(rng.dirichlet(np.full(3, 0.05), size=3),
                                     det_logits=rng.normal(0, 300, (3, 2)), variant=variant))
            bags.append(make_bag(np.zeros((3, 2)), label=(1, t % 2),
                                 supervision="weak" if t < 2 else "full", image_id=str(t)))
            labels.append(None if t < 2 else [RL.M, RL.BN, RL.IGNORED])
        split = SupervisionSplit.from_batch(bags, labels)
        terms = loss_terms(traces, bags, labels, split, LossWeights.from_split(split))
        assert all(math.isfinite(v) and v >= 0 for v in terms.values())
