"""Loss family: analytic identities, continuity, and finite-difference
gradient verification for every member."""

import math

import numpy as np
import pytest
import torch

from seadet import boxes as boxops
from seadet import losses
from conftest import overlapping_pair, random_box


class TestBCEAndFocal:
    def test_bce_known_value(self):
        # -ln(0.8) for (p=0.8, y=1)
        v = float(losses.binary_cross_entropy(0.8, 1.0))
        assert v == pytest.approx(-math.log(0.8), rel=1e-9)

    def test_bce_clamps_extremes(self):
        v = float(losses.binary_cross_entropy(0.0, 1.0))
        assert v == pytest.approx(-math.log(losses.PROB_EPS))

    def test_bce_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            losses.binary_cross_entropy(1.2, 1.0)

    def test_focal_gamma0_is_alpha_weighted_ce(self):
        # gamma=0, alpha=0.5 -> exactly 0.5 * CE over a 100-point grid
        ps = np.linspace(0.01, 0.99, 100)
        for y in (0.0, 1.0):
            for p in ps:
                f = float(losses.focal_loss(p, y, alpha=0.5, gamma=0.0))
                ce = float(losses.binary_cross_entropy(p, y))
                assert abs(f - 0.5 * ce) < 1e-9

    def test_focal_downweights_easy_examples(self):
        easy = float(losses.focal_loss(0.95, 1.0, gamma=2.0))
        hard = float(losses.focal_loss(0.05, 1.0, gamma=2.0))
        assert hard > 100 * easy

    def test_focal_rejects_bad_params(self):
        with pytest.raises(ValueError):
            losses.focal_loss(0.5, 1.0, alpha=1.5)
        with pytest.raises(ValueError):
            losses.focal_loss(0.5, 1.0, gamma=-1.0)


class TestDeltaLosses:
    def test_l1_l2_smooth_known(self):
        p = torch.tensor([0.5, -2.0])
        t = torch.zeros(2)
        assert float(losses.reference_regression_loss("l1", p, t)) == 2.5
        assert float(losses.reference_regression_loss("l2", p, t)) == 4.25
        # smooth: 0.5*0.25 + (2 - 0.5)
        assert float(losses.reference_regression_loss("smooth_l1", p, t)) \
            == pytest.approx(1.625)

    def test_smooth_l1_continuity_at_one(self):
        lo = float(losses.reference_regression_loss(
            "smooth_l1", torch.tensor([1.0 - 1e-8]), torch.zeros(1)))
        hi = float(losses.reference_regression_loss(
            "smooth_l1", torch.tensor([1.0 + 1e-8]), torch.zeros(1)))
        assert abs(hi - lo) < 1e-6

    def test_balanced_l1_continuity_at_one(self):
        lo = float(losses.reference_regression_loss(
            "balanced_l1", torch.tensor([1.0 - 1e-8]), torch.zeros(1)))
        hi = float(losses.reference_regression_loss(
            "balanced_l1", torch.tensor([1.0 + 1e-8]), torch.zeros(1)))
        assert abs(hi - lo) < 1e-6

    def test_balanced_l1_amplifies_inliers_vs_smooth(self):
        # gradient at small |e| exceeds the smooth-l1 gradient
        e = torch.tensor([0.05], requires_grad=True)
        lb = losses.reference_regression_loss("balanced_l1", e, torch.zeros(1))
        (gb,) = torch.autograd.grad(lb, e)
        e2 = torch.tensor([0.05], requires_grad=True)
        ls = losses.reference_regression_loss("smooth_l1", e2, torch.zeros(1))
        (gs,) = torch.autograd.grad(ls, e2)
        assert float(gb) > float(gs)

    def test_unknown_kind_raises(self):
        with pytest.raises(ValueError):
            losses.reference_regression_loss("dice", torch.zeros(1),
                                             torch.zeros(1))


class TestIoUFamily:
    def test_iou_loss_zero_for_identical(self):
        b = torch.tensor([[0.0, 0.0, 4.0, 4.0]])
        assert float(losses.reference_regression_loss("iou", b, b)) == 0.0

    def test_giou_exceeds_iou_when_disjoint(self):
        p = torch.tensor([[0.0, 0.0, 2.0, 2.0]])
        t = torch.tensor([[10.0, 10.0, 12.0, 12.0]])
        li = float(losses.reference_regression_loss("iou", p, t))
        lg = float(losses.reference_regression_loss("giou", p, t))
        assert li == 1.0
        assert lg > 1.0

    def test_ciou_adds_center_and_aspect_terms(self):
        # equal-IoU pairs: larger center offset gives larger CIoU loss
        t = torch.tensor([[0.0, 0.0, 10.0, 10.0]])
        near = torch.tensor([[1.0, 0.0, 11.0, 10.0]])
        far = torch.tensor([[0.0, 0.0, 10.0, 10.0]]) * 0  # placeholder
        l_near = float(losses.reference_regression_loss("ciou", near, t))
        l_iou = float(losses.reference_regression_loss("iou", near, t))
        assert l_near > l_iou

    def test_focal_eiou_is_iou_pow_times_eiou(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            p, t = overlapping_pair(rng)
            pt = torch.tensor(p[None])
            tt = torch.tensor(t[None])
            for gamma in (0.25, 0.5, 1.0):
                fe = float(losses.focal_eiou_loss_t(pt, tt, gamma))
                e = float(losses.eiou_loss_t(pt, tt))
                i = float(losses.box_iou_t(pt, tt))
                assert fe == pytest.approx(i ** gamma * e, rel=1e-9)


class TestFIoU:
    def test_known_worked_example(self):
        # pred (0,0,2,2), target = anchor = (0,0,2,4), eta = 1:
        # IoU = 0.5, deltas differ by ty=0.25, th=ln 2 -> loss = 0.5215
        pred = torch.tensor([[0.0, 0.0, 2.0, 2.0]])
        tgt = torch.tensor([[0.0, 0.0, 2.0, 4.0]])
        v = float(losses.fiou_loss(pred, tgt, tgt, eta=1.0))
        expected = 0.5 * (1 - 0.5 + 0.25 ** 2 + math.log(2.0) ** 2)
        assert v == pytest.approx(expected, abs=1e-4)
        assert v == pytest.approx(0.5215, abs=1e-3)

    def test_zero_on_disjoint_when_eta_positive(self):
        pred = torch.tensor([[0.0, 0.0, 2.0, 2.0]])
        tgt = torch.tensor([[10.0, 10.0, 12.0, 12.0]])
        anchor = torch.tensor([[0.0, 0.0, 4.0, 4.0]])
        for eta in (0.25, 0.5, 1.0, 2.0):
            assert float(losses.fiou_loss(pred, tgt, anchor, eta)) == 0.0

    def test_eta_zero_is_iou_plus_squared_deltas(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            p, t = overlapping_pair(rng)
            a = random_box(rng)
            pt, tt, at = (torch.tensor(x[None]) for x in (p, t, a))
            v = float(losses.fiou_loss(pt, tt, at, eta=0.0))
            i = float(losses.box_iou_t(pt, tt))
            dp = losses.encode_t(pt, at)
            dt = losses.encode_t(tt, at)
            sq = float(((dp - dt) ** 2).sum())
            assert v == pytest.approx(1.0 - i + sq, rel=1e-9)

    def test_zero_at_perfect_prediction(self):
        b = torch.tensor([[2.0, 2.0, 8.0, 8.0]])
        a = torch.tensor([[0.0, 0.0, 10.0, 10.0]])
        assert float(losses.fiou_loss(b, b, a)) == pytest.approx(0.0, abs=1e-9)

    def test_detached_factor_same_forward_value(self):
        rng = np.random.default_rng(23)
        for _ in range(20):
            p, t = overlapping_pair(rng)
            a = random_box(rng)
            pt, tt, at = (torch.tensor(x[None]) for x in (p, t, a))
            v1 = float(losses.fiou_loss(pt, tt, at, 0.5))
            v2 = float(losses.fiou_loss(pt, tt, at, 0.5, detach_factor=True))
            assert v1 == v2

    def test_detached_factor_gradient_points_to_overlap(self):
        # the weighting form never rewards pushing boxes apart
        a = torch.tensor([[0.0, 0.0, 16.0, 16.0]])
        t = torch.tensor([[6.0, 2.0, 24.0, 20.0]])
        p = torch.tensor([[0.0, 0.0, 16.0, 16.0]], requires_grad=True)
        loss = losses.fiou_loss(p, t, a, 0.5, detach_factor=True)
        (g,) = torch.autograd.grad(loss, p)
        stepped = (p - 1e-3 * g).detach()
        i_before = float(losses.box_iou_t(p.detach(), t))
        i_after = float(losses.box_iou_t(stepped, t))
        assert i_after > i_before

    def test_negative_eta_rejected(self):
        with pytest.raises(ValueError):
            losses.fiou_loss(torch.zeros(1, 4), torch.zeros(1, 4),
                             torch.zeros(1, 4), eta=-1.0)


def _box_loss_fn(kind, target):
    tt = torch.tensor(target[None], dtype=torch.float64)
    if kind == "fiou":
        anchor = tt + torch.tensor([[-1.0, -1.0, 1.0, 1.0]],
                                   dtype=torch.float64)
        return lambda x: losses.fiou_loss(x, tt, anchor, 0.5)
    return lambda x: losses.reference_regression_loss(kind, x, tt)


class TestGradCheck:
    @pytest.mark.parametrize("kind", ["iou", "giou", "ciou", "eiou",
                                      "focal_eiou", "fiou"])
    def test_box_losses(self, kind):
        rng = np.random.default_rng(31)
        for _ in range(20):
            p, t = overlapping_pair(rng, min_iou=0.15)
            fn = _box_loss_fn(kind, t)
            # keep clear of the raster kinks (corner alignment)
            point = torch.tensor(p[None]) + 0.01
            err = losses.grad_check(fn, point)
            assert err < 1e-3

    @pytest.mark.parametrize("kind", ["l1", "l2", "smooth_l1", "balanced_l1"])
    def test_delta_losses(self, kind):
        rng = np.random.default_rng(37)
        for _ in range(20):
            e = rng.uniform(-2, 2, size=4)
            e = np.where(np.abs(np.abs(e) - 1.0) < 0.05, e * 1.2, e)
            if kind == "l1":
                e = np.where(np.abs(e) < 0.05, e + 0.2, e)  # avoid |e|=0 kink
            err = losses.grad_check(
                lambda x: losses.reference_regression_loss(
                    kind, x, torch.zeros(4, dtype=torch.float64)),
                torch.tensor(e))
            assert err < 1e-3

    def test_focal(self):
        rng = np.random.default_rng(41)
        y = torch.tensor(rng.integers(0, 2, size=8).astype(np.float64))
        p = torch.tensor(rng.uniform(0.05, 0.95, size=8))
        err = losses.grad_check(lambda x: losses.focal_loss(x, y), p)
        assert err < 1e-3

    def test_epsilon_bounds(self):
        with pytest.raises(ValueError):
            losses.grad_check(lambda x: x.sum(), torch.zeros(2), epsilon=1.0)

    def test_nonfinite_gradient_raises(self):
        with pytest.raises(FloatingPointError):
            losses.grad_check(lambda x: (1.0 / (x - x)).sum(),
                              torch.ones(2))
