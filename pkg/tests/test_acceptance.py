"""End-to-end acceptance bars for the toolkit.

These tests state the project's contract: verified gradients for every loss,
analytic identities, oracle-equivalent metrics, component reductions, and
directional toy-scale training results. The training tests really train
models and together dominate the suite's runtime.
"""

import itertools
import math
import time

import numpy as np
import pytest
import torch

from seadet import (
    config, datapipe, dginvariance, evalkit, losses, probfusion, watermodel,
)
from seadet import boxes as boxops
from seadet.detkit import apply_mode, make_state, run_training, train_step
from conftest import overlapping_pair, random_box
from test_boxes import nms_reference, raster_iou
from test_evalkit import ap_prefix_oracle


# ---------------------------------------------------------------------------
# 1. gradient suite: every loss passes finite-difference checks on 100
#    random non-degenerate inputs, max relative error < 1e-3, under 60 s
# ---------------------------------------------------------------------------

class TestGradientSuite:
    BOX_KINDS = ("iou", "giou", "ciou", "eiou", "focal_eiou", "fiou")
    DELTA_KINDS = ("smooth_l1", "balanced_l1")

    def test_all_losses_100_inputs_under_budget(self):
        start = time.monotonic()
        rng = np.random.default_rng(2024)

        for kind in self.BOX_KINDS:
            for _ in range(100):
                p, t = overlapping_pair(rng, min_iou=0.15)
                tt = torch.tensor(t[None], dtype=torch.float64)
                if kind == "fiou":
                    anchor = tt + torch.tensor([[-1.0, -1.0, 1.0, 1.0]],
                                               dtype=torch.float64)
                    fn = lambda x, T=tt, A=anchor: losses.fiou_loss(
                        x, T, A, 0.5)
                else:
                    fn = lambda x, K=kind, T=tt: \
                        losses.reference_regression_loss(K, x, T)
                point = torch.tensor(p[None], dtype=torch.float64) + 0.01
                assert losses.grad_check(fn, point) < 1e-3, kind

        for kind in self.DELTA_KINDS:
            for _ in range(100):
                e = rng.uniform(-2, 2, size=4)
                e = np.where(np.abs(np.abs(e) - 1.0) < 0.05, e * 1.2, e)
                err = losses.grad_check(
                    lambda x, K=kind: losses.reference_regression_loss(
                        K, x, torch.zeros(4, dtype=torch.float64)),
                    torch.tensor(e))
                assert err < 1e-3, kind

        for _ in range(100):
            y = torch.tensor(rng.integers(0, 2, size=8).astype(np.float64))
            p = torch.tensor(rng.uniform(0.05, 0.95, size=8))
            assert losses.grad_check(
                lambda x, Y=y: losses.focal_loss(x, Y), p) < 1e-3

        assert time.monotonic() - start < 60.0


# ---------------------------------------------------------------------------
# 2. analytic identities
# ---------------------------------------------------------------------------

class TestAnalyticIdentities:
    def test_fiou_zero_on_disjoint_for_positive_eta(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            p = random_box(rng, lo=0, hi=20, max_side=12)
            t = random_box(rng, lo=40, hi=64, max_side=12)
            a = random_box(rng)
            pt, tt, at = (torch.tensor(x[None]) for x in (p, t, a))
            for eta in (0.25, 0.5, 1.0, 2.0):
                assert float(losses.fiou_loss(pt, tt, at, eta)) == 0.0

    def test_fiou_eta_zero_is_iou_loss_plus_squared_deltas(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            p, t = overlapping_pair(rng)
            a = random_box(rng)
            pt, tt, at = (torch.tensor(x[None]) for x in (p, t, a))
            v = float(losses.fiou_loss(pt, tt, at, eta=0.0))
            i = float(losses.box_iou_t(pt, tt))
            sq = float(((losses.encode_t(pt, at)
                         - losses.encode_t(tt, at)) ** 2).sum())
            assert v == pytest.approx(1.0 - i + sq, rel=1e-9)

    def test_focal_gamma0_alpha_half_is_half_ce(self):
        for p in np.linspace(0.005, 0.995, 100):
            for y in (0.0, 1.0):
                f = float(losses.focal_loss(p, y, alpha=0.5, gamma=0.0))
                ce = float(losses.binary_cross_entropy(p, y))
                assert abs(f - 0.5 * ce) < 1e-9

    def test_focal_eiou_is_iou_pow_times_eiou_pointwise(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            p, t = overlapping_pair(rng)
            pt = torch.tensor(p[None])
            tt = torch.tensor(t[None])
            for gamma in (0.25, 0.5, 1.0, 2.0):
                fe = float(losses.focal_eiou_loss_t(pt, tt, gamma))
                want = (float(losses.box_iou_t(pt, tt)) ** gamma
                        * float(losses.eiou_loss_t(pt, tt)))
                assert fe == pytest.approx(want, rel=1e-9, abs=1e-12)


# ---------------------------------------------------------------------------
# 3. probabilistic fusion, exhaustive over parameter grids
# ---------------------------------------------------------------------------

class TestProbabilisticFusion:
    GRID = np.linspace(0.0, 1.0, 21)

    def test_prior_squared_is_objectness_times_iou(self):
        for o in self.GRID:
            for q in self.GRID:
                prior = probfusion.objectness_prior(o, q)
                assert prior ** 2 == pytest.approx(o * q, abs=1e-9)

    def test_final_score_argmax_invariant_to_prior(self):
        rng = np.random.default_rng(4)
        for _ in range(300):
            cls = rng.uniform(0.01, 1.0, size=6)
            ranks = set()
            for prior in (0.05, 0.3, 0.9):
                scores = [probfusion.marginal_score(prior, c) for c in cls]
                ranks.add(int(np.argmax(scores)))
            assert len(ranks) == 1

    def test_br_weights_bounds_and_gamma_zero_identity(self):
        priors = np.linspace(0.0, 1.0, 51)
        for gamma in (0.0, 0.5, 1.0, 2.0, 4.0):
            for fg in (True, False):
                w = probfusion.boosting_weights(
                    torch.tensor(priors), np.full(len(priors), fg), gamma)
                w = w.numpy()
                assert np.all(w >= -1e-9) and np.all(w <= 1 + 1e-9)
                if gamma == 0.0:
                    assert np.allclose(w, 1.0, atol=1e-9)


# ---------------------------------------------------------------------------
# 4. oracle equivalence: IoU, NMS, AP
# ---------------------------------------------------------------------------

class TestOracleEquivalence:
    def test_iou_vs_raster_oracle_1000_pairs(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            a = tuple(int(v) for v in random_box(rng, hi=48, max_side=20))
            b = tuple(int(v) for v in random_box(rng, hi=48, max_side=20))
            if a[2] <= a[0] or a[3] <= a[1] or b[2] <= b[0] or b[3] <= b[1]:
                continue
            got = boxops.iou(boxops.Box(*a), boxops.Box(*b))
            assert abs(got - raster_iou(a, b)) <= 1e-3

    def test_nms_vs_quadratic_reference_200_sets(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            n = int(rng.integers(1, 40))
            boxes = np.stack([random_box(rng, hi=40, max_side=16)
                              for _ in range(n)])
            # coarse scores force ties so the tie-break order is tested
            scores = rng.uniform(0, 1, size=n).round(1)
            thr = float(rng.uniform(0.2, 0.8))
            got = boxops.nms_indices(boxes, scores, thr)
            assert got == nms_reference(boxes, scores, thr)

    def test_ap_vs_prefix_oracle_exhaustive(self):
        for n in range(1, 7):
            for total_gt in (1, 2, 3):
                for pattern in itertools.product("TF", repeat=n):
                    if sum(v == "T" for v in pattern) > total_gt:
                        continue
                    records = [
                        evalkit.MatchRecord(i, 0 if v == "T" else None,
                                            "TP" if v == "T" else "FP",
                                            0.9, 0, 1.0 - 0.1 * i)
                        for i, v in enumerate(pattern)
                    ]
                    got = evalkit.average_precision(records, total_gt)
                    assert got == pytest.approx(
                        ap_prefix_oracle(records, total_gt), abs=1e-12)


# ---------------------------------------------------------------------------
# 5. DG component reductions
# ---------------------------------------------------------------------------

class TestDGReductions:
    def test_dmx_endpoints_exact(self):
        a = torch.randn(8, 6, 6)
        b = torch.randn(8, 6, 6)
        assert dginvariance.domain_mixup(a, b, 1.0) is a
        assert dginvariance.domain_mixup(a, b, 0.0) is b

    def test_ssmc_to_ssc_to_sc_chain(self):
        torch.manual_seed(7)
        for _ in range(25):
            a = torch.randn(16, 8, 8)
            b = torch.randn(16, 8, 8)
            for k in (1, 4, 64):
                v1 = float(dginvariance.ssmc_loss(a, b, k=k, delta=0.0))
                v2 = float(dginvariance.ssc_loss(a, b, k=k))
                assert abs(v1 - v2) < 1e-6
            v3 = float(dginvariance.ssc_loss(a, b, k=64))
            v4 = float(dginvariance.sc_loss(a, b))
            assert abs(v3 - v4) < 1e-6

    def test_kmax_extremes(self):
        torch.manual_seed(8)
        for _ in range(25):
            h = torch.randn(8, 8)
            assert float(dginvariance.k_maxpooling(h, 1)) == pytest.approx(
                float(h.max()), abs=1e-7)
            assert float(dginvariance.k_maxpooling(h, 64)) == pytest.approx(
                float(h.mean()), abs=1e-6)


# ---------------------------------------------------------------------------
# 6. IRM penalty: closed form + finite differences on detector-shaped terms
# ---------------------------------------------------------------------------

class TestIRMPenalty:
    def test_closed_form_logistic(self):
        for a in (-3.0, -1.0, -0.2, 0.4, 1.3, 2.5):
            at = torch.tensor(a, dtype=torch.float64)
            pen = float(dginvariance.irm_penalty(
                lambda r: -torch.nn.functional.logsigmoid(at * r)).detach())
            sig = 1.0 / (1.0 + math.exp(-a))
            assert pen == pytest.approx(((1.0 - sig) * a) ** 2, abs=1e-6)

    def test_finite_difference_on_detector_batches(self):
        # real detector outputs as data, the training recipe's term shapes:
        # scaled objectness logits (pos/neg BCE), scaled regression deltas
        # (squared error), scaled class logits (CE)
        cfg = apply_mode(config.resolve({
            "detector": {"fpn_channels": 32, "head_depth": 2,
                         "gn_groups": 8}}), "dg-adv")
        state = make_state(cfg, seed=0)
        spec = config.scene_spec_from(cfg)
        img, _ = datapipe.generate_scene(spec, rng_seed=0)
        x = torch.as_tensor(img[None].transpose(0, 3, 1, 2),
                            dtype=torch.float32)
        _, _, pyramid = state.model.extract_features(x)
        obj, _, reg = state.model.forward_first_stage(pyramid)
        obj64 = obj[0].detach().double()
        reg64 = reg[0].detach().double()
        rng = np.random.default_rng(9)

        def bce_term(L, target):
            return lambda r: losses.binary_cross_entropy(
                torch.sigmoid(L * r),
                torch.full((len(L),), target, dtype=torch.float64)) / len(L)

        terms = []
        for _ in range(10):
            idx = torch.as_tensor(rng.choice(len(obj64), 50, replace=False))
            terms.append(bce_term(obj64[idx], 1.0))
            terms.append(bce_term(obj64[idx], 0.0))
            didx = torch.as_tensor(rng.choice(len(reg64), 20, replace=False))
            tgt = torch.tensor(rng.normal(0, 0.5, size=(20, 4)))
            terms.append(lambda r, D=reg64[didx], T=tgt:
                         ((D * r - T) ** 2).sum() / len(T))
            logits = torch.tensor(rng.normal(0, 1.0, size=(16, 5)))
            labels = torch.as_tensor(rng.integers(0, 5, size=16))
            terms.append(lambda r, L=logits, T=labels:
                         torch.nn.functional.cross_entropy(L * r, T))

        eps = 1e-5
        for term in terms:
            pen = float(dginvariance.irm_penalty(term).detach())
            hi = float(term(torch.tensor(1.0 + eps, dtype=torch.float64)))
            lo = float(term(torch.tensor(1.0 - eps, dtype=torch.float64)))
            fd = ((hi - lo) / (2 * eps)) ** 2
            assert pen == pytest.approx(fd, rel=1e-4, abs=1e-10)


# ---------------------------------------------------------------------------
# 7. image formation and color transfer
# ---------------------------------------------------------------------------

class TestImageFormation:
    def test_ifm_convexity_bound(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            img = rng.uniform(0, 1, size=(8, 8, 3))
            b = rng.uniform(0, 1, size=3)
            params = watermodel.WaterParams(
                background=tuple(b),
                nrer=tuple(rng.uniform(0.5, 1.0, 3)),
                depth=float(rng.uniform(0, 8)))
            out = watermodel.ifm_synthesize(img, params)
            lo = np.minimum(img, b[None, None, :])
            hi = np.maximum(img, b[None, None, :])
            assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)

    def test_bilateral_constant_grid_and_identity_round_trip(self):
        rng = np.random.default_rng(11)
        m = rng.normal(size=(3, 4))
        field = watermodel.slice_bilateral_grid(
            watermodel.BilateralGrid.constant(m),
            rng.uniform(0, 1, size=(15, 22)))
        np.testing.assert_allclose(field, np.broadcast_to(m, field.shape),
                                   atol=1e-6)
        img = rng.uniform(0, 1, size=(16, 16, 3))
        ident = watermodel.slice_bilateral_grid(
            watermodel.BilateralGrid.identity(),
            watermodel.luminance_guidance(img))
        np.testing.assert_allclose(
            watermodel.apply_affine_color(img, ident), img, atol=1e-6)

    def test_cbst_zero_in_degenerate_case_and_default_weights(self):
        rng = np.random.default_rng(12)
        img = rng.uniform(0, 1, size=(16, 16, 3))
        extractor = watermodel.RandomConvFeatureExtractor(seed=0)
        out = watermodel.cbst_losses(img, img.copy(), img.copy(),
                                     watermodel.BilateralGrid.identity(),
                                     [], extractor)
        assert all(out[k] == 0.0 for k in
                   ("content", "style", "grid_reg", "mask", "total"))

        content = rng.uniform(0, 1, size=(16, 16, 3))
        style = rng.uniform(0, 1, size=(16, 16, 3))
        output = rng.uniform(0, 1, size=(16, 16, 3))
        grid = watermodel.BilateralGrid(rng.normal(size=(
            watermodel.GRID_H, watermodel.GRID_W, watermodel.GRID_D, 3, 4)))
        out = watermodel.cbst_losses(output, content, style, grid, [],
                                     extractor)
        expected = (0.5 * out["content"] + 1.0 * out["style"]
                    + 0.015 * out["grid_reg"] + 1.0 * out["mask"])
        assert out["total"] == pytest.approx(expected, rel=1e-12)


# ---------------------------------------------------------------------------
# 8-9. training bars (these run real training and take tens of minutes)
# ---------------------------------------------------------------------------

def _eval_map50(model, samples, iou_threshold=0.5):
    dets = [model.predict(s["image"]) for s in samples]
    gts = [[evalkit.GroundTruth(box=b, label=c) for b, c in s["annotations"]]
           for s in samples]
    return evalkit.dataset_map(dets, gts, iou_threshold)[0]


def _build_dataset(out_dir, cfg, seed=0):
    return datapipe.build_multidomain_dataset(
        out_dir, config.scene_spec_from(cfg), config.domain_specs_from(cfg),
        images_per_domain=cfg["dataset"]["images_per_domain"],
        val_fraction=cfg["dataset"]["val_fraction"], seed=seed)


class TestEndToEndSanity:
    def test_single_image_overfit_500_steps(self):
        start = time.monotonic()
        cfg = apply_mode(config.resolve(), "boosting")
        spec = config.scene_spec_from(cfg)
        img, anns = datapipe.generate_scene(spec, rng_seed=0)
        sample = {"image": img, "clear": img, "annotations": anns,
                  "domain_id": 1}
        state = make_state(cfg, seed=0)
        reached = None
        for step in range(500):
            train_step(state, [sample])
            if (step + 1) % 25 == 0:
                if _eval_map50(state.model, [sample]) == 1.0:
                    reached = step + 1
                    break
        elapsed = time.monotonic() - start
        print(f"\n[overfit] mAP50=1.0 at step {reached}, {elapsed:.1f}s")
        assert reached is not None and reached <= 500
        assert elapsed < 300.0

    def test_full_toy_run_reaches_frozen_threshold(self, tmp_path):
        # threshold frozen from the first verified run of this exact
        # configuration (source-domain val mAP50 0.9506) minus the agreed
        # 0.05 tolerance
        start = time.monotonic()
        cfg = config.resolve()
        root = str(tmp_path / "fullds")
        _build_dataset(root, cfg, seed=0)
        samples = []
        for d in range(1, 7):
            samples.extend(datapipe.load_split(root, d, "train"))
        state = run_training(cfg, samples, "boosting",
                             str(tmp_path / "run"), seed=0)
        val = datapipe.load_split(root, 1, "val")
        map50 = _eval_map50(state.model, val)
        elapsed = time.monotonic() - start
        print(f"\n[full toy run] source domain 1 val mAP50={map50:.4f}, "
              f"{elapsed:.0f}s")
        assert map50 >= 0.90
        assert elapsed < 1800.0


class TestDirectionalDG:
    def test_dmc_generalizes_better_than_deepall(self, tmp_path):
        seeds = (0, 1, 2)
        cfg = config.resolve({
            "dataset": {"images_per_domain": 60},
            "training": {"steps": 1200},
        })
        root = str(tmp_path / "ds")
        manifest = _build_dataset(root, cfg, seed=0)
        train_samples = []
        for d in manifest.source_domains:
            train_samples.extend(datapipe.load_split(root, d, "train"))
        source_val = {d: datapipe.load_split(root, d, "val")
                      for d in manifest.source_domains}
        target_val = datapipe.load_split(root, manifest.target_domain, "val")
        transforms = {
            s.domain_id: watermodel.make_domain_transform(s)
            for s in config.domain_specs_from(cfg)
        }

        results = {"deepall": [], "dmc": []}
        for mode in ("deepall", "dmc"):
            for seed in seeds:
                state = run_training(
                    cfg, train_samples, mode,
                    str(tmp_path / f"{mode}_{seed}"), seed=seed,
                    domain_transforms=transforms,
                    source_ids=manifest.source_domains)
                src = float(np.mean([
                    _eval_map50(state.model, v)
                    for v in source_val.values()]))
                tgt = _eval_map50(state.model, target_val)
                results[mode].append({"seed": seed, "source": src,
                                      "target": tgt})
                print(f"\n[dg] mode={mode} seed={seed} "
                      f"source mAP50={src:.4f} target mAP50={tgt:.4f}")

        deepall_src = float(np.median(
            [r["source"] for r in results["deepall"]]))
        deepall_tgt = float(np.median(
            [r["target"] for r in results["deepall"]]))
        dmc_tgt = float(np.median([r["target"] for r in results["dmc"]]))
        rel_drop = (deepall_src - deepall_tgt) / deepall_src
        print(f"[dg] medians: deepall source={deepall_src:.4f} "
              f"target={deepall_tgt:.4f} (rel drop {rel_drop:.1%}), "
              f"dmc target={dmc_tgt:.4f}")

        assert rel_drop >= 0.10, "no measurable domain gap under deepall"
        assert dmc_tgt >= deepall_tgt, \
            "dmc did not generalize at least as well as deepall"


# ---------------------------------------------------------------------------
# 10. robustness harness
# ---------------------------------------------------------------------------

class TestRobustnessHarness:
    def _predictor_and_data(self):
        rng = np.random.default_rng(13)
        spec = datapipe.SceneSpec(canvas_size=32)
        images, gts = [], []
        for i in range(4):
            img, anns = datapipe.generate_scene(spec, rng_seed=i)
            images.append(img)
            gts.append([evalkit.GroundTruth(box=b, label=c)
                        for b, c in anns])
        clean = [img.copy() for img in images]

        def predict(img):
            # fragile oracle predictor: perfect on clean inputs, degrades
            # once the corruption moves the image far enough
            for ref, gt_list in zip(clean, gts):
                if ref.shape == img.shape \
                        and np.abs(ref - img).mean() < 0.02:
                    return [evalkit.Detection(g.box, g.label, 0.9)
                            for g in gt_list]
            return []

        return predict, images, gts

    def test_severity_zero_rows_equal_clean_exactly(self):
        predict, images, gts = self._predictor_and_data()
        rows = evalkit.robustness_sweep(
            predict, images, gts, list(watermodel.CORRUPTION_KINDS),
            severity=0)
        clean = rows[0]["ap"]
        assert clean == 1.0
        for row in rows[1:]:
            assert row["ap"] == clean and row["delta"] == 0.0

    def test_table_format_with_average_row(self):
        predict, images, gts = self._predictor_and_data()
        kinds = list(watermodel.CORRUPTION_KINDS)
        rows = evalkit.robustness_sweep(predict, images, gts, kinds,
                                        severity=3)
        assert [r["kind"] for r in rows] == ["clean"] + kinds + ["average"]
        assert rows[-1]["ap"] == pytest.approx(
            float(np.mean([r["ap"] for r in rows[1:-1]])))
        table = evalkit.format_robustness_table(rows)
        lines = table.splitlines()
        assert len(lines) == len(rows) + 1
        assert lines[-1].startswith("average")

    def test_deterministic_under_fixed_seeds(self):
        predict, images, gts = self._predictor_and_data()
        kinds = list(watermodel.CORRUPTION_KINDS)
        r1 = evalkit.robustness_sweep(predict, images, gts, kinds, seed=3)
        r2 = evalkit.robustness_sweep(predict, images, gts, kinds, seed=3)
        assert r1 == r2
