"""Loss and metric oracles: closed forms, brute-force recomputation, identities."""

import math

import numpy as np
import pytest

from cloudseg.losses import dice_bce_loss
from cloudseg.metrics import ConfusionCounts, confusion, metrics, report_csv
from cloudseg.tensor import ShapeError, Tensor

from oracles import brute_force_confusion, brute_force_loss


class TestDiceBceLoss:
    def test_perfect_prediction_near_zero(self):
        ones = np.ones((1, 1, 4, 4), dtype=np.float64)
        loss = dice_bce_loss(Tensor(ones, dtype=np.float64), Tensor(ones, dtype=np.float64))
        assert 0.0 <= float(loss.data) < 1e-5

    def test_half_prediction_closed_form(self):
        n = 16
        pred = Tensor(np.full((n,), 0.5), dtype=np.float64)
        target = Tensor(np.ones(n), dtype=np.float64)
        # dice: 1 - 2*(0.5n)/(n + 0.25n) = 0.2 ; bce: ln 2
        expected = 0.2 + math.log(2.0)
        assert float(dice_bce_loss(pred, target).data) == pytest.approx(expected, abs=1e-9)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for trial in range(5):
            pred = rng.uniform(0.001, 0.999, size=(2, 1, 5, 5))
            target = (rng.uniform(size=(2, 1, 5, 5)) > 0.5).astype(np.float64)
            got = float(dice_bce_loss(Tensor(pred, dtype=np.float64),
                                      Tensor(target, dtype=np.float64)).data)
            assert got == pytest.approx(brute_force_loss(pred, target), abs=1e-10)

    def test_saturated_predictions_stay_finite(self):
        pred = Tensor(np.array([0.0, 1.0]), dtype=np.float64)
        target = Tensor(np.array([1.0, 0.0]), dtype=np.float64)
        assert np.isfinite(float(dice_bce_loss(pred, target).data))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            dice_bce_loss(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_non_binary_target_rejected(self):
        with pytest.raises(ValueError, match="binary"):
            dice_bce_loss(Tensor(np.ones(3)), Tensor(np.full(3, 0.5)))

    def test_nonnegative_and_zero_only_at_perfect(self):
        rng = np.random.default_rng(1)
        target = (rng.uniform(size=32) > 0.5).astype(np.float64)
        for _ in range(10):
            pred = rng.uniform(0.01, 0.99, 32)
            assert float(dice_bce_loss(Tensor(pred, dtype=np.float64),
                                       Tensor(target, dtype=np.float64)).data) > 0


class TestConfusion:
    def test_perfect_prediction(self):
        target = np.zeros((4, 4), dtype=np.uint8)
        target[:2] = 1
        c = confusion(target, target)
        assert (c.tp, c.tn, c.fp, c.fn) == (8, 8, 0, 0)

    def test_inverted_prediction(self):
        target = np.zeros((4, 4), dtype=np.uint8)
        target[:1] = 1
        c = confusion(1 - target, target)
        assert c.tp == 0 and c.tn == 0
        assert c.fp == 12 and c.fn == 4

    def test_matches_double_loop(self):
        rng = np.random.default_rng(2)
        pred = (rng.uniform(size=(16, 16)) > 0.4).astype(np.uint8)
        target = (rng.uniform(size=(16, 16)) > 0.6).astype(np.uint8)
        c = confusion(pred, target)
        assert (c.tp, c.tn, c.fp, c.fn) == brute_force_confusion(pred, target)

    def test_non_binary_rejected(self):
        with pytest.raises(ValueError, match="non-binary"):
            confusion(np.full((2, 2), 2), np.zeros((2, 2)))

    def test_merge_is_componentwise_addition(self):
        a = ConfusionCounts(1, 2, 3, 4)
        b = ConfusionCounts(10, 20, 30, 40)
        c = ConfusionCounts(5, 6, 7, 8)
        assert a + b == ConfusionCounts(11, 22, 33, 44)
        assert (a + b) + c == a + (b + c)
        assert a + b == b + a


class TestMetrics:
    def test_worked_example(self):
        m = metrics(ConfusionCounts(tp=50, fp=25, fn=25, tn=100))
        assert m.miou == pytest.approx(0.5)
        assert m.precision == pytest.approx(2 / 3)
        assert m.recall == pytest.approx(2 / 3)
        assert m.f1 == pytest.approx(2 / 3)
        assert m.oa == pytest.approx(0.75)

    def test_perfect_is_all_ones(self):
        m = metrics(ConfusionCounts(tp=10, tn=20, fp=0, fn=0))
        assert (m.miou, m.precision, m.recall, m.f1, m.oa) == (1.0, 1.0, 1.0, 1.0, 1.0)

    def test_undefined_metrics_reported_na(self):
        m = metrics(ConfusionCounts(tp=0, tn=5, fp=0, fn=0))
        assert m.miou is None and m.precision is None and m.recall is None and m.f1 is None
        assert m.oa == 1.0
        row = m.as_row()
        assert row["miou"] == "NA" and row["oa"] == "100.00"

    def test_random_counts_match_mask_recomputation(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            pred = (rng.uniform(size=(8, 8)) > rng.uniform()).astype(np.uint8)
            target = (rng.uniform(size=(8, 8)) > rng.uniform()).astype(np.uint8)
            c = confusion(pred, target)
            m = metrics(c)
            tp, tn, fp, fn = brute_force_confusion(pred, target)
            if tp + fn + fp:
                assert m.miou == pytest.approx(tp / (tp + fn + fp), abs=1e-12)
            if tp + fp:
                assert m.precision == pytest.approx(tp / (tp + fp), abs=1e-12)
            if tp + fn:
                assert m.recall == pytest.approx(tp / (tp + fn), abs=1e-12)
            if 2 * tp + fp + fn:
                assert m.f1 == pytest.approx(2 * tp / (2 * tp + fp + fn), abs=1e-12)
            assert m.oa == pytest.approx((tp + tn) / 64, abs=1e-12)

    def test_f1_is_harmonic_mean(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            c = ConfusionCounts(*(int(v) for v in rng.integers(1, 500, 4)))
            m = metrics(c)
            harmonic = 2 * m.precision * m.recall / (m.precision + m.recall)
            assert m.f1 == pytest.approx(harmonic, abs=1e-12)

    def test_miou_bounded_by_precision_and_recall(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            c = ConfusionCounts(*(int(v) for v in rng.integers(1, 500, 4)))
            m = metrics(c)
            assert m.miou <= min(m.precision, m.recall) + 1e-12

    def test_scene_equals_merged_patches(self):
        rng = np.random.default_rng(6)
        pred = (rng.uniform(size=(8, 8)) > 0.5).astype(np.uint8)
        target = (rng.uniform(size=(8, 8)) > 0.5).astype(np.uint8)
        whole = confusion(pred, target)
        merged = ConfusionCounts()
        for r in range(0, 8, 4):
            for c_ in range(0, 8, 4):
                merged = merged + confusion(pred[r:r + 4, c_:c_ + 4], target[r:r + 4, c_:c_ + 4])
        assert whole == merged
        assert metrics(whole) == metrics(merged)


class TestReportCsv:
    def test_column_order_and_percent_format(self):
        m = metrics(ConfusionCounts(tp=50, fp=25, fn=25, tn=100))
        row = {"method": "full", **m.as_row(), "params_m": "2.81", "gflops": "0.70"}
        text = report_csv([row])
        lines = text.strip().splitlines()
        assert lines[0] == "method,miou,precision,recall,f1,oa,params_m,gflops,miou_two_class"
        assert lines[1].startswith("full,50.00,66.67,66.67,66.67,75.00,2.81,0.70")
