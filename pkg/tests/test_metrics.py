import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from argmamba.errors import ConfigError, UndefinedMetricError
from argmamba.metrics import ConfusionMatrix, confusion, f1_per_class, iou_per_class, oa, report

PRED, GT = [0, 0, 1, 1], [0, 1, 1, 1]


def _set_oracle(pred, gt, K):
    # per-class TP/FP/FN tallied from pixel index sets
    pred, gt = list(pred), list(gt)
    out = []
    for k in range(K):
        P = {i for i, p in enumerate(pred) if p == k}
        G = {i for i, g in enumerate(gt) if g == k}
        out.append((len(P & G), len(P - G), len(G - P)))
    return out


class TestHandCase:
    def test_counts(self):
        cm = confusion(PRED, GT, 2)
        assert cm.counts.tolist() == [[1, 0], [1, 2]]
        assert cm.ignored == 0

    def test_scores(self):
        cm = confusion(PRED, GT, 2)
        assert abs(oa(cm) - 0.75) < 1e-12
        iou, miou = iou_per_class(cm)
        assert np.allclose(iou, [1 / 2, 2 / 3], atol=1e-12, rtol=0)
        assert abs(miou - 7 / 12) < 1e-12
        f1, mf1 = f1_per_class(cm)
        assert np.allclose(f1, [2 / 3, 0.8], atol=1e-12, rtol=0)
        assert abs(mf1 - (2 / 3 + 0.8) / 2) < 1e-12
        assert abs(mf1 - 0.7333) < 1e-4

    def test_against_set_oracle(self):
        rng = np.random.default_rng(0)
        pred, gt = rng.integers(0, 4, 200), rng.integers(0, 4, 200)
        iou, _ = iou_per_class(confusion(pred, gt, 4))
        for k, (tp, fp, fn) in enumerate(_set_oracle(pred, gt, 4)):
            assert iou[k] == tp / (tp + fp + fn)


class TestEdgeCases:
    def test_perfect(self):
        cm = confusion([0, 1, 2, 2], [0, 1, 2, 2], 3)
        assert np.array_equal(cm.counts, np.diag([1, 1, 2]))
        assert oa(cm) == 1.0
        assert iou_per_class(cm)[1] == 1.0 and f1_per_class(cm)[1] == 1.0

    def test_all_ignored(self):
        cm = confusion(np.zeros((4, 4)), np.full((4, 4), 255), 3)
        assert cm.counts.sum() == 0 and cm.ignored == 16
        with pytest.raises(UndefinedMetricError):
            oa(cm)

    def test_off_diagonal_only(self):
        assert oa(ConfusionMatrix(np.array([[0, 5], [5, 0]]))) == 0.0
        assert f1_per_class(ConfusionMatrix(np.array([[0, 5], [5, 0]])))[0].tolist() == [0.0, 0.0]

    def test_absent_class_is_nan_and_skipped(self):
        cm = confusion([0, 1, 1], [0, 1, 0], 3)
        iou, miou = iou_per_class(cm)
        assert math.isnan(iou[2])
        assert miou == pytest.approx((iou[0] + iou[1]) / 2, abs=1e-15)

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            confusion([0, 3], [0, 1], 2)
        with pytest.raises(ConfigError):
            confusion([0, 1], [0, 7], 2)

    def test_ignored_accounting(self):
        gt = np.array([0, 255, 1, 255, 1])
        cm = confusion(np.array([0, 1, 1, 0, 0]), gt, 2)
        assert cm.pixels + cm.ignored == gt.size


def _random_cm(rng, K):
    counts = rng.integers(0, 50, (K, K))
    counts[rng.random((K, K)) < 0.2] = 0
    return ConfusionMatrix(counts)


class TestProperties:
    def test_f1_iou_identity(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            cm = _random_cm(rng, int(rng.integers(2, 8)))
            iou, _ = iou_per_class(cm)
            f1, _ = f1_per_class(cm)
            ok = ~np.isnan(iou)
            assert np.allclose(f1[ok], 2 * iou[ok] / (1 + iou[ok]), atol=1e-12, rtol=0)
            assert np.all(f1[ok] >= iou[ok]) and np.all((iou[ok] >= 0) & (iou[ok] <= 1))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 31), st.integers(1, 60), st.integers(1, 60))
    def test_tile_additivity(self, seed, n1, n2):
        rng = np.random.default_rng(seed)
        p1, g1, p2, g2 = (rng.integers(0, 4, n) for n in (n1, n1, n2, n2))
        a, b = confusion(p1, g1, 4), confusion(p2, g2, 4)
        whole = confusion(np.concatenate([p1, p2]), np.concatenate([g1, g2]), 4)
        assert np.array_equal((a + b).counts, whole.counts)
        assert oa(a + b) == oa(whole)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(2)
        pred, gt = rng.integers(0, 5, 300), rng.integers(0, 5, 300)
        perm = rng.permutation(5)
        cm, cmp = confusion(pred, gt, 5), confusion(perm[pred], perm[gt], 5)
        assert oa(cm) == oa(cmp)
        iou, miou = iou_per_class(cm)
        iou_p, miou_p = iou_per_class(cmp)
        assert np.allclose(iou_p[perm], iou, atol=1e-15)
        assert miou == pytest.approx(miou_p, abs=1e-15)


class TestReport:
    def test_document(self):
        cm = confusion([0, 1, 2, 2, 1], [0, 1, 2, 1, 255], 3)
        doc = report(cm, ["a", "b", "c"])
        assert set(doc) >= {"oa", "miou", "mean_f1", "per_class", "pixels", "ignored"}
        assert doc["per_class"][1]["name"] == "b" and doc["ignored"] == 1 and doc["pixels"] == 4
        sub = doc["without_last_class"]
        assert sub["excluded"] == "c"
        assert sub["oa"] == pytest.approx(2 / 3)

    def test_nan_serialized_as_null(self):
        import json
        doc = report(confusion([0, 0], [0, 0], 2))
        assert json.loads(json.dumps(doc))["per_class"][1]["iou"] is None
