import math

import numpy as np
import pandas as pd
import pytest
from sklearn.metrics import precision_recall_fscore_support

from smarc.metrics import (
    REPORT_KEYS,
    EvalReport,
    classification_report,
    mae,
    mse,
    psnr,
    psnr_from_mse,
    read_report_text,
    ssim,
    weighted_scores,
)


# ---------- reconstruction ----------

def test_psnr_of_known_mse():
    assert psnr_from_mse(0.01) == pytest.approx(20.0)
    assert psnr_from_mse(0.0223) == pytest.approx(16.517, abs=1e-3)


def test_psnr_caps_identical_images():
    x = np.random.default_rng(0).random((8, 8, 3))
    assert psnr(x, x) == 100.0


def test_mse_and_mae():
    a, b = np.zeros((2, 2, 3)), np.full((2, 2, 3), 0.1)
    assert mse(a, b) == pytest.approx(0.01)
    assert mae(a, b) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        mse(a, np.zeros((2, 3, 3)))


def test_ssim_of_identical_image_is_one():
    x = np.random.default_rng(1).random((32, 32, 3))
    assert ssim(x, x) == pytest.approx(1.0)


def test_ssim_inverted_checkerboard_is_negative():
    board = (np.indices((32, 32)).sum(axis=0) % 2).astype(np.float64)
    assert ssim(board, 1.0 - board) < 0


def test_ssim_equal_constants_is_one():
    assert ssim(np.full((16, 16), 0.4), np.full((16, 16), 0.4)) == pytest.approx(1.0)


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError, match="11"):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


# ---------- classification ----------

def test_small_confusion_scores():
    probs = np.array([[0.9, 0.1], [0.8, 0.2], [0.6, 0.4], [0.3, 0.7]])
    res = classification_report(probs, [0, 0, 1, 1])
    np.testing.assert_array_equal(res.confusion, [[2, 0], [1, 1]])
    assert res.accuracy == pytest.approx(0.75)
    assert res.recall_w == pytest.approx(0.75)
    assert weighted_scores(res.confusion)["recall_w"] == pytest.approx(0.75)


def test_weighted_scores_agree_with_sklearn_on_random_matrices():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        k = int(rng.integers(2, 6))
        cm = rng.integers(0, 6, size=(k, k))
        cm[0, 0] += 1
        truth = np.repeat(np.repeat(np.arange(k), k), cm.ravel())
        pred = np.repeat(np.tile(np.arange(k), k), cm.ravel())
        ours = weighted_scores(cm)
        p, r, f, _ = precision_recall_fscore_support(truth, pred, labels=list(range(k)), average="weighted", zero_division=0)
        assert ours["precision_w"] == pytest.approx(p, abs=1e-12)
        assert ours["recall_w"] == pytest.approx(r, abs=1e-12)
        assert ours["f1_w"] == pytest.approx(f, abs=1e-12)
        assert ours["recall_w"] == pytest.approx(ours["accuracy"], abs=1e-12)


def test_single_predicted_class_on_balanced_truth():
    probs = np.tile([0.4, 0.2, 0.2, 0.2], (8, 1))
    res = classification_report(probs, [0, 0, 1, 1, 2, 2, 3, 3])
    assert res.accuracy == pytest.approx(0.25)
    assert res.precision[1:].tolist() == [0.0, 0.0, 0.0]


def test_separable_scores_give_unit_auc():
    labels = np.array([0, 1, 2, 0, 1, 2])
    probs = np.eye(3)[labels] * 0.8 + 0.1 / 1.0
    res = classification_report(probs, labels)
    assert all(res.auc[c] == pytest.approx(1.0) for c in range(3))


def test_auc_invariant_under_monotone_rescaling():
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 3, size=60)
    probs = rng.random((60, 3))
    a = classification_report(probs, labels).auc
    b = classification_report(probs ** 3, labels).auc
    for c in range(3):
        assert a[c] == pytest.approx(b[c])


def test_roc_curve_runs_from_origin_to_corner():
    rng = np.random.default_rng(4)
    res = classification_report(rng.random((20, 2)), np.r_[np.zeros(10, int), np.ones(10, int)])
    for c in (0, 1):
        fpr, tpr = res.roc[c]["fpr"], res.roc[c]["tpr"]
        assert (fpr[0], tpr[0]) == (0.0, 0.0)
        assert (fpr[-1], tpr[-1]) == (1.0, 1.0)


def test_class_without_positives_has_no_curve():
    res = classification_report(np.array([[0.6, 0.4, 0.0], [0.3, 0.7, 0.0]]), [0, 1])
    assert res.roc[2] is None
    assert math.isnan(res.auc[2])


# ---------- report ----------

def _report():
    per_image = pd.DataFrame({
        "path": ["a.png", "b.png"],
        "label": [0, 1],
        "pred": [0, 1],
        "psnr": [20.0, 30.0],
        "ssim": [0.5, 0.7],
        "mse": [0.01, 0.001],
        "mae": [0.05, 0.02],
    })
    cls = classification_report(np.array([[0.9, 0.1], [0.2, 0.8]]), [0, 1])
    return EvalReport("test", ["grass", "rock"], per_image, cls, 0.013, 0.026, 6.0, 1.0)


def test_report_metrics_keys_and_conventions():
    m = _report().metrics()
    assert list(m)[: len(REPORT_KEYS)] == list(REPORT_KEYS)
    assert m["auc_grass"] == pytest.approx(1.0)
    assert m["psnr_mean"] == pytest.approx(25.0)
    assert m["psnr_of_mean_mse"] == pytest.approx(10 * math.log10(1 / 0.0055))


def test_report_text_round_trip(tmp_path):
    p = tmp_path / "report.txt"
    p.write_text(_report().to_text(), encoding="utf-8")
    keys = read_report_text(p)
    assert set(REPORT_KEYS) <= set(keys)
    assert keys["split"] == "test"
    assert float(keys["accuracy"]) == pytest.approx(1.0)
    assert keys["composite"] == "false"
