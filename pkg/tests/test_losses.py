import math
from types import SimpleNamespace

import numpy as np
import pytest

from smarc.config import LossWeights
from smarc.gradcheck import finite_diff_check
from smarc.losses import ce_smoothed, l2_penalty, masked_mae_loss, total_loss
from smarc.tensor import Parameter, Tensor, precision

W = LossWeights()


def test_mae_zero_for_exact_prediction():
    x = np.random.default_rng(0).random((2, 4, 4, 3))
    assert masked_mae_loss(Tensor(x), x, np.zeros((2, 4, 4, 1)), W).item() == 0.0


def test_mae_constant_diff_with_full_mask():
    x = np.random.default_rng(1).random((1, 4, 4, 3))
    loss = masked_mae_loss(Tensor(x + 0.3), x, np.ones((1, 4, 4, 1)), W)
    assert loss.item() == pytest.approx(0.3, rel=1e-5)


def test_mae_hole_weighting_two_pixels():
    pred = Tensor(np.array([0.1, 0.2]).reshape(1, 1, 2, 1))
    mask = np.array([0.0, 1.0]).reshape(1, 1, 2, 1)
    loss = masked_mae_loss(pred, np.zeros((1, 1, 2, 1)), mask, W)
    assert loss.item() == pytest.approx((6 * 0.1 + 1 * 0.2) / 7, rel=1e-6)
    assert loss.item() == pytest.approx(0.1142857, rel=1e-5)


def test_mae_is_symmetric():
    rng = np.random.default_rng(2)
    a, b = rng.random((1, 3, 3, 3)), rng.random((1, 3, 3, 3))
    m = (rng.random((1, 3, 3, 1)) > 0.5).astype(np.float32)
    assert masked_mae_loss(Tensor(a), b, m, W).item() == pytest.approx(masked_mae_loss(Tensor(b), a, m, W).item())


def test_mae_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="mismatch"):
        masked_mae_loss(Tensor(np.zeros((1, 2, 2, 3))), np.zeros((1, 2, 3, 3)), np.ones((1, 2, 2, 1)), W)


def test_mae_gradient():
    rng = np.random.default_rng(3)
    with precision("float64"):
        pred = Tensor(rng.random((1, 4, 4, 3)), requires_grad=True)
        target = pred.data + rng.choice([-1.0, 1.0], size=pred.shape) * rng.uniform(0.05, 0.3, size=pred.shape)
        m = (rng.random((1, 4, 4, 1)) > 0.5).astype(np.float64)
        assert finite_diff_check(lambda p: masked_mae_loss(p, target, m, W), [pred]) < 1e-5


def test_ce_uniform_logits_is_log_k():
    for eps in (0.0, 0.05, 0.3):
        loss = ce_smoothed(Tensor(np.zeros((3, 4))), [0, 2, 3], eps)
        assert loss.item() == pytest.approx(math.log(4), rel=1e-6)


def test_ce_confident_correct_prediction_goes_to_zero():
    logits = np.full((1, 4), -50.0)
    logits[0, 1] = 50.0
    with precision("float64"):
        assert ce_smoothed(Tensor(logits), [1], 0.0).item() == pytest.approx(0.0, abs=1e-12)


def test_ce_smoothed_hand_value():
    with precision("float64"):
        logits = Tensor(np.log(np.array([[0.7, 0.1, 0.1, 0.1]])))
        loss = ce_smoothed(logits, [0], 0.05).item()
    expect = -(0.9625 * math.log(0.7) + 3 * 0.0125 * math.log(0.1))
    assert loss == pytest.approx(expect, rel=1e-9)
    assert loss == pytest.approx(0.42966, abs=1e-5)


def test_ce_class_weights_scale_the_sample():
    logits = Tensor(np.zeros((1, 2)))
    plain = ce_smoothed(logits, [1], 0.0).item()
    weighted = ce_smoothed(logits, [1], 0.0, class_weights=[0.5, 2.0]).item()
    assert weighted == pytest.approx(2.0 * plain)


def test_ce_out_of_range_label_rejected():
    with pytest.raises(ValueError, match="out of range"):
        ce_smoothed(Tensor(np.zeros((2, 4))), [0, 4], 0.05)


def test_ce_gradient_rows_sum_to_zero():
    with precision("float64"):
        logits = Tensor(np.random.default_rng(4).normal(size=(5, 4)), requires_grad=True)
        ce_smoothed(logits, [0, 1, 2, 3, 0], 0.05).backward()
    np.testing.assert_allclose(logits.grad.sum(axis=1), 0.0, atol=1e-12)


def test_ce_matches_finite_differences():
    with precision("float64"):
        logits = Tensor(np.random.default_rng(6).normal(size=(5, 4)), requires_grad=True)
        labels, w = [0, 1, 2, 3, 1], [1.5, 0.5, 1.0, 2.0]
        assert finite_diff_check(lambda z: ce_smoothed(z, labels, 0.05, class_weights=w), [logits]) < 1e-5


def test_l2_single_weight():
    stub = SimpleNamespace(parameters=lambda: [Parameter(np.array([0.3]), "k.weight", weight_decay_eligible=True)], frozen=set())
    with precision("float64"):
        assert W.l2_coeff * l2_penalty(stub).item() == pytest.approx(9e-6, rel=1e-9)


def test_l2_skips_biases_and_frozen():
    k = Parameter(np.array([1.0, 2.0]), "a.weight", weight_decay_eligible=True)
    frozen = Parameter(np.array([5.0]), "b.weight", weight_decay_eligible=True)
    bias = Parameter(np.array([3.0]), "a.bias")
    stub = SimpleNamespace(parameters=lambda: [k, frozen, bias], frozen={"b.weight"})
    assert l2_penalty(stub).item() == pytest.approx(5.0)
    assert l2_penalty(None).item() == 0.0


def test_total_loss_composition():
    target = np.random.default_rng(5).random((2, 4, 4, 3))
    out = SimpleNamespace(reconstruction=Tensor(target), class_logits=Tensor(np.zeros((2, 4))))
    total, comps = total_loss(out, target, np.zeros((2, 4, 4, 1)), [0, 3], W, model=None)
    assert total.item() == pytest.approx(0.25 * 0 + math.log(4) + 0, rel=1e-6)
    assert comps["loss_total"] == pytest.approx(1.3863, abs=1e-4)
    assert set(comps) == {"loss_rgb", "loss_ce", "loss_l2", "loss_total"}


def test_total_loss_perceptual_extension():
    target = np.zeros((1, 4, 4, 3))
    out = SimpleNamespace(reconstruction=Tensor(target + 0.5), class_logits=Tensor(np.zeros((1, 4))))
    w = LossWeights(perceptual_weight=2.0)
    with pytest.raises(ValueError, match="perceptual_fn"):
        total_loss(out, target, np.ones((1, 4, 4, 1)), [0], w)
    _, comps = total_loss(out, target, np.ones((1, 4, 4, 1)), [0], w, perceptual_fn=lambda a, b: (a - b).square().mean())
    assert comps["loss_perceptual"] == pytest.approx(0.25)
    assert comps["loss_total"] == pytest.approx(0.25 * 0.5 + math.log(4) + 2.0 * 0.25, rel=1e-5)
