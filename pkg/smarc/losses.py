"""
Training objective: hole-weighted MAE on the reconstruction, label-smoothed
class-weighted cross-entropy on the logits, and L2 on decay-eligible kernels.
"""
from __future__ import annotations

from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from smarc.config import LossWeights
from smarc.functional import log_softmax
from smarc.tensor import Tensor, as_tensor, check_binary, tabs, tsum


def _weights_map(mask: np.ndarray, w: LossWeights, dtype) -> np.ndarray:
    return np.where(mask > 0.5, w.valid_weight, w.hole_weight).astype(dtype)


def masked_mae_loss(pred: Tensor, target, mask, w: LossWeights) -> Tensor:
    """
    sum(weight * |pred - target|) / (sum(weight) * C), weight = hole_weight
    where mask == 0 and valid_weight where mask == 1.
    """
    pred = as_tensor(pred)
    target_arr = target.data if isinstance(target, Tensor) else np.asarray(target)
    mask_arr = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if pred.shape != target_arr.shape:
        raise ValueError(f"masked_mae_loss shape mismatch: pred {pred.shape} vs target {target_arr.shape}")
    if mask_arr.shape != pred.shape[:-1] + (1,):
        raise ValueError(f"masked_mae_loss mask shape {mask_arr.shape} does not fit pred {pred.shape}")
    check_binary(mask_arr, "masked_mae_loss mask")

    weights = _weights_map(mask_arr, w, pred.dtype)
    denom = float(weights.sum()) * pred.shape[-1]
    diff = tabs(pred - Tensor(target_arr, dtype=pred.dtype))
    return tsum(diff * Tensor(weights, dtype=pred.dtype)) / denom


def ce_smoothed(
    logits: Tensor,
    labels: Sequence[int],
    epsilon: float,
    class_weights: Optional[Sequence[float]] = None,
) -> Tensor:
    """
    Mean over the batch of class_weights[label] * -sum(t * log_softmax(logits)),
    with t = (1 - epsilon) * onehot + epsilon / K.
    """
    logits = as_tensor(logits)
    b, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (b,):
        raise ValueError(f"ce_smoothed expects {b} labels, got shape {labels.shape}")
    bad = labels[(labels < 0) | (labels >= k)]
    if bad.size:
        raise ValueError(f"ce_smoothed label(s) out of range [0, {k}): {sorted(set(bad.tolist()))}")

    t = np.full((b, k), epsilon / k, dtype=logits.dtype)
    t[np.arange(b), labels] += 1.0 - epsilon
    if class_weights is not None:
        cw = np.asarray(class_weights, dtype=logits.dtype)
        if cw.shape != (k,):
            raise ValueError(f"class_weights must have {k} entries, got shape {cw.shape}")
        t *= cw[labels][:, None]
    return -tsum(log_softmax(logits, axis=-1) * Tensor(t, dtype=logits.dtype)) / b


def l2_penalty(model) -> Tensor:
    """Sum of squares over decay-eligible parameters that are not frozen."""
    frozen = getattr(model, "frozen", set()) if model is not None else set()
    params = [p for p in (model.parameters() if model is not None else []) if p.weight_decay_eligible and p.name not in frozen]
    total = Tensor(0.0)
    for p in params:
        total = total + tsum(p.square())
    return total


def total_loss(
    output,
    target_img,
    mask,
    labels: Sequence[int],
    w: LossWeights,
    model=None,
    class_weights: Optional[Sequence[float]] = None,
    perceptual_fn: Optional[Callable[[Tensor, Tensor], Tensor]] = None,
) -> Tuple[Tensor, Dict[str, float]]:
    """
    lambda_rgb * masked_mae + ce_smoothed + l2_coeff * L2, plus
    perceptual_weight * perceptual_fn(recon, target) when that weight is set.
    Returns the scalar and a float per component for logging.
    """
    rgb = masked_mae_loss(output.reconstruction, target_img, mask, w)
    ce = ce_smoothed(output.class_logits, labels, w.label_smoothing, class_weights)
    l2 = l2_penalty(model)
    total = w.lambda_rgb * rgb + ce + w.l2_coeff * l2

    comps = {
        "loss_rgb": rgb.item(),
        "loss_ce": ce.item(),
        "loss_l2": l2.item(),
    }
    if w.perceptual_weight > 0:
        if perceptual_fn is None:
            raise ValueError("perceptual_weight > 0 needs a perceptual_fn")
        target = target_img if isinstance(target_img, Tensor) else Tensor(target_img, dtype=output.reconstruction.dtype)
        perc = perceptual_fn(output.reconstruction, target)
        total = total + w.perceptual_weight * perc
        comps["loss_perceptual"] = perc.item()
    comps["loss_total"] = total.item()
    return total, comps
