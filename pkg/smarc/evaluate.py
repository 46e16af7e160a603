"""
Batched inference and the evaluation suite over a dataset split.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from smarc.config import LossWeights
from smarc.dataset import Dataset, apply_mask
from smarc.layers import MaskPair
from smarc.metrics import EvalReport, classification_report, mae, mse, psnr, ssim
from smarc.model import SmarcModel, forward
from smarc.tensor import Tensor, no_grad
from smarc.utils import log, num_workers

# ===================== CONFIG =====================
DEFAULT_BATCH = 16
PREVIEW_COUNT = 8


def batch_pair(images: np.ndarray, masks: np.ndarray) -> MaskPair:
    """Network input: invalid pixels zeroed, mask alongside."""
    return MaskPair(Tensor(apply_mask(images, masks)), Tensor(masks))


def predict(model: SmarcModel, dataset: Dataset, batch_size: int = DEFAULT_BATCH) -> Tuple[np.ndarray, np.ndarray, float]:
    """Reconstructions (N x S x S x 3), class probabilities (N x K) and forward seconds."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    recons, probs, elapsed = [], [], 0.0
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            sl = slice(start, start + batch_size)
            pair = batch_pair(dataset.images[sl], dataset.masks[sl])
            t0 = time.perf_counter()
            out = forward(model, pair, train_mode=False)
            elapsed += time.perf_counter() - t0
            recons.append(out.reconstruction.numpy())
            probs.append(out.class_probs.numpy())
    if not recons:
        s, k = model.cfg.input_size, model.cfg.num_classes
        return np.zeros((0, s, s, 3), np.float32), np.zeros((0, k), np.float32), 0.0
    return np.concatenate(recons), np.concatenate(probs), elapsed


def _image_metrics(args) -> Tuple[float, float, float, float]:
    pred, target = args
    return psnr(pred, target), ssim(pred, target), mse(pred, target), mae(pred, target)


def evaluate(
    model: SmarcModel,
    dataset: Dataset,
    batch_size: int = DEFAULT_BATCH,
    composite: bool = False,
    split_name: str = "test",
    loss_weights: Optional[LossWeights] = None,
    verbose: bool = True,
) -> EvalReport:
    """
    Per-image PSNR/SSIM/MSE/MAE and the classification suite. With
    composite=True, visible pixels of each reconstruction are replaced by
    the ground truth before scoring.
    """
    if len(dataset) == 0:
        raise ValueError(f"Cannot evaluate an empty '{split_name}' split")
    w = loss_weights or LossWeights()
    t_start = time.perf_counter()
    recon, probs, fwd_s = predict(model, dataset, batch_size)
    if composite:
        recon = recon * (1.0 - dataset.masks) + dataset.images * dataset.masks

    with ThreadPoolExecutor(max_workers=num_workers()) as pool:
        scores = list(pool.map(_image_metrics, zip(recon, dataset.images)))
    cls = classification_report(probs, dataset.labels)

    per_image = pd.DataFrame(scores, columns=["psnr", "ssim", "mse", "mae"])
    per_image.insert(0, "path", dataset.paths)
    per_image.insert(1, "label", dataset.labels.astype(int))
    per_image.insert(2, "pred", cls.predictions.astype(int))
    for c, name in enumerate(dataset.class_names):
        per_image[f"p_{name}"] = probs[:, c]

    report = EvalReport(
        split=split_name,
        class_names=list(dataset.class_names),
        per_image=per_image,
        cls=cls,
        s_per_img=fwd_s / len(dataset),
        total_s=time.perf_counter() - t_start,
        hole_weight=w.hole_weight,
        valid_weight=w.valid_weight,
        composite=composite,
        previews=recon[:PREVIEW_COUNT].copy(),
    )
    log(
        "eval",
        f"{split_name}: n={report.n_images} acc={cls.accuracy:.4f} f1_w={cls.f1_w:.4f} "
        f"psnr={report.psnr_mean:.2f}dB ssim={report.ssim_mean:.4f}",
        verbose,
    )
    return report


def quick_scores(model: SmarcModel, dataset: Dataset, batch_size: int = DEFAULT_BATCH) -> Tuple[float, float]:
    """(accuracy, mean per-image PSNR) without SSIM or ROC; used once per epoch."""
    recon, probs, _ = predict(model, dataset, batch_size)
    acc = float(np.mean(np.argmax(probs, axis=1) == dataset.labels))
    p = float(np.mean([psnr(r, t) for r, t in zip(recon, dataset.images)]))
    return acc, p
