"""
Reconstruction and classification metrics, and the EvalReport they feed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from skimage.metrics import structural_similarity
from sklearn.metrics import auc, confusion_matrix, precision_recall_fscore_support, roc_curve

# ===================== CONFIG =====================
PSNR_CAP_DB = 100.0
PSNR_MSE_FLOOR = 1e-10
SSIM_SIGMA = 1.5
SSIM_WINDOW = 11
SSIM_K1 = 0.01
SSIM_K2 = 0.03

REPORT_KEYS = (
    "split",
    "n_images",
    "composite",
    "psnr_mean",
    "psnr_of_mean_mse",
    "ssim_mean",
    "mse_mean",
    "mae_mean",
    "accuracy",
    "precision_w",
    "recall_w",
    "f1_w",
    "s_per_img",
    "total_s",
    "hole_weight",
    "valid_weight",
)


# ===================== Reconstruction =====================

def mse(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean(np.square(pred - target)))


def mae(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"mae shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean(np.abs(pred - target)))


def psnr_from_mse(value: float) -> float:
    if value < PSNR_MSE_FLOOR:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / value))


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    """10 * log10(1 / mse) for images in [0, 1], capped at 100 dB."""
    return psnr_from_mse(mse(pred, target))


def _gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img.mean(axis=-1)
    if img.ndim == 2:
        return img
    raise ValueError(f"ssim expects H x W or H x W x C images, got shape {img.shape}")


def ssim(pred: np.ndarray, target: np.ndarray) -> float:
    """
    Gaussian-window SSIM (11 x 11, sigma 1.5, K1 0.01, K2 0.03, L 1) on the
    channel-mean gray image, averaged over window positions that fit inside.
    """
    a, b = _gray(pred), _gray(target)
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"ssim needs images of at least {SSIM_WINDOW} x {SSIM_WINDOW}, got {a.shape}")
    return float(structural_similarity(
        a,
        b,
        data_range=1.0,
        gaussian_weights=True,
        sigma=SSIM_SIGMA,
        use_sample_covariance=False,
        K1=SSIM_K1,
        K2=SSIM_K2,
    ))


# ===================== Classification =====================

@dataclass
class ClassificationResult:
    accuracy: float
    precision_w: float
    recall_w: float
    f1_w: float
    confusion: np.ndarray  # K x K, rows = truth
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    roc: Dict[int, Optional[Dict[str, List[float]]]]
    auc: Dict[int, float]
    predictions: np.ndarray


def weighted_scores(confusion: np.ndarray) -> Dict[str, float]:
    """
    Accuracy and support-weighted precision/recall/F1 straight from a confusion
    matrix (rows = truth). A zero denominator contributes 0.
    """
    cm = np.asarray(confusion, dtype=np.float64)
    total = cm.sum()
    if total == 0:
        return {"accuracy": 0.0, "precision_w": 0.0, "recall_w": 0.0, "f1_w": 0.0}
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        prec = np.where(predicted > 0, tp / predicted, 0.0)
        rec = np.where(support > 0, tp / support, 0.0)
        f1 = np.where(prec + rec > 0, 2 * prec * rec / (prec + rec), 0.0)
    share = support / total
    return {
        "accuracy": float(tp.sum() / total),
        "precision_w": float(np.sum(share * prec)),
        "recall_w": float(np.sum(share * rec)),
        "f1_w": float(np.sum(share * f1)),
    }


def classification_report(probs: np.ndarray, labels: Sequence[int]) -> ClassificationResult:
    """
    Argmax predictions (lowest index wins ties), confusion matrix, weighted
    scores, and one-vs-rest ROC per class by sweeping every score as a threshold.
    A class with no positives or no negatives in `labels` gets roc None, auc nan.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0] or probs.shape[0] < 1:
        raise ValueError(f"classification_report expects N x K probs and N labels, got {probs.shape} and {labels.shape}")
    k = probs.shape[1]
    classes = list(range(k))
    preds = np.argmax(probs, axis=1)

    cm = confusion_matrix(labels, preds, labels=classes)
    p, r, f, s = precision_recall_fscore_support(labels, preds, labels=classes, zero_division=0)
    pw, rw, fw, _ = precision_recall_fscore_support(labels, preds, labels=classes, average="weighted", zero_division=0)

    roc: Dict[int, Optional[Dict[str, List[float]]]] = {}
    aucs: Dict[int, float] = {}
    for c in classes:
        y = labels == c
        if y.all() or not y.any():
            roc[c], aucs[c] = None, float("nan")
            continue
        fpr, tpr, _ = roc_curve(y, probs[:, c], drop_intermediate=False)
        roc[c] = {"fpr": fpr.tolist(), "tpr": tpr.tolist()}
        aucs[c] = float(auc(fpr, tpr))

    return ClassificationResult(
        accuracy=float(np.trace(cm) / cm.sum()),
        precision_w=float(pw),
        recall_w=float(rw),
        f1_w=float(fw),
        confusion=cm.astype(np.int64),
        precision=np.asarray(p, dtype=np.float64),
        recall=np.asarray(r, dtype=np.float64),
        f1=np.asarray(f, dtype=np.float64),
        support=np.asarray(s, dtype=np.int64),
        roc=roc,
        auc=aucs,
        predictions=preds,
    )


# ===================== Report =====================

@dataclass
class EvalReport:
    split: str
    class_names: List[str]
    per_image: pd.DataFrame  # path, label, pred, psnr, ssim, mse, mae, p_<class>...
    cls: ClassificationResult
    s_per_img: float
    total_s: float
    hole_weight: float
    valid_weight: float
    composite: bool = False
    extras: Dict[str, float] = field(default_factory=dict)
    previews: Optional[np.ndarray] = None  # first few reconstructions, for triptychs

    @property
    def n_images(self) -> int:
        return int(len(self.per_image))

    @property
    def psnr_mean(self) -> float:
        return float(self.per_image["psnr"].mean())

    @property
    def psnr_of_mean_mse(self) -> float:
        return psnr_from_mse(float(self.per_image["mse"].mean()))

    @property
    def ssim_mean(self) -> float:
        return float(self.per_image["ssim"].mean())

    @property
    def mse_mean(self) -> float:
        return float(self.per_image["mse"].mean())

    @property
    def mae_mean(self) -> float:
        return float(self.per_image["mae"].mean())

    def metrics(self) -> Dict[str, object]:
        """Flat key -> value view; keys are stable (see REPORT_KEYS)."""
        out: Dict[str, object] = {
            "split": self.split,
            "n_images": self.n_images,
            "composite": self.composite,
            "psnr_mean": self.psnr_mean,
            "psnr_of_mean_mse": self.psnr_of_mean_mse,
            "ssim_mean": self.ssim_mean,
            "mse_mean": self.mse_mean,
            "mae_mean": self.mae_mean,
            "accuracy": self.cls.accuracy,
            "precision_w": self.cls.precision_w,
            "recall_w": self.cls.recall_w,
            "f1_w": self.cls.f1_w,
            "s_per_img": self.s_per_img,
            "total_s": self.total_s,
            "hole_weight": self.hole_weight,
            "valid_weight": self.valid_weight,
        }
        for c, name in enumerate(self.class_names):
            out[f"auc_{name}"] = self.cls.auc.get(c, float("nan"))
        out.update(self.extras)
        return out

    def per_class_table(self) -> pd.DataFrame:
        return pd.DataFrame({
            "class": self.class_names,
            "precision": self.cls.precision,
            "recall": self.cls.recall,
            "f1": self.cls.f1,
            "support": self.cls.support,
            "auc": [self.cls.auc.get(c, float("nan")) for c in range(len(self.class_names))],
        })

    def to_text(self) -> str:
        """key: value lines, then the confusion matrix and ROC point lists."""
        lines = []
        for k, v in self.metrics().items():
            lines.append(f"{k}: {_fmt(v)}")
        lines.append(f"classes: {', '.join(self.class_names)}")
        lines.append("confusion:")
        for row in self.cls.confusion:
            lines.append("  " + "\t".join(str(int(x)) for x in row))
        for c, name in enumerate(self.class_names):
            pts = self.cls.roc.get(c)
            if pts is None:
                lines.append(f"roc_{name}: none")
                continue
            lines.append(f"roc_{name}_fpr: " + ", ".join(f"{x:.6f}" for x in pts["fpr"]))
            lines.append(f"roc_{name}_tpr: " + ", ".join(f"{x:.6f}" for x in pts["tpr"]))
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def read_report_text(path: str | Path) -> Dict[str, str]:
    """Parse the key: value lines of report.txt (confusion rows and ROC lists skipped)."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"Report not found: {p.resolve()}")
    out: Dict[str, str] = {}
    for line in p.read_text(encoding="utf-8").splitlines():
        if not line or line.startswith(" ") or ":" not in line:
            continue
        key, val = line.split(":", 1)
        if key.startswith("roc_") or key == "confusion":
            continue
        out[key.strip()] = val.strip()
    return out
