"""
Two-phase training.

Phase A trains the classification head with the trunk frozen for a fixed
number of epochs. Phase B unfreezes everything and fine-tunes with the full
objective under the plateau scheduler and the early stopper, both watching
validation accuracy. Checkpoints are written at every new best epoch.
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import Dict, Optional, Set, Tuple

import numpy as np
import pandas as pd

from smarc.augment import augment, draw_augment
from smarc.checkpoint import save_checkpoint
from smarc.config import TrainConfig
from smarc.dataset import Dataset, class_weights
from smarc.evaluate import batch_pair, quick_scores
from smarc.losses import total_loss
from smarc.model import SmarcModel, forward
from smarc.optim import TrainState, adam_step, early_stop_check, plateau_schedule
from smarc.utils import log, rng_stream

# ===================== CONFIG =====================
HEAD_PREFIX = "cls_head."
BEST_CHECKPOINT = "best.smrc"
TRAINING_LOG = "training_log.tsv"
LOG_COLUMNS = ["epoch", "phase", "lr", "loss_total", "loss_rgb", "loss_ce", "val_acc", "val_psnr"]
# stream tags keep per-sample augmentation and dropout draws apart
_AUG_STREAM = 1
_DROPOUT_STREAM = 2
_ORDER_STREAM = 3


class TrainingAborted(RuntimeError):
    def __init__(self, msg: str, last_good: Optional[Path] = None):
        super().__init__(msg)
        self.last_good = last_good


# ===================== Freezing =====================

def freeze_trunk(model: SmarcModel) -> Set[str]:
    """Exclude every parameter outside cls_head from updates and from L2."""
    model.frozen = {name for name in model.named_parameters() if not name.startswith(HEAD_PREFIX)}
    for name, p in model.named_parameters().items():
        p.requires_grad = name not in model.frozen
    return set(model.frozen)


def unfreeze_all(model: SmarcModel) -> None:
    model.frozen = set()
    for p in model.parameters():
        p.requires_grad = True


# ===================== Snapshots =====================

def snapshot(model: SmarcModel) -> Dict[str, np.ndarray]:
    out = {name: p.data.copy() for name, p in model.named_parameters().items()}
    out.update({name: arr.copy() for name, arr in model.buffers().items()})
    return out


def restore(model: SmarcModel, snap: Dict[str, np.ndarray]) -> None:
    for name, p in model.named_parameters().items():
        p.assign(snap[name])
    for name, arr in model.buffers().items():
        arr[...] = snap[name]


# ===================== Epoch =====================

def _training_batch(dataset: Dataset, idx: np.ndarray, cfg: TrainConfig, epoch: int):
    images, masks = dataset.images[idx], dataset.masks[idx]
    if cfg.augment:
        images, masks = images.copy(), masks.copy()
        for j, i in enumerate(idx):
            rng = rng_stream(cfg.seed, _AUG_STREAM, epoch, int(i))
            out = augment(dataset[int(i)], draw_augment(cfg.augment_spec, rng), rng)
            images[j], masks[j] = out.image, out.mask
    return images, masks, dataset.labels[idx]


def run_epoch(
    model: SmarcModel,
    dataset: Dataset,
    cfg: TrainConfig,
    state: TrainState,
    weights: np.ndarray,
    last_good: Optional[Path] = None,
) -> Dict[str, float]:
    """One pass over `dataset` in a (seed, epoch)-shuffled order; last partial batch kept."""
    order = rng_stream(cfg.seed, _ORDER_STREAM, state.epoch).permutation(len(dataset))
    trainable = model.trainable_parameters()
    sums: Dict[str, float] = {}
    correct, seen = 0, 0

    for b, start in enumerate(range(0, len(order), cfg.batch_size)):
        idx = order[start:start + cfg.batch_size]
        images, masks, labels = _training_batch(dataset, idx, cfg, state.epoch)
        model.zero_grad()
        out = forward(model, batch_pair(images, masks), train_mode=True,
                      rng=rng_stream(cfg.seed, _DROPOUT_STREAM, state.epoch, b))
        loss, comps = total_loss(out, images, masks, labels, cfg.loss, model, weights)
        if not math.isfinite(comps["loss_total"]):
            raise TrainingAborted(f"non-finite loss at epoch {state.epoch} batch {b}: {comps}", last_good)
        loss.backward()
        try:
            adam_step(trainable, state, state.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        except FloatingPointError as e:
            raise TrainingAborted(f"epoch {state.epoch} batch {b}: {e}", last_good)

        n = len(idx)
        for k, v in comps.items():
            sums[k] = sums.get(k, 0.0) + v * n
        correct += int(np.sum(np.argmax(out.class_probs.numpy(), axis=1) == labels))
        seen += n

    stats = {k: v / seen for k, v in sums.items()}
    stats["train_acc"] = correct / seen
    return stats


# ===================== Log =====================

def append_log(path: Path, row: Dict[str, object]) -> None:
    """One tab-separated line per epoch, header written once."""
    df = pd.DataFrame([{k: row.get(k) for k in LOG_COLUMNS}], columns=LOG_COLUMNS)
    fresh = not path.exists()
    df.to_csv(path, sep="\t", index=False, header=fresh, mode="w" if fresh else "a", lineterminator="\n")


def read_log(path: str | Path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Training log not found: {path.resolve()}")
    return pd.read_csv(path, sep="\t")


# ===================== Train =====================

def train(
    model: SmarcModel,
    train_set: Dataset,
    val_set: Dataset,
    cfg: TrainConfig,
    out_dir: Optional[str | Path] = None,
    meta: Optional[Dict[str, object]] = None,
    verbose: bool = True,
) -> Tuple[SmarcModel, TrainState]:
    """
    Phase A then Phase B. Returns the model (best weights restored when
    cfg.restore_best) and the final TrainState with per-epoch history.
    """
    cfg.validate()
    if len(train_set) == 0:
        raise ValueError("train split is empty")
    if len(val_set) == 0:
        raise ValueError("validation split is empty; early stopping needs it")
    weights = class_weights(train_set.labels, model.cfg.num_classes)
    log("train", "class weights " + ", ".join(f"{w:.4f}" for w in weights), verbose)

    out = Path(out_dir) if out_dir is not None else None
    best_path = out / BEST_CHECKPOINT if out is not None else None
    log_path = out / TRAINING_LOG if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if log_path.exists():
            log_path.unlink()
    last_good: Optional[Path] = None

    state = TrainState()

    def _epoch(phase: str) -> Dict[str, float]:
        state.epoch += 1
        state.phase = phase
        lr_used = state.lr
        stats = run_epoch(model, train_set, cfg, state, weights, last_good)
        val_acc, val_psnr = quick_scores(model, val_set, cfg.batch_size)
        row = {"epoch": state.epoch, "phase": phase, "lr": lr_used, "val_acc": val_acc, "val_psnr": val_psnr, **stats}
        state.history.append(row)
        if log_path is not None:
            append_log(log_path, row)
        log(
            "train",
            f"epoch {state.epoch} [{phase}] lr={lr_used:.2e} loss={stats['loss_total']:.4f} "
            f"rgb={stats['loss_rgb']:.4f} ce={stats['loss_ce']:.4f} train_acc={stats['train_acc']:.3f} "
            f"val_acc={val_acc:.4f} val_psnr={val_psnr:.2f}",
            verbose,
        )
        return row

    # ----- Phase A: head only -----
    frozen = freeze_trunk(model)
    state.reset_optimizer(cfg.phase_a_lr)
    log("train", f"phase A: {cfg.phase_a_epochs} epoch(s), {len(frozen)} frozen tensor(s)", verbose)
    for _ in range(cfg.phase_a_epochs):
        _epoch("A")
    if best_path is not None:
        last_good = save_checkpoint(model, state, best_path, meta)

    # ----- Phase B: end to end -----
    unfreeze_all(model)
    state.reset_optimizer(cfg.phase_b_lr)
    log("train", f"phase B: up to {cfg.phase_b_max_epochs} epoch(s) at lr={cfg.phase_b_lr:.1e}", verbose)
    best_snap: Optional[Dict[str, np.ndarray]] = None
    for _ in range(cfg.phase_b_max_epochs):
        row = _epoch("B")
        val = row["val_acc"]
        stop = early_stop_check(state, val, cfg.early_stop_patience, cfg.min_delta)
        if state.best_epoch == state.epoch:
            best_snap = snapshot(model)
            if best_path is not None:
                last_good = save_checkpoint(model, state, best_path, meta)
                log("ckpt", f"best val_acc={val:.4f} at epoch {state.epoch} -> {best_path}", verbose)
        old_lr = state.lr
        plateau_schedule(state, val, cfg.plateau_patience, cfg.plateau_factor, cfg.min_lr, cfg.min_delta)
        if state.lr != old_lr:
            log("sched", f"lr {old_lr:.2e} -> {state.lr:.2e}", verbose)
        if stop:
            log("train", f"early stop at epoch {state.epoch}; best epoch {state.best_epoch} val_acc={state.best_value:.4f}", verbose)
            break

    if cfg.restore_best and best_snap is not None:
        restore(model, best_snap)
        log("train", f"restored best weights from epoch {state.best_epoch}", verbose)
    return model, state
