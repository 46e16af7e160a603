"""
Adam, the plateau learning-rate schedule and the early stopper.

All three keep their bookkeeping on a TrainState so a checkpoint can
restore a run exactly where it was.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from smarc.tensor import Parameter


@dataclass
class TrainState:
    epoch: int = 0
    phase: str = "A"
    lr: float = 0.0
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    # early stopper
    best_value: float = -math.inf
    best_epoch: int = -1
    stop_counter: int = 0
    # plateau scheduler
    plateau_best: float = -math.inf
    plateau_counter: int = 0
    history: List[Dict[str, float]] = field(default_factory=list)

    def reset_optimizer(self, lr: float) -> None:
        """Fresh Adam moments and monitor bookkeeping, as when a new phase compiles."""
        self.lr = float(lr)
        self.step = 0
        self.m.clear()
        self.v.clear()
        self.best_value = -math.inf
        self.best_epoch = -1
        self.stop_counter = 0
        self.plateau_best = -math.inf
        self.plateau_counter = 0

    def scalars(self) -> Dict[str, object]:
        return {
            "epoch": self.epoch,
            "phase": self.phase,
            "lr": self.lr,
            "step": self.step,
            "best_value": None if math.isinf(self.best_value) else self.best_value,
            "best_epoch": self.best_epoch,
            "stop_counter": self.stop_counter,
            "plateau_best": None if math.isinf(self.plateau_best) else self.plateau_best,
            "plateau_counter": self.plateau_counter,
            "history": self.history,
        }

    @classmethod
    def from_scalars(cls, d: Dict[str, object]) -> "TrainState":
        st = cls()
        st.epoch = int(d.get("epoch", 0))
        st.phase = str(d.get("phase", "A"))
        st.lr = float(d.get("lr", 0.0))
        st.step = int(d.get("step", 0))
        bv = d.get("best_value")
        st.best_value = -math.inf if bv is None else float(bv)
        st.best_epoch = int(d.get("best_epoch", -1))
        st.stop_counter = int(d.get("stop_counter", 0))
        pb = d.get("plateau_best")
        st.plateau_best = -math.inf if pb is None else float(pb)
        st.plateau_counter = int(d.get("plateau_counter", 0))
        st.history = list(d.get("history", []))
        return st


def adam_step(
    params: Sequence[Parameter],
    state: TrainState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    grads: Optional[Sequence[np.ndarray]] = None,
) -> None:
    """
    One bias-corrected Adam update of `params` (gradients from p.grad unless
    `grads` is given). Moments live in state.m / state.v keyed by parameter name.
    """
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise ValueError(f"adam_step got {len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if g is None:
            raise ValueError(f"adam_step: parameter '{p.name}' has no gradient")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adam_step: non-finite gradient for '{p.name}'")

    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g in zip(params, grads):
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        if lr == 0.0:
            continue
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.assign(p.data - update.astype(p.dtype, copy=False))


def plateau_schedule(
    state: TrainState,
    value: float,
    patience: int,
    factor: float,
    min_lr: float,
    min_delta: float = 1e-6,
) -> float:
    """Halve (times `factor`) the lr after `patience` epochs without improvement; floor at min_lr."""
    if value > state.plateau_best + min_delta:
        state.plateau_best = value
        state.plateau_counter = 0
        return state.lr
    state.plateau_counter += 1
    if state.plateau_counter >= patience:
        state.lr = max(state.lr * factor, min_lr)
        state.plateau_counter = 0
    return state.lr


def early_stop_check(state: TrainState, value: float, patience: int, min_delta: float = 1e-6) -> bool:
    """
    Record `value` for state.epoch. Returns True when training should stop.
    An improvement moves best_value/best_epoch to this epoch.
    """
    if value > state.best_value + min_delta:
        state.best_value = value
        state.best_epoch = state.epoch
        state.stop_counter = 0
        return False
    state.stop_counter += 1
    return state.stop_counter >= patience
