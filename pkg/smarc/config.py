# config.py
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Tuple

from smarc.utils import clean

# ===== CONFIG: defaults =====
DEFAULT_SEED = 42
# =================================


# ---------- Typed configs ----------

@dataclass(frozen=True)
class ArchConfig:
    input_size: int = 224
    base_channels: int = 64
    bottleneck_channels: Tuple[int, int] = (1024, 2048)
    num_classes: int = 4
    head_hidden: Tuple[int, ...] = (512,)
    dropout: float = 0.25
    se_ratio: int = 16
    batch_norm: bool = False

    def problems(self) -> List[str]:
        out = []
        if self.input_size <= 0 or self.input_size % 16:
            out.append(f"input_size must be a positive multiple of 16, got {self.input_size}")
        if self.base_channels < 4:
            out.append(f"base_channels must be >= 4, got {self.base_channels}")
        if len(self.bottleneck_channels) != 2 or any(c < 1 for c in self.bottleneck_channels):
            out.append(f"bottleneck_channels must be two positive widths, got {self.bottleneck_channels}")
        if self.num_classes < 2:
            out.append(f"num_classes must be >= 2, got {self.num_classes}")
        if any(h < 1 for h in self.head_hidden):
            out.append(f"head_hidden widths must be positive, got {self.head_hidden}")
        if not 0.0 <= self.dropout < 1.0:
            out.append(f"dropout must be in [0, 1), got {self.dropout}")
        if self.se_ratio < 1:
            out.append(f"se_ratio must be >= 1, got {self.se_ratio}")
        return out

    def validate(self) -> "ArchConfig":
        _raise_if(self.problems(), "ArchConfig")
        return self


@dataclass(frozen=True)
class LossWeights:
    lambda_rgb: float = 0.25
    label_smoothing: float = 0.05
    l2_coeff: float = 1e-4
    hole_weight: float = 6.0
    valid_weight: float = 1.0
    # Weight of an optional perceptual term; needs a feature function passed to total_loss.
    perceptual_weight: float = 0.0

    def problems(self) -> List[str]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v < 0:
                out.append(f"{f.name} must be >= 0, got {v}")
        if not self.label_smoothing < 1.0:
            out.append(f"label_smoothing must be < 1, got {self.label_smoothing}")
        if self.hole_weight == 0 and self.valid_weight == 0:
            out.append("hole_weight and valid_weight cannot both be 0")
        return out

    def validate(self) -> "LossWeights":
        _raise_if(self.problems(), "LossWeights")
        return self


@dataclass(frozen=True)
class AugmentSpec:
    rotation_ks: Tuple[int, ...] = (0, 1, 2, 3)
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    brightness_delta: float = 0.06
    contrast_range: Tuple[float, float] = (0.90, 1.10)
    saturation_range: Tuple[float, float] = (0.90, 1.10)
    noise_sigma_max: float = 0.02

    def problems(self) -> List[str]:
        out = []
        if not self.rotation_ks or any(k not in (0, 1, 2, 3) for k in self.rotation_ks):
            out.append(f"rotation_ks must be a non-empty subset of 0..3, got {self.rotation_ks}")
        for name in ("hflip_prob", "vflip_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                out.append(f"{name} must be in [0, 1], got {p}")
        if self.brightness_delta < 0:
            out.append(f"brightness_delta must be >= 0, got {self.brightness_delta}")
        for name in ("contrast_range", "saturation_range"):
            lo_hi = getattr(self, name)
            if len(lo_hi) != 2 or lo_hi[0] > lo_hi[1] or lo_hi[0] < 0:
                out.append(f"{name} must be (lo, hi) with 0 <= lo <= hi, got {lo_hi}")
        if self.noise_sigma_max < 0:
            out.append(f"noise_sigma_max must be >= 0, got {self.noise_sigma_max}")
        return out

    def validate(self) -> "AugmentSpec":
        _raise_if(self.problems(), "AugmentSpec")
        return self


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.6
    val_frac: float = 0.2
    test_frac: float = 0.2
    seed: int = DEFAULT_SEED
    stratified: bool = True

    def problems(self) -> List[str]:
        out = []
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(f < 0 for f in fracs):
            out.append(f"split fractions must be >= 0, got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            out.append(f"split fractions must sum to 1, got {sum(fracs):.6f}")
        return out

    def validate(self) -> "SplitSpec":
        _raise_if(self.problems(), "SplitSpec")
        return self


@dataclass(frozen=True)
class TrainConfig:
    phase_a_lr: float = 2e-4
    phase_a_epochs: int = 10
    phase_b_lr: float = 1e-4
    phase_b_max_epochs: int = 150
    batch_size: int = 16
    seed: int = DEFAULT_SEED
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_patience: int = 8
    plateau_factor: float = 0.5
    min_lr: float = 1e-6
    early_stop_patience: int = 18
    restore_best: bool = True
    min_delta: float = 1e-6
    augment: bool = True
    loss: LossWeights = field(default_factory=LossWeights)
    augment_spec: AugmentSpec = field(default_factory=AugmentSpec)

    def problems(self) -> List[str]:
        out = []
        if not 0.0 < self.plateau_factor < 1.0:
            out.append(f"plateau_factor must be in (0, 1), got {self.plateau_factor}")
        for name in ("phase_a_lr", "phase_b_lr"):
            lr = getattr(self, name)
            if lr <= 0:
                out.append(f"{name} must be > 0, got {lr}")
            elif not self.min_lr < lr:
                out.append(f"min_lr ({self.min_lr}) must be below {name} ({lr})")
        for name in ("plateau_patience", "early_stop_patience", "batch_size"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("phase_a_epochs", "phase_b_max_epochs"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be >= 0, got {getattr(self, name)}")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            out.append(f"adam betas must be in [0, 1), got ({self.adam_beta1}, {self.adam_beta2})")
        if self.adam_eps <= 0:
            out.append(f"adam_eps must be > 0, got {self.adam_eps}")
        if self.min_delta < 0:
            out.append(f"min_delta must be >= 0, got {self.min_delta}")
        out.extend(self.loss.problems())
        out.extend(self.augment_spec.problems())
        return out

    def validate(self) -> "TrainConfig":
        _raise_if(self.problems(), "TrainConfig")
        return self


@dataclass(frozen=True)
class RunConfig:
    """Everything one command needs: architecture, training recipe, split."""

    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitSpec = field(default_factory=SplitSpec)

    def validate(self) -> "RunConfig":
        problems = self.arch.problems() + self.train.problems() + self.split.problems()
        _raise_if(problems, "Config")
        return self


# Desk-scale presets
DESK_ARCH = ArchConfig(input_size=32, base_channels=4, bottleneck_channels=(64, 128), head_hidden=(32,))
SMOKE_ARCH_64 = ArchConfig(input_size=64, base_channels=16, bottleneck_channels=(256, 512), head_hidden=(128,))


def _raise_if(problems: List[str], what: str) -> None:
    if problems:
        joined = "\n  - ".join(problems)
        raise ValueError(f"Invalid {what} ({len(problems)} problem(s)):\n  - {joined}")


# ---------- Flat key/value file ----------

def _sections(run: RunConfig) -> Dict[str, Tuple[str, Any]]:
    """key -> (section, dataclass instance). 'seed' belongs to train and split both."""
    owners: Dict[str, Tuple[str, Any]] = {}
    for section, obj in (
        ("arch", run.arch),
        ("train", run.train),
        ("loss", run.train.loss),
        ("augment_spec", run.train.augment_spec),
        ("split", run.split),
    ):
        for f in fields(obj):
            if f.name in ("loss", "augment_spec"):
                continue
            if f.name == "seed" and section == "split":
                continue
            owners[f.name] = (section, obj)
    return owners


def _parse_value(raw: str, default: Any) -> Any:
    s = clean(raw)
    if isinstance(default, bool):
        low = s.lower()
        if low in {"1", "true", "yes", "on"}:
            return True
        if low in {"0", "false", "no", "off"}:
            return False
        raise ValueError(f"expected a boolean, got '{raw}'")
    if isinstance(default, int):
        return int(s)
    if isinstance(default, float):
        return float(s)
    if isinstance(default, tuple):
        parts = [p for p in (x.strip() for x in s.strip("()[]").split(",")) if p]
        elem = type(default[0]) if default else int
        return tuple(elem(p) for p in parts)
    return s


def read_config_file(path: str | Path) -> Dict[str, str]:
    """
    Read 'key = value' lines. '#' starts a comment; blank lines are ignored.
    Duplicate keys are errors.
    """
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"Config file not found: {p.resolve()}")
    values: Dict[str, str] = {}
    problems: List[str] = []
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            problems.append(f"line {lineno}: expected 'key = value', got '{text}'")
            continue
        key, val = (clean(x) for x in text.split("=", 1))
        if key in values:
            problems.append(f"line {lineno}: duplicate key '{key}'")
            continue
        values[key] = val
    _raise_if(problems, f"config file {p}")
    return values


def parse_overrides(pairs: List[str]) -> Dict[str, str]:
    """['key=value', ...] from repeated --set flags."""
    out: Dict[str, str] = {}
    for item in pairs or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got '{item}'")
        key, val = (clean(x) for x in item.split("=", 1))
        out[key] = val
    return out


def apply_values(run: RunConfig, values: Mapping[str, str]) -> RunConfig:
    """Return a new RunConfig with flat key/value strings applied, then validated."""
    owners = _sections(run)
    changes: Dict[str, Dict[str, Any]] = {"arch": {}, "train": {}, "loss": {}, "augment_spec": {}, "split": {}}
    problems: List[str] = []
    for key, raw in values.items():
        if key not in owners:
            problems.append(f"unknown key '{key}'")
            continue
        section, obj = owners[key]
        try:
            changes[section][key] = _parse_value(raw, getattr(obj, key))
        except ValueError as e:
            problems.append(f"bad value for {key}: {e}")
    _raise_if(problems, "config values")

    if "seed" in changes["train"]:
        changes["split"]["seed"] = changes["train"]["seed"]
    loss = replace(run.train.loss, **changes["loss"])
    aug = replace(run.train.augment_spec, **changes["augment_spec"])
    resolved = RunConfig(
        arch=replace(run.arch, **changes["arch"]),
        train=replace(run.train, loss=loss, augment_spec=aug, **changes["train"]),
        split=replace(run.split, **changes["split"]),
    )
    return resolved.validate()


def resolve_config(path: str | Path | None, overrides: Mapping[str, str] | None = None, base: RunConfig | None = None) -> RunConfig:
    """File values first, then CLI overrides on top."""
    values: Dict[str, str] = {}
    if path:
        values.update(read_config_file(path))
    values.update(overrides or {})
    return apply_values(base or RunConfig(), values)


def _format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def config_snapshot(run: RunConfig) -> Dict[str, str]:
    """Flat key -> string view of every resolved value (what gets persisted)."""
    out: Dict[str, str] = {}
    for key, (_, obj) in _sections(run).items():
        out[key] = _format_value(getattr(obj, key))
    return dict(sorted(out.items()))


def write_config_file(path: str | Path, run: RunConfig) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# resolved configuration"] + [f"{k} = {v}" for k, v in config_snapshot(run).items()]
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return p
