"""
The SMARC network: four partial-convolution encoder blocks, a two-block
dilated bottleneck, four decoder stages with skip fusion, an RGB head and a
multi-scale classification head.

Shapes below are per image (height x width x channels); every tensor also
carries a leading batch axis.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Set, Tuple

import numpy as np

from smarc.config import ArchConfig
from smarc.functional import conv2d, conv_transpose2d, dense, dropout, global_avg_pool, relu, sigmoid, softmax
from smarc.layers import (
    KERNEL_SIZE,
    MaskPair,
    PConvBlock,
    downsample,
    he_uniform,
    make_pconv_block,
    mask_merge,
    mask_upsample,
    pconv_block,
    se_width,
)
from smarc.tensor import Parameter, Tensor, check_binary, concat

# ===================== CONFIG =====================
ENCODER_MULTIPLIERS = (1, 2, 4, 8)
BOTTLENECK_DILATIONS = (2, 4)
UPSAMPLE_STRIDE = 2
RGB_CHANNELS = 3


# ===================== Types =====================

@dataclass
class DecoderStage:
    name: str
    up_weight: Parameter  # kh x kw x Cout x Cin
    up_bias: Parameter
    block: PConvBlock

    def parameters(self) -> Iterator[Parameter]:
        yield self.up_weight
        yield self.up_bias
        yield from self.block.parameters()


@dataclass
class ClassHead:
    hidden: List[Tuple[Parameter, Parameter]]
    out_weight: Parameter
    out_bias: Parameter

    def parameters(self) -> Iterator[Parameter]:
        for w, b in self.hidden:
            yield w
            yield b
        yield self.out_weight
        yield self.out_bias


@dataclass
class SmarcModel:
    cfg: ArchConfig
    enc: List[PConvBlock]
    bottle: List[PConvBlock]
    dec: List[DecoderStage]  # dec4, dec3, dec2, dec1
    rgb_weight: Parameter
    rgb_bias: Parameter
    cls_head: ClassHead
    frozen: Set[str] = field(default_factory=set)

    def named_parameters(self) -> "OrderedDict[str, Parameter]":
        out: "OrderedDict[str, Parameter]" = OrderedDict()
        for mod in (*self.enc, *self.bottle, *self.dec):
            for p in mod.parameters():
                out[p.name] = p
        out[self.rgb_weight.name] = self.rgb_weight
        out[self.rgb_bias.name] = self.rgb_bias
        for p in self.cls_head.parameters():
            out[p.name] = p
        return out

    def parameters(self) -> List[Parameter]:
        return list(self.named_parameters().values())

    def trainable_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters() if p.name not in self.frozen]

    def buffers(self) -> "OrderedDict[str, np.ndarray]":
        """Batch-norm running statistics (empty unless cfg.batch_norm)."""
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        blocks = [*self.enc, *self.bottle, *(s.block for s in self.dec)]
        for blk in blocks:
            for name, arr in blk.buffers():
                out[name] = arr
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


@dataclass
class ModelOutput:
    reconstruction: Tensor  # B x S x S x 3, in (0, 1)
    class_logits: Tensor  # B x K
    class_probs: Tensor  # B x K
    final_mask: Tensor  # B x S x S x 1


# ===================== Construction =====================

def encoder_widths(cfg: ArchConfig) -> List[int]:
    return [cfg.base_channels * k for k in ENCODER_MULTIPLIERS]


def feature_length(cfg: ArchConfig) -> int:
    """Length of the concatenated GAP vector fed to the classification head."""
    w = encoder_widths(cfg)
    return w[2] + w[3] + cfg.bottleneck_channels[1]


def _dense_params(name: str, fan_in: int, units: int, rng: np.random.Generator) -> Tuple[Parameter, Parameter]:
    w = Parameter(he_uniform((fan_in, units), fan_in, rng), f"{name}.weight", weight_decay_eligible=True)
    b = Parameter(np.zeros(units), f"{name}.bias")
    return w, b


def build_model(cfg: ArchConfig, seed: int = 42) -> SmarcModel:
    """Instantiate every layer with He-uniform kernels and zero biases, seeded."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    widths = encoder_widths(cfg)
    block = dict(rng=rng, se_ratio=cfg.se_ratio, use_batch_norm=cfg.batch_norm)

    enc, cin = [], RGB_CHANNELS
    for i, w in enumerate(widths, start=1):
        enc.append(make_pconv_block(f"enc{i}", cin, w, 1, **block))
        cin = w

    bottle = []
    for i, (w, d) in enumerate(zip(cfg.bottleneck_channels, BOTTLENECK_DILATIONS), start=1):
        bottle.append(make_pconv_block(f"bottle{i}", cin, w, d, **block))
        cin = w

    dec = []
    for i in (4, 3, 2, 1):
        w = widths[i - 1]
        name = f"dec{i}"
        k = KERNEL_SIZE
        # fan_in of the transposed conv: taps feeding one output position
        up_w = Parameter(he_uniform((k, k, w, cin), k * k * cin, rng), f"{name}.up.weight", weight_decay_eligible=True)
        up_b = Parameter(np.zeros(w), f"{name}.up.bias")
        dec.append(DecoderStage(name, up_w, up_b, make_pconv_block(f"{name}.block", 2 * w, w, 1, **block)))
        cin = w

    rgb_w = Parameter(he_uniform((1, 1, cin, RGB_CHANNELS), cin, rng), "rgb_head.weight", weight_decay_eligible=True)
    rgb_b = Parameter(np.zeros(RGB_CHANNELS), "rgb_head.bias")

    hidden, fan_in = [], feature_length(cfg)
    for j, units in enumerate(cfg.head_hidden, start=1):
        hidden.append(_dense_params(f"cls_head.dense{j}", fan_in, units, rng))
        fan_in = units
    out_w, out_b = _dense_params("cls_head.out", fan_in, cfg.num_classes, rng)

    model = SmarcModel(cfg, enc, bottle, dec, rgb_w, rgb_b, ClassHead(hidden, out_w, out_b))
    names = [p.name for p in model.parameters()]
    if len(names) != len(set(names)):
        raise ValueError("build_model produced duplicate parameter names")
    return model


# ===================== Forward =====================

def _record(trace: Optional[Dict[str, Tuple[int, ...]]], name: str, t: Tensor) -> None:
    if trace is not None:
        trace[name] = tuple(t.shape[1:])


def encode(
    model: SmarcModel,
    pair: MaskPair,
    train_mode: bool = False,
    trace: Optional[Dict[str, Tuple[int, ...]]] = None,
) -> Tuple[List[MaskPair], MaskPair]:
    """
    Returns the pre-pooling skips (s1..s4 with masks) and the pooled deepest
    map x4 that feeds the bottleneck.
    """
    s = model.cfg.input_size
    if pair.shape[1:] != (s, s, RGB_CHANNELS):
        raise ValueError(f"encode expects B x {s} x {s} x {RGB_CHANNELS} input, got {pair.shape}")
    _record(trace, "x", pair.features)
    _record(trace, "m", pair.mask)

    skips, h = [], pair
    for i, blk in enumerate(model.enc, start=1):
        skip = pconv_block(h, blk, train_mode)
        skips.append(skip)
        h = downsample(skip)
        _record(trace, f"s{i}", skip.features)
        _record(trace, f"s{i}_m", skip.mask)
        _record(trace, f"x{i}", h.features)
        _record(trace, f"m{i}", h.mask)
    return skips, h


def bottleneck(
    model: SmarcModel,
    deepest: MaskPair,
    train_mode: bool = False,
    trace: Optional[Dict[str, Tuple[int, ...]]] = None,
) -> MaskPair:
    h = deepest
    for i, blk in enumerate(model.bottle, start=1):
        h = pconv_block(h, blk, train_mode)
        _record(trace, f"b{i}", h.features)
    _record(trace, "b", h.features)
    _record(trace, "b_m", h.mask)
    return h


def decode(
    model: SmarcModel,
    b: MaskPair,
    skips: Sequence[MaskPair],
    train_mode: bool = False,
    trace: Optional[Dict[str, Tuple[int, ...]]] = None,
) -> MaskPair:
    """Upsample, fuse with the same-resolution skip, refine; four stages."""
    if len(skips) != len(model.dec):
        raise ValueError(f"decode needs {len(model.dec)} skips, got {len(skips)}")
    h = b
    for stage, skip in zip(model.dec, reversed(skips)):
        target = tuple(skip.shape[1:3])
        up_hw = (h.shape[1] * UPSAMPLE_STRIDE, h.shape[2] * UPSAMPLE_STRIDE)
        if up_hw != target or h.shape[0] != skip.shape[0]:
            raise ValueError(
                f"decode stage {stage.name}: upsampled {h.shape[0]} x {up_hw} does not match skip "
                f"{skip.shape[0]} x {target}"
            )
        feats = conv_transpose2d(h.features, stage.up_weight, stage.up_bias, stride=UPSAMPLE_STRIDE, output_hw=target)
        mask = mask_merge(mask_upsample(h.mask), skip.mask)
        h = pconv_block(MaskPair(concat([feats, skip.features], axis=-1), mask), stage.block, train_mode)
        _record(trace, f"d{stage.name[-1]}", h.features)
    _record(trace, "y", h.features)
    _record(trace, "m_final", h.mask)
    return h


def classify(model: SmarcModel, f_cls: Tensor, train_mode: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Dense stack with relu and dropout; returns logits."""
    h = f_cls
    for w, b in model.cls_head.hidden:
        h = dropout(relu(dense(h, w, b)), model.cfg.dropout, rng, train_mode)
    return dense(h, model.cls_head.out_weight, model.cls_head.out_bias)


def forward(
    model: SmarcModel,
    pair: MaskPair,
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
    trace: Optional[Dict[str, Tuple[int, ...]]] = None,
) -> ModelOutput:
    """
    Full pass. Dropout is active only in train_mode; batch norm uses batch
    statistics only when train_mode is on and the trunk is not frozen.
    """
    check_binary(pair.mask.data, "forward input mask")
    trunk_train = train_mode and not model.frozen
    skips, deepest = encode(model, pair, trunk_train, trace)
    b = bottleneck(model, deepest, trunk_train, trace)
    y = decode(model, b, skips, trunk_train, trace)

    recon = sigmoid(conv2d(y.features, model.rgb_weight, model.rgb_bias, padding="same"))
    f_cls = concat([global_avg_pool(skips[2].features), global_avg_pool(skips[3].features), global_avg_pool(b.features)], axis=-1)
    logits = classify(model, f_cls, train_mode, rng)
    probs = softmax(logits, axis=-1)
    _record(trace, "I_hat", recon)
    _record(trace, "f_cls", f_cls)
    _record(trace, "logits", logits)
    return ModelOutput(recon, logits, probs, y.mask)


# ===================== Accounting =====================

def shape_table(cfg: ArchConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Per-image shape of every named intermediate, by shape arithmetic only."""
    cfg.validate()
    s, widths = cfg.input_size, encoder_widths(cfg)
    t: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    t["x"] = (s, s, RGB_CHANNELS)
    t["m"] = (s, s, 1)
    side = s
    for i, w in enumerate(widths, start=1):
        t[f"s{i}"] = (side, side, w)
        t[f"s{i}_m"] = (side, side, 1)
        side //= 2
        t[f"x{i}"] = (side, side, w)
        t[f"m{i}"] = (side, side, 1)
    for i, w in enumerate(cfg.bottleneck_channels, start=1):
        t[f"b{i}"] = (side, side, w)
    t["b"] = (side, side, cfg.bottleneck_channels[-1])
    t["b_m"] = (side, side, 1)
    for i in (4, 3, 2, 1):
        side *= 2
        t[f"d{i}"] = (side, side, widths[i - 1])
    t["y"] = (s, s, widths[0])
    t["m_final"] = (s, s, 1)
    t["I_hat"] = (s, s, RGB_CHANNELS)
    t["f_cls"] = (feature_length(cfg),)
    t["logits"] = (cfg.num_classes,)
    return t


def _block_params(cin: int, cout: int, cfg: ArchConfig) -> int:
    k2 = KERNEL_SIZE * KERNEL_SIZE
    r = se_width(cout, cfg.se_ratio)
    n = (k2 * cin * cout + cout) + (k2 * cout * cout + cout) + (cout * r + r) + (r * cout + cout)
    if cfg.batch_norm:
        n += 4 * cout
    return n


def count_params(cfg: ArchConfig) -> int:
    """Parameter elements of build_model(cfg), tallied from the layer list."""
    cfg.validate()
    k2 = KERNEL_SIZE * KERNEL_SIZE
    widths = encoder_widths(cfg)
    total, cin = 0, RGB_CHANNELS
    for w in widths:
        total += _block_params(cin, w, cfg)
        cin = w
    for w in cfg.bottleneck_channels:
        total += _block_params(cin, w, cfg)
        cin = w
    for w in reversed(widths):
        total += k2 * cin * w + w + _block_params(2 * w, w, cfg)
        cin = w
    total += cin * RGB_CHANNELS + RGB_CHANNELS
    dims = [feature_length(cfg), *cfg.head_hidden, cfg.num_classes]
    total += sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    return total


def param_count(model) -> int:
    """Sum of element counts over every parameter (buffers excluded)."""
    return int(sum(p.size for p in model.parameters()))


def millions_per_second(count: int, seconds: float) -> float:
    """(count / 1e6) / seconds; shared by both throughput readings and the reference row."""
    if seconds <= 0:
        raise ValueError(f"seconds must be > 0, got {seconds}")
    return (count / 1e6) / seconds


def param_throughput(model, seconds_per_image: float) -> float:
    """Millions of parameters processed per second: param_count / 1e6 / s_per_img."""
    return millions_per_second(param_count(model), seconds_per_image)


def param_throughput_total(model, total_seconds: float) -> float:
    """The per-total-run reading: param_count / 1e6 / total seconds over the test set."""
    return millions_per_second(param_count(model), total_seconds)
