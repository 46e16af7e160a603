"""
Mask-aware building blocks.

Every feature map travels with a single-channel binary validity mask
(MaskPair). Partial convolution only reads valid pixels, renormalizes by
the share of its window that was valid, and marks an output valid when its
window saw at least one valid pixel.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, Optional

import numpy as np

from smarc.functional import (
    batch_norm,
    conv2d,
    conv_forward_array,
    conv_geometry,
    dense,
    global_avg_pool,
    pad_hw,
    pool2d,
    relu,
    sigmoid,
)
from smarc.tensor import Parameter, Tensor, check_binary, default_dtype

# ===================== CONFIG =====================
KERNEL_SIZE = 3
ALLOWED_DILATIONS = (1, 2, 4)
SE_RATIO = 16
SE_MIN_UNITS = 4
BN_MOMENTUM = 0.99
BN_EPS = 1e-3


# ===================== Types =====================

@dataclass
class MaskPair:
    """Feature map B x H x W x C with its binary validity mask B x H x W x 1."""

    features: Tensor
    mask: Tensor

    def __post_init__(self):
        f, m = self.features.shape, self.mask.shape
        if len(f) != 4 or len(m) != 4 or m[-1] != 1 or f[:3] != m[:3]:
            raise ValueError(f"MaskPair extents disagree: features {f} vs mask {m} (mask must be B x H x W x 1)")
        check_binary(self.mask.data, "MaskPair mask")

    @property
    def shape(self):
        return self.features.shape


def he_uniform(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(default_dtype())


@dataclass
class PartialConvLayer:
    weight: Parameter
    bias: Parameter
    dilation: int = 1

    def __post_init__(self):
        if self.dilation not in ALLOWED_DILATIONS:
            raise ValueError(f"PartialConvLayer dilation must be one of {ALLOWED_DILATIONS}, got {self.dilation}")

    @property
    def window_ones(self) -> int:
        return int(self.weight.shape[0] * self.weight.shape[1])

    @property
    def out_channels(self) -> int:
        return int(self.weight.shape[3])

    def parameters(self) -> Iterator[Parameter]:
        yield self.weight
        yield self.bias


@dataclass
class SEBlock:
    reduce_w: Parameter
    reduce_b: Parameter
    expand_w: Parameter
    expand_b: Parameter
    ratio: int = SE_RATIO

    def parameters(self) -> Iterator[Parameter]:
        yield from (self.reduce_w, self.reduce_b, self.expand_w, self.expand_b)


@dataclass
class BatchNormLayer:
    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray

    def parameters(self) -> Iterator[Parameter]:
        yield self.gamma
        yield self.beta


@dataclass
class PConvBlock:
    conv1: PartialConvLayer
    conv2: PartialConvLayer
    se: SEBlock
    bn1: Optional[BatchNormLayer] = None
    bn2: Optional[BatchNormLayer] = None

    @property
    def out_channels(self) -> int:
        return self.conv2.out_channels

    @property
    def dilation(self) -> int:
        return self.conv1.dilation

    def parameters(self) -> Iterator[Parameter]:
        yield from self.conv1.parameters()
        if self.bn1 is not None:
            yield from self.bn1.parameters()
        yield from self.conv2.parameters()
        if self.bn2 is not None:
            yield from self.bn2.parameters()
        yield from self.se.parameters()

    def buffers(self) -> Iterator[tuple]:
        for bn in (self.bn1, self.bn2):
            if bn is not None:
                prefix = bn.gamma.name.rsplit(".", 1)[0]
                yield f"{prefix}.running_mean", bn.running_mean
                yield f"{prefix}.running_var", bn.running_var


# ===================== Constructors =====================

def se_width(channels: int, ratio: int = SE_RATIO) -> int:
    return max(SE_MIN_UNITS, channels // ratio)


def make_partial_conv(name: str, cin: int, cout: int, dilation: int, rng: np.random.Generator) -> PartialConvLayer:
    k = KERNEL_SIZE
    weight = Parameter(he_uniform((k, k, cin, cout), k * k * cin, rng), f"{name}.weight", weight_decay_eligible=True)
    bias = Parameter(np.zeros(cout), f"{name}.bias")
    return PartialConvLayer(weight, bias, dilation)


def make_se(name: str, channels: int, ratio: int, rng: np.random.Generator) -> SEBlock:
    r = se_width(channels, ratio)
    return SEBlock(
        reduce_w=Parameter(he_uniform((channels, r), channels, rng), f"{name}.reduce.weight", weight_decay_eligible=True),
        reduce_b=Parameter(np.zeros(r), f"{name}.reduce.bias"),
        expand_w=Parameter(he_uniform((r, channels), r, rng), f"{name}.expand.weight", weight_decay_eligible=True),
        expand_b=Parameter(np.zeros(channels), f"{name}.expand.bias"),
        ratio=ratio,
    )


def make_batch_norm(name: str, channels: int) -> BatchNormLayer:
    dt = default_dtype()
    return BatchNormLayer(
        gamma=Parameter(np.ones(channels), f"{name}.gamma"),
        beta=Parameter(np.zeros(channels), f"{name}.beta"),
        running_mean=np.zeros(channels, dtype=dt),
        running_var=np.ones(channels, dtype=dt),
    )


def make_pconv_block(
    name: str,
    cin: int,
    cout: int,
    dilation: int,
    rng: np.random.Generator,
    se_ratio: int = SE_RATIO,
    use_batch_norm: bool = False,
) -> PConvBlock:
    return PConvBlock(
        conv1=make_partial_conv(f"{name}.pconv1", cin, cout, dilation, rng),
        conv2=make_partial_conv(f"{name}.pconv2", cout, cout, dilation, rng),
        se=make_se(f"{name}.se", cout, se_ratio, rng),
        bn1=make_batch_norm(f"{name}.bn1", cout) if use_batch_norm else None,
        bn2=make_batch_norm(f"{name}.bn2", cout) if use_batch_norm else None,
    )


# ===================== Operations =====================

@lru_cache(maxsize=64)
def _in_bounds_count(h: int, w: int, kh: int, kw: int, dilation: int, dtype_name: str) -> np.ndarray:
    """Per-position number of window taps that land inside the image (kh*kw in the interior)."""
    out_hw, pads = conv_geometry((h, w), (kh, kw), 1, dilation, "same")
    ones = np.ones((1, h, w, 1), dtype=dtype_name)
    counts = conv_forward_array(pad_hw(ones, pads), np.ones((kh, kw, 1, 1), dtype=dtype_name), 1, dilation, out_hw)
    counts.setflags(write=False)
    return counts


def valid_count(mask: np.ndarray, kernel, dilation: int) -> np.ndarray:
    """Number of valid pixels under each (dilated) window; padded positions count as invalid."""
    out_hw, pads = conv_geometry(mask.shape[1:3], kernel, 1, dilation, "same")
    ones = np.ones((kernel[0], kernel[1], 1, 1), dtype=mask.dtype)
    return conv_forward_array(pad_hw(mask, pads), ones, 1, dilation, out_hw)


def partial_conv(pair: MaskPair, layer: PartialConvLayer) -> MaskPair:
    """
    out(p) = conv(x * m)(p) * (window / S(p)) + bias   where S(p) > 0
    out(p) = 0, m'(p) = 0                               where S(p) = 0

    S(p) counts valid pixels under the dilated window; `window` counts the
    taps that fall inside the image, which is kh*kw away from the border.
    """
    x, m = pair.features, pair.mask
    kh, kw, cin, _ = layer.weight.shape
    if x.shape[-1] != cin:
        raise ValueError(f"partial_conv channel mismatch: features {x.shape} vs weight {layer.weight.shape}")
    check_binary(m.data, "partial_conv mask")

    dt = x.dtype
    s = valid_count(m.data.astype(dt, copy=False), (kh, kw), layer.dilation)
    window = _in_bounds_count(x.shape[1], x.shape[2], kh, kw, layer.dilation, dt.name)
    covered = s > 0
    ratio = np.where(covered, window / np.maximum(s, 1), 0).astype(dt)
    new_mask = covered.astype(dt)

    raw = conv2d(x * m, layer.weight, None, stride=1, dilation=layer.dilation, padding="same")
    out = raw * Tensor(ratio, dtype=dt) + layer.bias * Tensor(new_mask, dtype=dt)
    return MaskPair(out, Tensor(new_mask, dtype=dt))


def se_apply(features: Tensor, se: SEBlock) -> Tensor:
    """features * sigmoid(expand(relu(reduce(GAP(features))))), broadcast per channel."""
    b, _, _, c = features.shape
    squeezed = global_avg_pool(features)
    hidden = relu(dense(squeezed, se.reduce_w, se.reduce_b))
    scale = sigmoid(dense(hidden, se.expand_w, se.expand_b))
    return features * scale.reshape(b, 1, 1, c)


def _maybe_bn(x: Tensor, bn: Optional[BatchNormLayer], train_mode: bool) -> Tensor:
    if bn is None:
        return x
    return batch_norm(x, bn.gamma, bn.beta, bn.running_mean, bn.running_var, train_mode, BN_MOMENTUM, BN_EPS)


def pconv_block(pair: MaskPair, block: PConvBlock, train_mode: bool = False) -> MaskPair:
    """partial_conv -> relu -> partial_conv -> relu -> SE; the mask is updated twice."""
    h = partial_conv(pair, block.conv1)
    h = MaskPair(relu(_maybe_bn(h.features, block.bn1, train_mode)), h.mask)
    h = partial_conv(h, block.conv2)
    feats = relu(_maybe_bn(h.features, block.bn2, train_mode))
    return MaskPair(se_apply(feats, block.se), h.mask)


def downsample(pair: MaskPair) -> MaskPair:
    """Average-pool features, max-pool the mask (any valid pixel keeps the cell valid)."""
    _, h, w, _ = pair.features.shape
    if h % 2 or w % 2:
        raise ValueError(f"downsample needs even extents, got {h}x{w}")
    return MaskPair(pool2d(pair.features, "avg"), pool2d(pair.mask, "max"))


def mask_merge(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mask_merge shape mismatch: {a.shape} vs {b.shape}")
    check_binary(a.data, "mask_merge input a")
    check_binary(b.data, "mask_merge input b")
    return Tensor(np.maximum(a.data, b.data), dtype=a.dtype)


def mask_upsample(mask: Tensor) -> Tensor:
    """Nearest-neighbour 2x replication."""
    check_binary(mask.data, "mask_upsample input")
    up = np.repeat(np.repeat(mask.data, 2, axis=1), 2, axis=2)
    return Tensor(up, dtype=mask.dtype)
