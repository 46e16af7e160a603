"""
Differentiable layer ops on NHWC tensors: convolution, transposed
convolution, pooling, dense, activations, dropout and batch normalization.

Convolution is cross-correlation (no kernel flip). Weights are laid out
kh x kw x Cin x Cout for conv2d and kh x kw x Cout x Cin for
conv_transpose2d, which is the exact adjoint of a strided "same" conv2d.
"""
from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from smarc.tensor import Tensor, as_tensor, check_finite, result

PADDINGS = ("same", "valid")


# ===================== Convolution plumbing =====================

def _out_and_pads(size: int, k: int, stride: int, dilation: int, padding: str) -> Tuple[int, int, int]:
    eff = dilation * (k - 1) + 1
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + eff - size, 0)
        return out, total // 2, total - total // 2
    if padding == "valid":
        out = (size - eff) // stride + 1
        if out < 1:
            raise ValueError(f"'valid' conv leaves no output: extent {size} < effective kernel {eff}")
        return out, 0, 0
    raise ValueError(f"Unknown padding '{padding}'. Expected one of {PADDINGS}")


def conv_geometry(hw: Tuple[int, int], kernel: Tuple[int, int], stride: int, dilation: int, padding: str):
    """Return ((Ho, Wo), (top, bottom, left, right)) for a conv over an H x W map."""
    ho, pt, pb = _out_and_pads(hw[0], kernel[0], stride, dilation, padding)
    wo, pl, pr = _out_and_pads(hw[1], kernel[1], stride, dilation, padding)
    return (ho, wo), (pt, pb, pl, pr)


def pad_hw(x: np.ndarray, pads) -> np.ndarray:
    """Zero-pad the two spatial axes by (top, bottom, left, right)."""
    pt, pb, pl, pr = pads
    if not any(pads):
        return x
    return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, out_hw) -> np.ndarray:
    """Strided view of shape B x Ho x Wo x C x kh x kw over a padded input."""
    ho, wo = out_hw
    eh, ew = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    v = sliding_window_view(xp, (eh, ew), axis=(1, 2))
    return v[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride, :, ::dilation, ::dilation]


def conv_forward_array(xp: np.ndarray, w: np.ndarray, stride: int, dilation: int, out_hw) -> np.ndarray:
    cols = _windows(xp, w.shape[0], w.shape[1], stride, dilation, out_hw)
    return np.tensordot(cols, w, axes=([3, 4, 5], [2, 0, 1]))


def conv_weight_grad_array(xp: np.ndarray, g: np.ndarray, kernel, stride: int, dilation: int) -> np.ndarray:
    cols = _windows(xp, kernel[0], kernel[1], stride, dilation, g.shape[1:3])
    return np.tensordot(cols, g, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)


def conv_input_grad_array(g: np.ndarray, w: np.ndarray, x_shape, stride: int, dilation: int, pads) -> np.ndarray:
    """Scatter output gradients back onto the (unpadded) input grid."""
    b, h, wd, c = x_shape
    pt, pb, pl, pr = pads
    kh, kw = w.shape[0], w.shape[1]
    ho, wo = g.shape[1], g.shape[2]
    dxp = np.zeros((b, h + pt + pb, wd + pl + pr, c), dtype=np.result_type(g, w))
    gcols = np.tensordot(g, w, axes=([3], [3]))  # B x Ho x Wo x kh x kw x C
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            dxp[:, r0 : r0 + (ho - 1) * stride + 1 : stride, c0 : c0 + (wo - 1) * stride + 1 : stride, :] += gcols[:, :, :, i, j, :]
    return dxp[:, pt : pt + h, pl : pl + wd, :]


# ===================== conv2d / conv_transpose2d =====================

def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    dilation: int = 1,
    padding: str = "same",
) -> Tensor:
    """Cross-correlation of a B x H x W x Cin map with a kh x kw x Cin x Cout kernel."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[2] != x.shape[3]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape} vs weight {weight.shape} (expected kh x kw x {x.shape[-1] if x.ndim else '?'} x Cout)")
    if bias is not None and bias.shape != (weight.shape[3],):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match weight {weight.shape}")
    if stride < 1 or dilation < 1:
        raise ValueError(f"conv2d needs stride >= 1 and dilation >= 1, got stride={stride} dilation={dilation}")
    check_finite(x.data, "conv2d input")

    kernel = weight.shape[:2]
    out_hw, pads = conv_geometry(x.shape[1:3], kernel, stride, dilation, padding)
    xp = pad_hw(x.data, pads)
    out = conv_forward_array(xp, weight.data, stride, dilation, out_hw)
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = conv_input_grad_array(g, weight.data, x.shape, stride, dilation, pads) if x.requires_grad else None
        gw = conv_weight_grad_array(xp, g, kernel, stride, dilation) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1, 2))

    return result(out, parents, backward)


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 2,
    output_hw: Optional[Tuple[int, int]] = None,
) -> Tensor:
    """
    Upsample a B x h x w x Cin map to B x (stride*h) x (stride*w) x Cout.

    Defined as the adjoint of conv2d(·, weight, stride, padding='same') on
    the upsampled grid, so weight is kh x kw x Cout x Cin.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[3] != x.shape[3]:
        raise ValueError(f"conv_transpose2d shape mismatch: input {x.shape} vs weight {weight.shape} (expected kh x kw x Cout x {x.shape[-1] if x.ndim else '?'})")
    if stride < 1:
        raise ValueError(f"conv_transpose2d needs stride >= 1, got {stride}")
    target = (x.shape[1] * stride, x.shape[2] * stride)
    if output_hw is not None and tuple(output_hw) != target:
        raise ValueError(f"conv_transpose2d target {tuple(output_hw)} is not {stride}x the input extent {x.shape[1:3]}")
    check_finite(x.data, "conv_transpose2d input")

    kernel = weight.shape[:2]
    out_shape = (x.shape[0], target[0], target[1], weight.shape[2])
    in_hw, pads = conv_geometry(target, kernel, stride, 1, "same")
    if in_hw != x.shape[1:3]:
        raise ValueError(f"conv_transpose2d geometry drift: {in_hw} vs {x.shape[1:3]}")
    out = conv_input_grad_array(x.data, weight.data, out_shape, stride, 1, pads)
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gp = pad_hw(g, pads)
        gx = conv_forward_array(gp, weight.data, stride, 1, in_hw) if x.requires_grad else None
        gw = conv_weight_grad_array(gp, x.data, kernel, stride, 1) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1, 2))

    return result(out, parents, backward)


# ===================== Pooling =====================

def pool2d(x: Tensor, kind: str = "avg", window: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping pooling. Max routes gradient to the first maximum in row-major order."""
    x = as_tensor(x)
    if window != stride:
        raise ValueError(f"pool2d supports non-overlapping windows only (window={window}, stride={stride})")
    b, h, w, c = x.shape
    k = window
    if h % k or w % k:
        raise ValueError(f"pool2d needs extents divisible by {k}, got {h}x{w}")
    ho, wo = h // k, w // k

    if kind == "avg":
        out = x.data.reshape(b, ho, k, wo, k, c).mean(axis=(2, 4))

        def backward(g):
            g = np.broadcast_to(g[:, :, None, :, None, :] / (k * k), (b, ho, k, wo, k, c))
            return (g.reshape(b, h, w, c).astype(x.dtype, copy=True),)

        return result(out.astype(x.dtype, copy=False), (x,), backward)

    if kind == "max":
        blocks = x.data.reshape(b, ho, k, wo, k, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, ho, wo, c, k * k)
        idx = np.argmax(blocks, axis=-1)[..., None]
        out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

        def backward(g):
            gb = np.zeros_like(blocks)
            np.put_along_axis(gb, idx, g[..., None], axis=-1)
            gb = gb.reshape(b, ho, wo, c, k, k).transpose(0, 1, 4, 2, 5, 3)
            return (gb.reshape(b, h, w, c),)

        return result(out, (x,), backward)

    raise ValueError(f"Unknown pool kind '{kind}'. Expected 'avg' or 'max'")


def global_avg_pool(x: Tensor) -> Tensor:
    """B x H x W x C -> B x C spatial mean."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects B x H x W x C, got {x.shape}")
    check_finite(x.data, "global_avg_pool input")
    return x.mean(axis=(1, 2))


# ===================== Dense / activations =====================

def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"dense shape mismatch: input {x.shape} vs weight {weight.shape}")
    check_finite(x.data, "dense input")
    out = x @ weight
    return out if bias is None else out + bias


def relu(x: Tensor) -> Tensor:
    check_finite(x.data, "relu input")
    pos = x.data > 0
    return result(np.where(pos, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clipped so the output stays strictly inside (0, 1)."""
    check_finite(x.data, "sigmoid input")
    info = np.finfo(x.dtype)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    s = np.clip(s, info.tiny, 1.0 - info.epsneg).astype(x.dtype, copy=False)
    return result(s, (x,), lambda g: (g * s * (1.0 - s),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    check_finite(x.data, "softmax input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return result(s, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    check_finite(x.data, "log_softmax input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return result(out, (x,), backward)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], train_mode: bool) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-rate) so evaluation needs no rescaling."""
    if not train_mode or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return result(x.data * keep, (x,), lambda g: (g * keep,))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train_mode: bool,
    momentum: float = 0.99,
    eps: float = 1e-3,
) -> Tensor:
    """
    Per-channel normalization over batch and space. In train mode the running
    statistics are updated in place: r <- momentum * r + (1 - momentum) * batch.
    """
    axes = tuple(range(x.ndim - 1))
    if train_mode:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = ((x.data - mu) * inv_std).astype(x.dtype, copy=False)
    out = xhat * gamma.data + beta.data
    n = int(np.prod([x.shape[a] for a in axes]))

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data
        if train_mode:
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return result(out, (x, gamma, beta), backward)
