import numpy as np
import pytest

from smarc.functional import conv2d
from smarc.gradcheck import finite_diff_check
from smarc.layers import (
    MaskPair,
    PartialConvLayer,
    downsample,
    make_partial_conv,
    make_pconv_block,
    make_se,
    mask_merge,
    mask_upsample,
    partial_conv,
    pconv_block,
    se_apply,
    se_width,
)
from smarc.tensor import Parameter, Tensor, checked_mode, precision


def _pair(x, m):
    return MaskPair(Tensor(x), Tensor(m))


def _layer(w, b, dilation=1):
    return PartialConvLayer(Parameter(w, "t.weight", True), Parameter(b, "t.bias"), dilation)


def reference_partial_conv(x, m, w, b, dilation):
    """Per-pixel loops: renormalize by in-bounds taps over valid taps."""
    _, h, wd, _ = x.shape
    kh, kw, _, cout = w.shape
    ph, pw = dilation * (kh - 1) // 2, dilation * (kw - 1) // 2
    out = np.zeros((1, h, wd, cout))
    new_mask = np.zeros((1, h, wd, 1))
    for i in range(h):
        for j in range(wd):
            acc = np.zeros(cout)
            s = window = 0
            for u in range(kh):
                for v in range(kw):
                    r, c = i + u * dilation - ph, j + v * dilation - pw
                    if 0 <= r < h and 0 <= c < wd:
                        window += 1
                        s += m[0, r, c, 0]
                        acc += (x[0, r, c, :] * m[0, r, c, 0]) @ w[u, v]
            if s > 0:
                out[0, i, j] = acc * (window / s) + b
                new_mask[0, i, j, 0] = 1
    return out, new_mask


# ---------- partial_conv ----------

def test_all_valid_mask_matches_plain_conv():
    rng = np.random.default_rng(0)
    with precision("float64"):
        x = rng.normal(size=(2, 7, 7, 3))
        w, b = rng.normal(size=(3, 3, 3, 4)), rng.normal(size=4)
        out = partial_conv(_pair(x, np.ones((2, 7, 7, 1))), _layer(w, b, 2))
        dense_out = conv2d(Tensor(x), Tensor(w), Tensor(b), dilation=2)
    np.testing.assert_allclose(out.features.data, dense_out.data, rtol=1e-5, atol=1e-10)
    np.testing.assert_array_equal(out.mask.data, 1.0)


def test_center_pixel_renormalized():
    m = np.zeros((1, 3, 3, 1))
    m[0, 1, 1, 0] = 1
    out = partial_conv(_pair(np.ones((1, 3, 3, 1)), m), _layer(np.ones((3, 3, 1, 1)), np.zeros(1)))
    assert out.features.data[0, 1, 1, 0] == pytest.approx(9.0)
    np.testing.assert_array_equal(out.mask.data, 1.0)


def test_all_invalid_mask_gives_zeros():
    rng = np.random.default_rng(1)
    layer = _layer(rng.normal(size=(3, 3, 2, 2)), np.array([0.5, -0.5]))
    out = partial_conv(_pair(rng.normal(size=(1, 5, 5, 2)), np.zeros((1, 5, 5, 1))), layer)
    np.testing.assert_array_equal(out.features.data, 0.0)
    np.testing.assert_array_equal(out.mask.data, 0.0)


def test_partial_conv_matches_loop_reference_on_random_masks():
    rng = np.random.default_rng(2)
    with precision("float64"):
        for case in range(100):
            dilation = (1, 2, 4)[case % 3]
            x = rng.normal(size=(1, 6, 6, 2))
            m = (rng.random((1, 6, 6, 1)) < rng.uniform(0.05, 0.9)).astype(np.float64)
            w, b = rng.normal(size=(3, 3, 2, 2)), rng.normal(size=2)
            out = partial_conv(_pair(x, m), _layer(w, b, dilation))
            ref, ref_mask = reference_partial_conv(x, m, w, b, dilation)
            np.testing.assert_array_equal(out.mask.data, ref_mask)
            np.testing.assert_allclose(out.features.data, ref, rtol=1e-9, atol=1e-9)


def test_invalid_pixel_values_never_reach_output():
    rng = np.random.default_rng(3)
    m = (rng.random((1, 8, 8, 1)) < 0.4).astype(np.float32)
    x = rng.normal(size=(1, 8, 8, 2)).astype(np.float32)
    scrambled = np.where(m > 0, x, rng.normal(size=x.shape) * 1e3).astype(np.float32)
    layer = make_partial_conv("p", 2, 3, 2, rng)
    a = partial_conv(_pair(x, m), layer).features.data
    b = partial_conv(_pair(scrambled, m), layer).features.data
    assert a.tobytes() == b.tobytes()


def test_non_binary_mask_rejected():
    with checked_mode(True):
        with pytest.raises(ValueError, match="binary"):
            _pair(np.zeros((1, 3, 3, 1)), np.full((1, 3, 3, 1), 0.5))


def test_unsupported_dilation_rejected():
    with pytest.raises(ValueError, match="dilation"):
        _layer(np.ones((3, 3, 1, 1)), np.zeros(1), dilation=3)


def test_partial_conv_gradients():
    rng = np.random.default_rng(4)
    with precision("float64"):
        m = Tensor((rng.random((1, 5, 5, 1)) < 0.6).astype(np.float64))
        x = Tensor(rng.normal(size=(1, 5, 5, 2)), requires_grad=True)
        layer = _layer(rng.normal(size=(3, 3, 2, 2)), rng.normal(size=2))
        err = finite_diff_check(
            lambda a, w, b: partial_conv(MaskPair(a, m), layer).features,
            [x, layer.weight, layer.bias],
        )
    assert err < 1e-5


# ---------- squeeze-excitation ----------

def _se_with(channels, value=0.0, expand_bias=0.0):
    se = make_se("se", channels, 16, np.random.default_rng(0))
    for p in se.parameters():
        p.assign(np.full(p.shape, value))
    se.expand_b.assign(np.full(se.expand_b.shape, expand_bias))
    return se


def test_se_zero_weights_halve_features():
    x = np.random.default_rng(5).normal(size=(2, 4, 4, 8)).astype(np.float32)
    out = se_apply(Tensor(x), _se_with(8))
    np.testing.assert_allclose(out.data, 0.5 * x, rtol=1e-6)


def test_se_saturated_gate_passes_features():
    x = np.random.default_rng(6).normal(size=(1, 4, 4, 8)).astype(np.float32)
    out = se_apply(Tensor(x), _se_with(8, expand_bias=20.0))
    np.testing.assert_allclose(out.data, x, atol=1e-6)


def test_se_width_has_floor():
    assert se_width(64) == 4
    assert se_width(2048) == 128
    assert se_width(8) == 4


def test_se_gradients():
    rng = np.random.default_rng(7)
    with precision("float64"):
        se = make_se("se", 8, 16, rng)
        x = Tensor(rng.normal(size=(2, 3, 3, 8)), requires_grad=True)
        err = finite_diff_check(lambda a, *_: se_apply(a, se), [x, se.reduce_w, se.expand_w, se.expand_b], max_coords=12)
    assert err < 1e-5


# ---------- block ----------

def test_block_keeps_full_mask_and_sets_width():
    rng = np.random.default_rng(8)
    block = make_pconv_block("enc1", 3, 6, 1, rng)
    out = pconv_block(_pair(rng.random((1, 8, 8, 3)), np.ones((1, 8, 8, 1))), block)
    assert out.features.shape == (1, 8, 8, 6)
    np.testing.assert_array_equal(out.mask.data, 1.0)


@pytest.mark.parametrize("dilation, side", [(1, 5), (2, 9)])
def test_block_grows_single_pixel(dilation, side):
    m = np.zeros((1, 15, 15, 1))
    m[0, 7, 7, 0] = 1
    block = make_pconv_block("b", 1, 4, dilation, np.random.default_rng(9))
    out = pconv_block(_pair(np.ones((1, 15, 15, 1)), m), block).mask.data[0, :, :, 0]
    rows, cols = np.nonzero(out)
    assert rows.max() - rows.min() + 1 == side
    assert cols.max() - cols.min() + 1 == side


def test_block_with_batch_norm_registers_buffers():
    block = make_pconv_block("enc2", 2, 4, 1, np.random.default_rng(10), use_batch_norm=True)
    names = [name for name, _ in block.buffers()]
    assert names == ["enc2.bn1.running_mean", "enc2.bn1.running_var", "enc2.bn2.running_mean", "enc2.bn2.running_var"]
    x = np.random.default_rng(11).random((2, 4, 4, 2))
    pconv_block(_pair(x, np.ones((2, 4, 4, 1))), block, train_mode=True)
    assert np.any(block.bn1.running_mean != 0)


# ---------- resampling and masks ----------

def test_downsample_halves_extent():
    out = downsample(_pair(np.zeros((1, 224, 224, 2)), np.ones((1, 224, 224, 1))))
    assert out.features.shape == (1, 112, 112, 2)
    assert out.mask.shape == (1, 112, 112, 1)


def test_downsample_quadrant():
    quad = np.array([[1.0, 0.0], [0.0, 0.0]]).reshape(1, 2, 2, 1)
    out = downsample(_pair(quad, quad))
    assert out.mask.data.item() == 1
    assert out.features.data.item() == pytest.approx(0.25)


def test_downsample_odd_extent_rejected():
    with pytest.raises(ValueError, match="even"):
        downsample(_pair(np.zeros((1, 5, 4, 1)), np.ones((1, 5, 4, 1))))


def test_mask_merge_is_union():
    a = Tensor(np.array([[1.0, 0.0], [0.0, 0.0]]).reshape(1, 2, 2, 1))
    b = Tensor(np.array([[0.0, 0.0], [0.0, 1.0]]).reshape(1, 2, 2, 1))
    np.testing.assert_array_equal(mask_merge(a, b).data[0, :, :, 0], [[1, 0], [0, 1]])
    with pytest.raises(ValueError, match="mismatch"):
        mask_merge(a, Tensor(np.ones((1, 4, 4, 1))))


def test_mask_upsample_replicates():
    up = mask_upsample(Tensor(np.array([[1.0, 0.0], [0.0, 0.0]]).reshape(1, 2, 2, 1))).data[0, :, :, 0]
    expect = np.zeros((4, 4))
    expect[:2, :2] = 1
    np.testing.assert_array_equal(up, expect)
    np.testing.assert_array_equal(mask_upsample(Tensor(np.ones((1, 3, 3, 1)))).data, np.ones((1, 6, 6, 1)))


def test_downsample_inverts_mask_upsample():
    rng = np.random.default_rng(5)
    for _ in range(20):
        m = Tensor((rng.random((2, 4, 6, 1)) < 0.4).astype(np.float32))
        up = mask_upsample(m)
        back = downsample(MaskPair(Tensor(np.zeros(up.shape[:3] + (3,), dtype=np.float32)), up))
        np.testing.assert_array_equal(back.mask.data, m.data)
