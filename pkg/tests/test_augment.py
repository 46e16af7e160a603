import numpy as np
import pytest

from smarc.augment import AugmentDraw, augment, draw_augment, geometric, photometric
from smarc.config import AugmentSpec
from smarc.dataset import Sample, apply_mask, central_mask


def _sample(size=8, seed=0):
    img = np.random.default_rng(seed).random((size, size, 3)).astype(np.float32)
    mask = np.zeros((size, size, 1), dtype=np.float32)
    mask[1:4, 2:6] = 1
    return Sample(img, mask, 2, "x.png")


def test_identity_draw_leaves_sample_alone():
    s = _sample()
    assert AugmentDraw().is_identity
    assert augment(s, AugmentDraw()) is s


def test_half_turn_twice_is_identity():
    img = _sample().image
    draw = AugmentDraw(rotation_k=2)
    np.testing.assert_array_equal(geometric(geometric(img, draw), draw), img)


def test_flips_are_involutions():
    img = _sample().image
    draw = AugmentDraw(hflip=True, vflip=True)
    np.testing.assert_array_equal(geometric(geometric(img, draw), draw), img)
    np.testing.assert_array_equal(geometric(img, AugmentDraw(hflip=True))[:, 0], img[:, -1])


def test_brightness_shift_on_flat_image():
    out = photometric(np.full((4, 4, 3), 0.5, dtype=np.float32), AugmentDraw(brightness=0.06))
    np.testing.assert_allclose(out, 0.56, rtol=1e-6)


def test_photometric_clips_to_unit_range():
    out = photometric(np.full((4, 4, 3), 0.99, dtype=np.float32), AugmentDraw(brightness=0.06))
    assert out.max() == 1.0


def test_contrast_and_saturation_keep_means():
    img = _sample(seed=3).image * 0.5 + 0.25
    out = photometric(img, AugmentDraw(contrast=1.1))
    np.testing.assert_allclose(out.mean(axis=(0, 1)), img.mean(axis=(0, 1)), atol=1e-5)
    out = photometric(img, AugmentDraw(saturation=0.9))
    np.testing.assert_allclose(out.mean(axis=-1), img.mean(axis=-1), atol=1e-5)


def test_noise_needs_rng():
    with pytest.raises(ValueError, match="rng"):
        photometric(_sample().image, AugmentDraw(noise_sigma=0.01))


@pytest.mark.parametrize("k", [0, 1, 2, 3])
def test_geometry_commutes_with_masking(k):
    s = _sample(seed=k)
    draw = AugmentDraw(rotation_k=k, hflip=bool(k % 2), vflip=k > 1)
    out = augment(s, draw)
    np.testing.assert_array_equal(apply_mask(out.image, out.mask), geometric(apply_mask(s.image, s.mask), draw))


def test_augmented_mask_stays_binary_and_keeps_area():
    s = Sample(_sample().image, central_mask(8, 0.25), 0, "x.png")
    spec = AugmentSpec()
    rng = np.random.default_rng(4)
    for _ in range(20):
        out = augment(s, draw_augment(spec, rng), rng)
        assert set(np.unique(out.mask)) <= {0.0, 1.0}
        assert out.mask.sum() == s.mask.sum()
        assert out.label == s.label and out.source_path == s.source_path
        assert 0.0 <= out.image.min() and out.image.max() <= 1.0


def test_draws_stay_inside_spec_ranges():
    spec = AugmentSpec()
    rng = np.random.default_rng(5)
    for _ in range(200):
        d = draw_augment(spec, rng)
        assert d.rotation_k in spec.rotation_ks
        assert abs(d.brightness) <= spec.brightness_delta
        assert spec.contrast_range[0] <= d.contrast <= spec.contrast_range[1]
        assert spec.saturation_range[0] <= d.saturation <= spec.saturation_range[1]
        assert 0.0 <= d.noise_sigma <= spec.noise_sigma_max


def test_draws_are_reproducible():
    a = draw_augment(AugmentSpec(), np.random.default_rng(9))
    b = draw_augment(AugmentSpec(), np.random.default_rng(9))
    assert a == b
