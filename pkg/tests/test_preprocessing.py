import numpy as np
import pytest

from dannseg.error import DannSegError, ErrorCode
from dannseg.phantom import DomainStyle, Sample, generate_phantom
from dannseg.preprocessing import (
    PreprocessConfig,
    clahe,
    crop_or_pad,
    crop_or_pad_array,
    normalize,
    preprocess_sample,
    resample,
)


def test_resample_keeps_physical_extent(rng):
    image = rng.uniform(size=(32, 40)).astype(np.float32)
    mask = rng.integers(0, 4, size=(32, 40)).astype(np.uint8)
    out, out_mask = resample(image, mask, (2.5, 2.5), 1.25)
    assert out.shape == (64, 80)
    assert out_mask.shape == (64, 80)
    assert set(np.unique(out_mask)) <= set(np.unique(mask))
    assert out.dtype == np.float32


def test_resample_output_size_per_axis(rng):
    out, _ = resample(rng.uniform(size=(10, 10)), None, (1.375, 1.0), 1.25)
    assert out.shape == (11, 8)


def test_resample_identity_copies(rng):
    image = rng.uniform(size=(8, 8))
    out, mask = resample(image, None, (1.25, 1.25), 1.25)
    np.testing.assert_array_equal(out, image)
    assert out is not image
    assert mask is None


def test_resample_keeps_constant_images_constant():
    out, _ = resample(np.full((12, 12), 0.3), None, (1.1, 1.1), 1.25)
    np.testing.assert_allclose(out, 0.3)


@pytest.mark.parametrize("spacing", [(0.0, 1.0), (-1.0, 1.0), (float("nan"), 1.0), (float("inf"), 1.0)])
def test_resample_rejects_bad_spacing(spacing):
    with pytest.raises(DannSegError) as info:
        resample(np.zeros((4, 4)), None, spacing, 1.25)
    assert info.value.code == ErrorCode.INVALID_SPACING


def test_centre_crop():
    image = np.arange(256 * 256, dtype=np.float32).reshape(256, 256)
    out = crop_or_pad_array(image, 192)
    assert out.shape == (192, 192)
    assert out[0, 0] == image[32, 32]


def test_symmetric_zero_pad():
    sample = Sample("s", np.ones((100, 100)), np.ones((100, 100), dtype=np.uint8), "A", (1.25, 1.25))
    out = crop_or_pad(sample, 192)
    assert out.shape == (192, 192)
    assert out.image[:46].sum() == 0 and out.image[146:].sum() == 0
    assert out.image[46:146, 46:146].min() == 1.0
    assert out.mask.sum() == 100 * 100


def test_odd_padding_puts_extra_pixel_after():
    out = crop_or_pad_array(np.ones((5, 5)), 8)
    np.testing.assert_array_equal(out[:, 3], [0, 1, 1, 1, 1, 1, 0, 0])


def test_normalize():
    np.testing.assert_allclose(normalize(np.array([[2.0, 4.0], [3.0, 6.0]])), [[0.0, 0.5], [0.25, 1.0]])
    np.testing.assert_array_equal(normalize(np.full((3, 3), 7.0)), np.zeros((3, 3)))


def test_clahe_range_and_constant():
    ramp = np.tile(np.linspace(0.2, 0.6, 32), (32, 1))
    out = clahe(ramp, tiles=4)
    assert out.dtype == np.float32
    assert out.min() >= 0.0 and out.max() <= 1.0
    flat = clahe(np.full((16, 16), 0.5), tiles=2)
    assert np.ptp(flat) == 0.0


def test_clahe_single_tile_is_monotone():
    ramp = np.tile(np.linspace(0.0, 1.0, 64), (16, 1))
    out = clahe(ramp, tiles=1)
    assert np.all(np.diff(out[0]) >= 0)


def test_preprocess_chain(tiny_preprocess):
    sample = generate_phantom(0, DomainStyle(), 32)
    out = preprocess_sample(sample, tiny_preprocess)
    assert out.shape == (16, 16)
    assert out.pixel_spacing == (2.5, 2.5)
    assert out.mask.shape == (16, 16)
    assert out.image.min() >= 0.0 and out.image.max() <= 1.0


def test_preprocess_without_crop_keeps_resampled_size():
    config = PreprocessConfig(target_spacing_mm=1.25, crop_size=32, use_clahe=False)
    sample = generate_phantom(0, DomainStyle(spacing_mm=1.5), 40)
    out = preprocess_sample(sample, config, crop=False)
    assert out.shape == (48, 48)
