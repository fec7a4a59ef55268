import numpy as np
import pytest
from scipy.ndimage import binary_dilation

from dannseg.error import DannSegError, ErrorCode
from dannseg.phantom import LV, MYO, RV, DomainStyle, Sample, generate_phantom


@pytest.mark.parametrize("seed", range(10))
def test_classes_present_and_lv_enclosed(seed):
    sample = generate_phantom(seed, DomainStyle(), 32)
    mask = sample.mask
    for label in (LV, MYO, RV):
        assert (mask == label).mean() >= 0.01
    grown = binary_dilation(mask == LV)
    assert np.all(np.isin(mask[grown], (LV, MYO)))


def test_same_seed_same_sample():
    a = generate_phantom(5, DomainStyle(), 48, sample_id="x")
    b = generate_phantom(5, DomainStyle(), 48, sample_id="x")
    assert a == b
    assert generate_phantom(6, DomainStyle(), 48, sample_id="x") != a


def test_style_changes_intensities_not_labels():
    plain = generate_phantom(3, DomainStyle(), 32)
    styled = generate_phantom(3, DomainStyle(gain=0.7, gamma=1.5, noise_sigma=0.05, spacing_mm=1.5), 32)
    np.testing.assert_array_equal(plain.mask, styled.mask)
    assert not np.array_equal(plain.image, styled.image)
    assert styled.pixel_spacing == (1.5, 1.5)


def test_image_range_and_types():
    sample = generate_phantom(0, DomainStyle(gain=1.5), 32)
    assert sample.image.dtype == np.float32
    assert sample.mask.dtype == np.uint8
    assert sample.image.min() >= 0.0 and sample.image.max() <= 1.0


def test_minimum_size():
    with pytest.raises(DannSegError) as info:
        generate_phantom(0, DomainStyle(), 16)
    assert info.value.code == ErrorCode.INVALID_CONFIG


def test_invalid_style_spacing():
    with pytest.raises(DannSegError) as info:
        generate_phantom(0, DomainStyle(spacing_mm=0.0), 32)
    assert info.value.code == ErrorCode.INVALID_SPACING


def test_sample_validation():
    image = np.zeros((4, 4))
    with pytest.raises(DannSegError) as info:
        Sample("s", image, np.zeros((4, 5)), "A", (1.0, 1.0))
    assert info.value.code == ErrorCode.SHAPE_MISMATCH
    with pytest.raises(DannSegError) as info:
        Sample("s", image, None, "bad domain", (1.0, 1.0))
    assert info.value.code == ErrorCode.MALFORMED_DATASET
    with pytest.raises(DannSegError):
        Sample("s", image, None, "A", (1.0, 1.0), split="holdout")


def test_replace_can_drop_mask():
    sample = generate_phantom(0, DomainStyle(), 32)
    stripped = sample.replace(keep_mask=False)
    assert not stripped.has_mask
    assert sample.has_mask
