import numpy as np
import pytest

from dannseg.augmentation import AugmentPolicy, augment, sample_transform
from dannseg.error import DannSegError
from dannseg.phantom import DomainStyle, generate_phantom


@pytest.fixture
def sample():
    return generate_phantom(2, DomainStyle(), 48)


def test_identity_policy_changes_nothing(sample):
    out = augment(sample, seed=5, policy=AugmentPolicy.identity())
    assert out == sample


def test_same_seed_same_augmentation(sample):
    policy = AugmentPolicy(translation_px=3.0, warp_px=2.0)
    assert augment(sample, 9, policy) == augment(sample, 9, policy)
    assert augment(sample, 10, policy) != augment(sample, 9, policy)


@pytest.mark.parametrize("seed", range(5))
def test_labels_stay_within_input_labels(sample, seed):
    out = augment(sample, seed, AugmentPolicy(translation_px=4.0, warp_px=2.0))
    assert set(np.unique(out.mask)) <= set(np.unique(sample.mask))
    assert out.image.min() >= 0.0 and out.image.max() <= 1.0


def test_image_and_mask_share_one_transform(sample):
    policy = AugmentPolicy(noise_sigma=0.0, intensity_shift=0.0, warp_px=2.0)
    out = augment(sample, 4, policy)
    transform = sample_transform(4, policy, sample.shape)
    np.testing.assert_array_equal(out.mask, transform.apply_mask(sample.mask, policy.warp_px))
    np.testing.assert_array_equal(out.image, transform.apply_image(sample.image, policy.warp_px))
    labels_as_image = transform.apply_image((sample.mask == 1).astype(np.float32), policy.warp_px)
    assert np.mean((labels_as_image > 0.5) == (out.mask == 1)) > 0.97


def test_unlabelled_samples_stay_unlabelled(sample):
    out = augment(sample.replace(keep_mask=False), 1, AugmentPolicy())
    assert not out.has_mask


def test_policy_validation():
    with pytest.raises(DannSegError):
        AugmentPolicy(scale=1.0).validate()
    with pytest.raises(DannSegError):
        AugmentPolicy(noise_sigma=-0.1).validate()
