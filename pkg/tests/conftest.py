from typing import Callable, List

import numpy as np
import pytest

from dannseg.augmentation import AugmentPolicy
from dannseg.dataset import DomainSpec, generate_dataset
from dannseg.networks import DiscriminatorConfig, UNetConfig
from dannseg.phantom import DomainStyle
from dannseg.preprocessing import PreprocessConfig
from dannseg.tensor import Tape, Tensor
from dannseg.trainer import TrainerConfig


def numeric_gradient(loss_of: Callable[[], float], array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function with respect to every entry of `array` (mutated in place)."""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        index = it.multi_index
        original = array[index]
        array[index] = original + h
        plus = loss_of()
        array[index] = original - h
        minus = loss_of()
        array[index] = original
        grad[index] = (plus - minus) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(forward: Callable[[List[Tensor]], Tensor], arrays: List[np.ndarray], seed: int = 0,
                    tolerance: float = 1e-4) -> None:
    """
    Compare tape gradients with central differences for sum(forward(inputs) * weights), where the
    random weights keep the check from collapsing onto a plain sum.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    probe = forward([Tensor(a.copy()) for a in arrays])
    weights = np.random.default_rng(seed + 1000).normal(size=probe.shape)

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = (forward(tensors) * Tensor(weights)).sum()
    tape.backward(loss)

    for tensor, array in zip(tensors, arrays):
        def loss_of():
            values = [Tensor(t.data) for t in tensors]
            return float((forward(values).data * weights).sum())

        numeric = numeric_gradient(loss_of, array)
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(array)
        assert relative_error(analytic, numeric) < tolerance


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_unet_config():
    return UNetConfig(input_size=16, base_channels=2, depth=2, num_classes=4)


@pytest.fixture
def tiny_disc_config():
    return DiscriminatorConfig(conv_channels=(2, 4), fc_widths=(4,), num_domains=3)


@pytest.fixture
def tiny_preprocess():
    # 32 px phantoms at 1.25 mm become 16 px at 2.5 mm.
    return PreprocessConfig(target_spacing_mm=2.5, crop_size=16, clahe_tiles=2)


@pytest.fixture
def tiny_policy():
    return AugmentPolicy(scale=0.05, translation_px=1.0, rotation_deg=5.0, warp_px=0.5,
                         noise_sigma=0.01, intensity_shift=0.02)


def tiny_domain_specs(n: int = 10) -> List[DomainSpec]:
    split = {"train": 0.6, "val": 0.2, "test": 0.2}
    return [
        DomainSpec("A", DomainStyle(spacing_mm=1.25), n, 32, splits=dict(split)),
        DomainSpec("B", DomainStyle(gain=0.8, gamma=1.4, noise_sigma=0.04, spacing_mm=1.25), n, 32, splits=dict(split)),
        DomainSpec("C", DomainStyle(gain=0.9, gamma=0.7, spacing_mm=1.25), n, 32,
                   splits={"train": 0.8, "test": 0.2}, labelled_splits=("test",)),
    ]


@pytest.fixture
def tiny_dataset():
    return generate_dataset(tiny_domain_specs(), seed=7)


@pytest.fixture
def tiny_trainer_config():
    return TrainerConfig(
        phase_epochs=(1, 1, 2),
        alpha_ramp=2,
        seg_batch_size=4,
        disc_batch_size=6,
        precision="float64",
        plateau_window=1,
    )
