import logging
from dataclasses import asdict, dataclass
from typing import Tuple

import numpy as np
from scipy.ndimage import map_coordinates

from dannseg.error import DannSegError, ErrorCode
from dannseg.phantom import Sample

logger = logging.getLogger(__name__)


@dataclass
class AugmentPolicy:
    """
    Ranges of the stochastic augmentations.

    Args:
        scale: relative scale drawn from U(1 - scale, 1 + scale)
        translation_px: shift per axis drawn from U(-t, t)
        rotation_deg: rotation drawn from U(-r, r)
        warp_px: maximum B-spline displacement per axis
        warp_grid: control points per axis of the B-spline warp
        noise_sigma: Gaussian noise sigma drawn from U(0, noise_sigma)
        intensity_shift: additive shift drawn from U(-s, s)
    """

    scale: float = 0.1
    translation_px: float = 10.0
    rotation_deg: float = 15.0
    warp_px: float = 5.0
    warp_grid: int = 4
    noise_sigma: float = 0.05
    intensity_shift: float = 0.1

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(0.0, 0.0, 0.0, 0.0, 4, 0.0, 0.0)

    def validate(self) -> None:
        ranges = (self.scale, self.translation_px, self.rotation_deg, self.warp_px, self.noise_sigma, self.intensity_shift)
        if any(value < 0 for value in ranges) or self.scale >= 1 or self.warp_grid < 2:
            raise DannSegError(ErrorCode.INVALID_CONFIG, f"invalid augmentation policy {self.to_dict()}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "AugmentPolicy":
        return cls(**data)


class GeometricTransform:
    """One spatial transform, applied identically to an image and its mask."""

    def __init__(self, scale: float, angle_rad: float, translation: Tuple[float, float], control: np.ndarray):
        self.scale = scale
        self.angle_rad = angle_rad
        self.translation = translation
        self.control = control

    @property
    def is_identity(self) -> bool:
        return (
            self.scale == 1.0
            and self.angle_rad == 0.0
            and self.translation == (0.0, 0.0)
            and not np.any(self.control)
        )

    def coordinates(self, shape: Tuple[int, int], warp_px: float) -> np.ndarray:
        """Source coordinates (2, H, W) sampled by each output pixel."""
        h, w = shape
        rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        dy = rows - cy - self.translation[0]
        dx = cols - cx - self.translation[1]
        cos, sin = np.cos(self.angle_rad), np.sin(self.angle_rad)
        src_rows = cy + (cos * dy + sin * dx) / self.scale
        src_cols = cx + (-sin * dy + cos * dx) / self.scale

        if np.any(self.control):
            grid = self.control.shape[-1]
            grid_coords = np.stack([
                rows * (grid - 1) / max(h - 1, 1),
                cols * (grid - 1) / max(w - 1, 1),
            ])
            for axis, target in ((0, src_rows), (1, src_cols)):
                field = map_coordinates(self.control[axis], grid_coords, order=3, mode="nearest")
                target += np.clip(field, -warp_px, warp_px)
        return np.stack([src_rows, src_cols])

    def apply_image(self, image: np.ndarray, warp_px: float) -> np.ndarray:
        if self.is_identity:
            return image.copy()
        coords = self.coordinates(image.shape, warp_px)
        out = map_coordinates(image.astype(np.float64), coords, order=1, mode="constant", cval=0.0)
        return out.astype(image.dtype)

    def apply_mask(self, mask: np.ndarray, warp_px: float) -> np.ndarray:
        if self.is_identity:
            return mask.copy()
        coords = self.coordinates(mask.shape, warp_px)
        return map_coordinates(mask, coords, order=0, mode="constant", cval=0).astype(mask.dtype)


class _Draws:
    def __init__(self, transform: GeometricTransform, noise_sigma: float, shift: float, noise: np.ndarray):
        self.transform = transform
        self.noise_sigma = noise_sigma
        self.shift = shift
        self.noise = noise


def _draw(seed: int, policy: AugmentPolicy, shape: Tuple[int, int]) -> _Draws:
    # Fixed draw order keeps every draw independent of which ranges are zero.
    rng = np.random.default_rng(seed)
    scale = rng.uniform(1.0 - policy.scale, 1.0 + policy.scale)
    angle = np.deg2rad(rng.uniform(-policy.rotation_deg, policy.rotation_deg))
    translation = (
        float(rng.uniform(-policy.translation_px, policy.translation_px)),
        float(rng.uniform(-policy.translation_px, policy.translation_px)),
    )
    control = rng.uniform(-policy.warp_px, policy.warp_px, size=(2, policy.warp_grid, policy.warp_grid))
    noise_sigma = rng.uniform(0.0, policy.noise_sigma)
    shift = rng.uniform(-policy.intensity_shift, policy.intensity_shift)
    noise = rng.standard_normal(shape)
    transform = GeometricTransform(float(scale), float(angle), translation, control)
    return _Draws(transform, float(noise_sigma), float(shift), noise)


def sample_transform(seed: int, policy: AugmentPolicy, shape: Tuple[int, int]) -> GeometricTransform:
    return _draw(seed, policy, shape).transform


def augment(sample: Sample, seed: int, policy: AugmentPolicy) -> Sample:
    """
    Randomly scale, rotate, translate and B-spline warp a preprocessed sample, then add
    Gaussian noise and an intensity shift to the image and clamp it to [0, 1].

    The same geometric transform moves image (bilinear) and mask (nearest neighbour).
    """
    policy.validate()
    draws = _draw(seed, policy, sample.shape)

    image = draws.transform.apply_image(sample.image, policy.warp_px)
    mask = None if sample.mask is None else draws.transform.apply_mask(sample.mask, policy.warp_px)

    if draws.noise_sigma > 0 or draws.shift != 0:
        image = image.astype(np.float64) + draws.noise * draws.noise_sigma + draws.shift
        image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return sample.replace(image=image, mask=mask, keep_mask=sample.has_mask)
