import logging
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import cv2
import numpy as np
from scipy.ndimage import map_coordinates

from dannseg.error import DannSegError, ErrorCode
from dannseg.phantom import Sample
from dannseg.util import round_half_up, validate_spacing

logger = logging.getLogger(__name__)

TARGET_SPACING_MM = 1.25
CLAHE_LEVELS = 255


@dataclass
class PreprocessConfig:
    target_spacing_mm: float = TARGET_SPACING_MM
    crop_size: int = 192
    clahe_tiles: int = 8
    clahe_clip_limit: float = 2.0
    use_clahe: bool = True

    def validate(self) -> None:
        valid, message = validate_spacing((self.target_spacing_mm, self.target_spacing_mm))
        if not valid:
            raise DannSegError(ErrorCode.INVALID_SPACING, message)
        if self.crop_size < 1 or self.clahe_tiles < 1 or self.clahe_clip_limit <= 0:
            raise DannSegError(ErrorCode.INVALID_CONFIG, f"invalid preprocessing config {self.to_dict()}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PreprocessConfig":
        return cls(**data)


def _sample_grid(shape_out: Tuple[int, int], ratios: Tuple[float, float]) -> np.ndarray:
    # Pixel centres of the output grid expressed in input pixel coordinates.
    axes = [
        (np.arange(n_out, dtype=np.float64) + 0.5) * ratio - 0.5
        for n_out, ratio in zip(shape_out, ratios)
    ]
    rows, cols = np.meshgrid(axes[0], axes[1], indexing="ij")
    return np.stack([rows, cols])


def resample(
    image: np.ndarray,
    mask: Optional[np.ndarray],
    from_spacing: Tuple[float, float],
    to_spacing: float = TARGET_SPACING_MM,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Resample an image (bilinear) and its mask (nearest neighbour) to an isotropic spacing.

    Each output axis has round_half_up(n * from / to) pixels so the physical extent is kept.

    Returns:
        tuple: (image, mask) on the new grid; mask is None when none was given
    """
    for spacing in (from_spacing, (to_spacing, to_spacing)):
        valid, message = validate_spacing(spacing)
        if not valid:
            raise DannSegError(ErrorCode.INVALID_SPACING, message)

    if all(float(s) == float(to_spacing) for s in from_spacing):
        return image.copy(), None if mask is None else mask.copy()

    shape_out = tuple(max(1, round_half_up(n * s / to_spacing)) for n, s in zip(image.shape, from_spacing))
    ratios = tuple(n_in / n_out for n_in, n_out in zip(image.shape, shape_out))
    grid = _sample_grid(shape_out, ratios)

    resampled = map_coordinates(image.astype(np.float64), grid, order=1, mode="nearest").astype(image.dtype)
    resampled_mask = None
    if mask is not None:
        resampled_mask = map_coordinates(mask, grid, order=0, mode="nearest").astype(mask.dtype)
    return resampled, resampled_mask


def resample_sample(sample: Sample, to_spacing: float = TARGET_SPACING_MM) -> Sample:
    image, mask = resample(sample.image, sample.mask, sample.pixel_spacing, to_spacing)
    return sample.replace(image=image, mask=mask, pixel_spacing=(to_spacing, to_spacing), keep_mask=sample.has_mask)


def _crop_or_pad_axis(array: np.ndarray, axis: int, target: int) -> np.ndarray:
    size = array.shape[axis]
    if size > target:
        start = (size - target) // 2
        return np.take(array, np.arange(start, start + target), axis=axis)
    if size < target:
        before = (target - size) // 2
        widths = [(0, 0)] * array.ndim
        widths[axis] = (before, target - size - before)
        return np.pad(array, widths, mode="constant", constant_values=0)
    return array


def crop_or_pad_array(array: np.ndarray, target: int) -> np.ndarray:
    out = array
    for axis in (0, 1):
        out = _crop_or_pad_axis(out, axis, target)
    return out


def crop_or_pad(sample: Sample, target: int = 192) -> Sample:
    """Centre-crop or symmetrically zero-pad a sample to target x target; the mask pads with background."""
    image = crop_or_pad_array(sample.image, target)
    mask = None if sample.mask is None else crop_or_pad_array(sample.mask, target)
    return sample.replace(image=image, mask=mask, keep_mask=sample.has_mask)


def normalize(image: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant image becomes all zeros."""
    low, high = float(image.min()), float(image.max())
    if high <= low:
        return np.zeros_like(image, dtype=np.float32)
    return ((image.astype(np.float64) - low) / (high - low)).astype(np.float32)


def clahe(image: np.ndarray, tiles: int = 8, clip_limit: float = 2.0) -> np.ndarray:
    """
    Contrast limited adaptive histogram equalisation of a [0, 1] image.

    The image is quantised to 8 bits for OpenCV and mapped back to [0, 1]; tile mappings are
    blended bilinearly by OpenCV.
    """
    if image.ndim != 2:
        raise DannSegError(ErrorCode.SHAPE_MISMATCH, f"clahe expects a 2-D image, got shape {image.shape}")
    if tiles < 1 or clip_limit <= 0:
        raise DannSegError(ErrorCode.INVALID_CONFIG, f"clahe needs tiles >= 1 and clip_limit > 0, got {tiles}, {clip_limit}")
    if float(image.min()) == float(image.max()):
        logger.warning(f"clahe on a constant image of shape {image.shape}")

    quantised = np.round(np.clip(image, 0.0, 1.0) * CLAHE_LEVELS).astype(np.uint8)
    equaliser = cv2.createCLAHE(clipLimit=float(clip_limit), tileGridSize=(int(tiles), int(tiles)))
    equalised = equaliser.apply(quantised)
    return (equalised.astype(np.float32) / CLAHE_LEVELS).clip(0.0, 1.0)


def prepare_sample(sample: Sample, config: PreprocessConfig, crop: bool = True) -> Sample:
    """
    Resample to the target spacing, crop or pad (unless `crop` is False) and normalise to [0, 1].
    Augmentation and CLAHE come afterwards.
    """
    out = resample_sample(sample, config.target_spacing_mm)
    if crop:
        out = crop_or_pad(out, config.crop_size)
    return out.replace(image=normalize(out.image))


def finalize_image(image: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    if not config.use_clahe:
        return image.astype(np.float32)
    return clahe(image, config.clahe_tiles, config.clahe_clip_limit)


def preprocess_sample(sample: Sample, config: PreprocessConfig, crop: bool = True) -> Sample:
    """Full chain without augmentation: resample, crop/pad, normalise, CLAHE."""
    prepared = prepare_sample(sample, config, crop=crop)
    return prepared.replace(image=finalize_image(prepared.image, config))
