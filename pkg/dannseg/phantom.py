import logging
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from dannseg.error import DannSegError, ErrorCode
from dannseg.util import is_valid_domain_id, validate_spacing

logger = logging.getLogger(__name__)

BACKGROUND, LV, MYO, RV = 0, 1, 2, 3
CLASS_NAMES = {LV: "lv", MYO: "myo", RV: "rv"}
SPLITS = ("train", "val", "test")

MIN_PHANTOM_SIZE = 32


class Sample:
    """One 2-D image with an optional label mask and its acquisition metadata."""

    def __init__(
        self,
        sample_id: str,
        image: np.ndarray,
        mask: Optional[np.ndarray],
        domain_id: str,
        pixel_spacing: Tuple[float, float],
        split: str = "train",
    ):
        if not is_valid_domain_id(domain_id):
            raise DannSegError(ErrorCode.MALFORMED_DATASET, f"invalid domain id {domain_id!r} for sample {sample_id}")
        if split not in SPLITS:
            raise DannSegError(ErrorCode.MALFORMED_DATASET, f"invalid split {split!r} for sample {sample_id}")
        if mask is not None and mask.shape != image.shape:
            raise DannSegError(
                ErrorCode.SHAPE_MISMATCH,
                f"sample {sample_id}: mask {mask.shape} does not match image {image.shape}",
            )
        self.sample_id = sample_id
        self.image = np.asarray(image, dtype=np.float32)
        self.mask = None if mask is None else np.asarray(mask, dtype=np.uint8)
        self.domain_id = domain_id
        self.pixel_spacing = (float(pixel_spacing[0]), float(pixel_spacing[1]))
        self.split = split

    @property
    def has_mask(self) -> bool:
        return self.mask is not None

    @property
    def shape(self) -> Tuple[int, int]:
        return self.image.shape

    def replace(self, image=None, mask=None, pixel_spacing=None, keep_mask=True) -> "Sample":
        return Sample(
            self.sample_id,
            self.image if image is None else image,
            (self.mask if mask is None else mask) if keep_mask else None,
            self.domain_id,
            self.pixel_spacing if pixel_spacing is None else pixel_spacing,
            self.split,
        )

    def __repr__(self):
        return (
            f"Sample({self.sample_id}, domain={self.domain_id}, split={self.split}, "
            f"shape={self.shape}, spacing={self.pixel_spacing}, mask={self.has_mask})"
        )

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return False
        masks_equal = (
            (self.mask is None and other.mask is None)
            or (self.mask is not None and other.mask is not None and np.array_equal(self.mask, other.mask))
        )
        return (
            self.sample_id == other.sample_id
            and self.domain_id == other.domain_id
            and self.split == other.split
            and self.pixel_spacing == other.pixel_spacing
            and self.image.dtype == other.image.dtype
            and np.array_equal(self.image, other.image)
            and masks_equal
        )


@dataclass
class DomainStyle:
    """Scanner-like appearance: signal gain, contrast gamma, noise, smooth bias field and spacing."""

    gain: float = 1.0
    gamma: float = 1.0
    noise_sigma: float = 0.02
    bias_amplitude: float = 0.1
    bias_smoothness: float = 0.3
    spacing_mm: float = 1.25

    def validate(self) -> None:
        if self.gain <= 0 or self.gamma <= 0 or self.noise_sigma < 0:
            raise DannSegError(ErrorCode.INVALID_CONFIG, f"invalid domain style {self.to_dict()}")
        valid, message = validate_spacing((self.spacing_mm, self.spacing_mm))
        if not valid:
            raise DannSegError(ErrorCode.INVALID_SPACING, message)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DomainStyle":
        return cls(**data)


def _render_geometry(rng: np.random.Generator, size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Label mask plus a smooth anatomical intensity template, both in pixel units."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    r_lv = rng.uniform(0.11, 0.16) * size
    thickness = max(1.6, rng.uniform(0.05, 0.08) * size)
    r_outer = r_lv + thickness
    margin = r_outer * 2.3
    cy = rng.uniform(margin, size - margin) if size - 2 * margin > 0 else size / 2
    cx = rng.uniform(margin, size - margin) if size - 2 * margin > 0 else size / 2

    angle = rng.uniform(0.75 * np.pi, 1.25 * np.pi)
    offset = r_outer * rng.uniform(0.85, 1.05)
    r_rv = r_outer * rng.uniform(0.95, 1.15)
    ry, rx = cy + offset * np.sin(angle), cx + offset * np.cos(angle)

    d_lv = np.hypot(yy - cy, xx - cx)
    d_rv = np.hypot(yy - ry, xx - rx)

    mask = np.zeros((size, size), dtype=np.uint8)
    mask[(d_rv <= r_rv) & (d_lv > r_outer)] = RV
    mask[(d_lv > r_lv) & (d_lv <= r_outer)] = MYO
    mask[d_lv <= r_lv] = LV

    body = ((yy - size / 2) / (0.46 * size)) ** 2 + ((xx - size / 2) / (0.42 * size)) ** 2 <= 1.0
    template = np.where(body, 0.45, 0.05)
    template = template + 0.08 * gaussian_filter(rng.standard_normal((size, size)), sigma=size / 16)
    template[mask == MYO] = 0.25
    template[mask == LV] = 0.9
    template[mask == RV] = 0.82
    return mask, template


def _apply_style(rng: np.random.Generator, template: np.ndarray, style: DomainStyle) -> np.ndarray:
    size = template.shape[0]
    image = np.clip(template, 0.0, None) ** style.gamma * style.gain

    field = gaussian_filter(rng.standard_normal(template.shape), sigma=max(style.bias_smoothness * size, 1e-3))
    spread = np.abs(field).max()
    field = field / spread if spread > 0 else field
    image = image * (1.0 + style.bias_amplitude * field)

    image = image + rng.standard_normal(template.shape) * style.noise_sigma
    return np.clip(image, 0.0, 1.0)


def generate_phantom(
    seed: int,
    style: DomainStyle,
    size: int,
    sample_id: Optional[str] = None,
    domain_id: str = "A",
    split: str = "train",
) -> Sample:
    """
    Render a heart-like phantom: LV disk, concentric myocardial annulus and an RV crescent
    abutting the annulus, with pose and scale drawn from `seed`.

    The mask depends on `seed` and `size` only; the style acts on intensities alone.
    """
    if size < MIN_PHANTOM_SIZE:
        raise DannSegError(ErrorCode.INVALID_CONFIG, f"phantom size must be >= {MIN_PHANTOM_SIZE}, got {size}")
    style.validate()
    geometry_rng = np.random.default_rng([seed, 0])
    intensity_rng = np.random.default_rng([seed, 1])

    mask, template = _render_geometry(geometry_rng, size)
    image = _apply_style(intensity_rng, template, style).astype(np.float32)
    return Sample(
        sample_id or f"{domain_id}_{seed}",
        image,
        mask,
        domain_id,
        (style.spacing_mm, style.spacing_mm),
        split,
    )
