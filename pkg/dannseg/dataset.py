"""
Synthetic multi-domain dataset: domain specs, generation and the on-disk layout.

A dataset directory holds `manifest.json` plus `<id>.img` (little-endian float32, row-major)
and, for labelled samples, `<id>.msk` (uint8 labels).
"""
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from dannseg.error import DannSegError, ErrorCode
from dannseg.phantom import SPLITS, DomainStyle, Sample, generate_phantom
from dannseg.util import derive_seed, is_valid_domain_id, is_valid_sample_id, round_half_up

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
IMAGE_DTYPE = np.dtype("<f4")
MASK_DTYPE = np.dtype("u1")


@dataclass
class DomainSpec:
    """
    One simulated scanner. `splits` gives the fraction of samples per split; samples in
    `labelled_splits` keep their masks, the rest are stored unlabelled.
    """

    domain_id: str
    style: DomainStyle
    n_samples: int
    size: int
    splits: Dict[str, float] = field(default_factory=lambda: {"train": 0.7, "val": 0.15, "test": 0.15})
    labelled_splits: Tuple[str, ...] = SPLITS

    def validate(self) -> None:
        if not is_valid_domain_id(self.domain_id):
            raise DannSegError(ErrorCode.INVALID_CONFIG, f"invalid domain id {self.domain_id!r}")
        if self.n_samples < 1:
            raise DannSegError(ErrorCode.INVALID_CONFIG, f"domain {self.domain_id} needs at least one sample")
        if set(self.splits) - set(SPLITS) or abs(sum(self.splits.values()) - 1.0) > 1e-9:
            raise DannSegError(ErrorCode.INVALID_CONFIG, f"domain {self.domain_id} split fractions {self.splits} must sum to 1")
        self.style.validate()

    @property
    def labelled(self) -> bool:
        return "train" in self.labelled_splits

    def to_dict(self) -> dict:
        return {
            "domain_id": self.domain_id,
            "style": self.style.to_dict(),
            "n_samples": self.n_samples,
            "size": self.size,
            "splits": dict(self.splits),
            "labelled_splits": list(self.labelled_splits),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DomainSpec":
        return cls(
            domain_id=data["domain_id"],
            style=DomainStyle.from_dict(data["style"]),
            n_samples=data["n_samples"],
            size=data["size"],
            splits=dict(data["splits"]),
            labelled_splits=tuple(data["labelled_splits"]),
        )


def native_size(crop_size: int, spacing_mm: float, target_spacing_mm: float = 1.25, margin: float = 1.1) -> int:
    """Pixel count whose physical extent covers the crop window with some margin."""
    return max(32, round_half_up(crop_size * target_spacing_mm * margin / spacing_mm))


def default_domain_specs(n_per_domain: int = 40, crop_size: int = 192,
                         target_spacing_mm: float = 1.25) -> List[DomainSpec]:
    """
    Four domains: A and B labelled, C unlabelled for training with a labelled held-out split,
    D held out entirely for testing.
    """
    styles = {
        "A": DomainStyle(gain=1.0, gamma=1.0, noise_sigma=0.02, bias_amplitude=0.10, bias_smoothness=0.30, spacing_mm=1.25),
        "B": DomainStyle(gain=0.8, gamma=1.4, noise_sigma=0.04, bias_amplitude=0.20, bias_smoothness=0.25, spacing_mm=1.4),
        "C": DomainStyle(gain=0.9, gamma=0.7, noise_sigma=0.03, bias_amplitude=0.15, bias_smoothness=0.35, spacing_mm=1.1),
        "D": DomainStyle(gain=0.7, gamma=1.8, noise_sigma=0.06, bias_amplitude=0.25, bias_smoothness=0.20, spacing_mm=1.5),
    }
    sizes = {d: native_size(crop_size, s.spacing_mm, target_spacing_mm) for d, s in styles.items()}
    return [
        DomainSpec("A", styles["A"], n_per_domain, sizes["A"]),
        DomainSpec("B", styles["B"], n_per_domain, sizes["B"]),
        DomainSpec("C", styles["C"], n_per_domain, sizes["C"], splits={"train": 0.8, "test": 0.2}, labelled_splits=("test",)),
        DomainSpec("D", styles["D"], n_per_domain, sizes["D"], splits={"test": 1.0}, labelled_splits=("test",)),
    ]


class Dataset:
    def __init__(self, samples: List[Sample], domains: Optional[List[DomainSpec]] = None, seed: Optional[int] = None):
        ids = [s.sample_id for s in samples]
        if len(set(ids)) != len(ids):
            raise DannSegError(ErrorCode.MALFORMED_DATASET, "dataset contains duplicate sample ids")
        self.samples = samples
        self.domains = domains or []
        self.seed = seed

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __eq__(self, other):
        return isinstance(other, Dataset) and self.samples == other.samples

    def select(self, split: Optional[str] = None, domain_id: Optional[str] = None,
               labelled: Optional[bool] = None) -> List[Sample]:
        return [
            s for s in self.samples
            if (split is None or s.split == split)
            and (domain_id is None or s.domain_id == domain_id)
            and (labelled is None or s.has_mask == labelled)
        ]

    def domain_ids(self, split: Optional[str] = None) -> List[str]:
        return sorted({s.domain_id for s in self.samples if split is None or s.split == split})

    def summary(self) -> Dict[str, Dict[str, int]]:
        counts: Dict[str, Dict[str, int]] = {}
        for s in self.samples:
            key = f"{s.split}/{'labelled' if s.has_mask else 'unlabelled'}"
            counts.setdefault(s.domain_id, {}).setdefault(key, 0)
            counts[s.domain_id][key] += 1
        return counts


def _split_assignment(n: int, fractions: Dict[str, float], rng: np.random.Generator) -> List[str]:
    names = [s for s in SPLITS if fractions.get(s, 0) > 0]
    counts = [round_half_up(n * fractions[s]) for s in names]
    counts[-1] = n - sum(counts[:-1])
    if counts[-1] < 0:
        counts[-2] += counts[-1]
        counts[-1] = 0
    labels = [name for name, count in zip(names, counts) for _ in range(count)]
    return [labels[i] for i in rng.permutation(n)]


def generate_dataset(specs: Sequence[DomainSpec], seed: int) -> Dataset:
    samples = []
    for index, spec in enumerate(specs):
        spec.validate()
        rng = np.random.default_rng([seed, index])
        splits = _split_assignment(spec.n_samples, spec.splits, rng)
        for i in range(spec.n_samples):
            sample = generate_phantom(
                derive_seed(seed, index, i),
                spec.style,
                spec.size,
                sample_id=f"{spec.domain_id}_{i:04d}",
                domain_id=spec.domain_id,
                split=splits[i],
            )
            if sample.split not in spec.labelled_splits:
                sample = sample.replace(keep_mask=False)
            samples.append(sample)
        logger.info(f"Generated domain {spec.domain_id}: {spec.n_samples} samples, size={spec.size}, "
                    f"spacing={spec.style.spacing_mm}mm")
    return Dataset(samples, list(specs), seed)


def _manifest_entry(sample: Sample) -> dict:
    return {
        "id": sample.sample_id,
        "domain_id": sample.domain_id,
        "split": sample.split,
        "spacing": list(sample.pixel_spacing),
        "shape": list(sample.shape),
        "has_mask": sample.has_mask,
    }


def write_dataset(directory: str, dataset: Dataset, force: bool = False) -> str:
    if os.path.exists(os.path.join(directory, MANIFEST_NAME)) and not force:
        raise DannSegError(ErrorCode.OUTPUT_EXISTS, f"{directory} already holds a dataset; pass --force to overwrite")
    os.makedirs(directory, exist_ok=True)

    for sample in dataset:
        with open(os.path.join(directory, f"{sample.sample_id}.img"), "wb") as f:
            f.write(np.ascontiguousarray(sample.image, dtype=IMAGE_DTYPE).tobytes())
        mask_path = os.path.join(directory, f"{sample.sample_id}.msk")
        if sample.has_mask:
            with open(mask_path, "wb") as f:
                f.write(np.ascontiguousarray(sample.mask, dtype=MASK_DTYPE).tobytes())
        elif os.path.exists(mask_path):
            os.remove(mask_path)

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": dataset.seed,
        "domains": [spec.to_dict() for spec in dataset.domains],
        "samples": [_manifest_entry(s) for s in dataset],
    }
    with open(os.path.join(directory, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=2)
    logger.info(f"Wrote {len(dataset)} samples to {directory}")
    return directory


def _read_array(path: str, dtype: np.dtype, shape: Tuple[int, int], sample_id: str, kind: str) -> np.ndarray:
    if not os.path.exists(path):
        raise DannSegError(ErrorCode.MALFORMED_DATASET, f"sample {sample_id}: missing {kind} file {path}")
    with open(path, "rb") as f:
        raw = f.read()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) != expected:
        raise DannSegError(
            ErrorCode.MALFORMED_DATASET,
            f"sample {sample_id}: {kind} file has {len(raw)} bytes, expected {expected} for shape {tuple(shape)}",
        )
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def _parse_entry(entry: dict) -> Tuple[str, str, str, Tuple[float, float], Tuple[int, int], bool]:
    try:
        sample_id = entry["id"]
        shape = tuple(int(n) for n in entry["shape"])
        spacing = tuple(float(s) for s in entry["spacing"])
        return sample_id, entry["domain_id"], entry["split"], spacing, shape, bool(entry["has_mask"])
    except (KeyError, TypeError, ValueError) as e:
        raise DannSegError(ErrorCode.MALFORMED_DATASET, f"malformed manifest entry {entry!r}: {e}")


def read_dataset(directory: str) -> Dataset:
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise DannSegError(ErrorCode.MALFORMED_DATASET, f"no {MANIFEST_NAME} in {directory}")
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise DannSegError(ErrorCode.MALFORMED_DATASET, f"malformed manifest in {directory}: {e}")
    if not isinstance(manifest, dict) or manifest.get("schema_version") != SCHEMA_VERSION:
        raise DannSegError(ErrorCode.MALFORMED_DATASET, f"unsupported manifest schema in {directory}")

    samples = []
    for entry in manifest.get("samples", []):
        sample_id, domain_id, split, spacing, shape, has_mask = _parse_entry(entry)
        if not is_valid_sample_id(sample_id):
            raise DannSegError(ErrorCode.MALFORMED_DATASET, f"invalid sample id {sample_id!r}")
        if len(shape) != 2:
            raise DannSegError(ErrorCode.MALFORMED_DATASET, f"sample {sample_id}: shape must be 2-D, got {shape}")
        image = _read_array(os.path.join(directory, f"{sample_id}.img"), IMAGE_DTYPE, shape, sample_id, "image")
        mask = None
        if has_mask:
            mask = _read_array(os.path.join(directory, f"{sample_id}.msk"), MASK_DTYPE, shape, sample_id, "mask")
        samples.append(Sample(sample_id, image.astype(np.float32), mask, domain_id, spacing, split))

    on_disk = [name for name in os.listdir(directory) if name.endswith(".img")]
    if len(on_disk) != len(samples):
        raise DannSegError(
            ErrorCode.MALFORMED_DATASET,
            f"manifest lists {len(samples)} samples but {directory} holds {len(on_disk)} image files",
        )

    domains = [DomainSpec.from_dict(d) for d in manifest.get("domains", [])]
    logger.info(f"Read {len(samples)} samples from {directory}")
    return Dataset(samples, domains, manifest.get("seed"))
