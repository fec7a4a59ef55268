import logging
import math
from typing import Dict, List, Optional, Sequence

import numpy as np

from dannseg.augmentation import AugmentPolicy, augment
from dannseg.dataset import Dataset
from dannseg.error import DannSegError, ErrorCode
from dannseg.functional import one_hot
from dannseg.phantom import Sample
from dannseg.preprocessing import PreprocessConfig, finalize_image, prepare_sample
from dannseg.util import derive_seed

logger = logging.getLogger(__name__)

SEG_STREAM = 0
DISC_STREAM = 1
AUGMENT_STREAM = 2


class Batch:
    """
    Network-ready arrays for one optimisation step.

    Args:
        images: (N, 1, H, W)
        targets: one-hot (N, K, H, W), or None for discriminator batches
        domain_labels: (N,) integer domain indices
        sample_ids: ids of the samples, in batch order
    """

    def __init__(self, images: np.ndarray, targets: Optional[np.ndarray], domain_labels: np.ndarray,
                 sample_ids: List[str]):
        self.images = images
        self.targets = targets
        self.domain_labels = domain_labels
        self.sample_ids = sample_ids

    def __len__(self):
        return len(self.sample_ids)

    def domain_targets(self, num_domains: int, dtype) -> np.ndarray:
        return one_hot(self.domain_labels, num_domains, dtype=dtype)


def build_batch(samples: Sequence[Sample], domain_index: Dict[str, int], num_classes: int, dtype,
                labelled: bool) -> Batch:
    if not samples:
        raise DannSegError(ErrorCode.EMPTY_INPUT, "cannot build an empty batch")
    labels = []
    for sample in samples:
        if sample.domain_id not in domain_index:
            raise DannSegError(ErrorCode.UNKNOWN_DOMAIN, f"sample {sample.sample_id} has unknown domain {sample.domain_id!r}")
        if labelled and not sample.has_mask:
            raise DannSegError(ErrorCode.UNLABELLED_SAMPLE, f"sample {sample.sample_id} has no mask but is in a segmentation batch")
        labels.append(domain_index[sample.domain_id])

    images = np.stack([s.image for s in samples])[:, None].astype(dtype)
    targets = None
    if labelled:
        targets = one_hot(np.stack([s.mask for s in samples]).astype(np.int64), num_classes, dtype=dtype)
    return Batch(images, targets, np.asarray(labels, dtype=np.int64), [s.sample_id for s in samples])


class TrainingData:
    """
    Preprocessed training and validation pools with the deterministic batch streams.

    Every draw is a pure function of (seed, epoch, iteration): the segmentation stream, the
    discriminator stream and the per-sample augmentation seeds never share a generator.
    """

    def __init__(
        self,
        dataset: Dataset,
        preprocess: PreprocessConfig,
        policy: AugmentPolicy,
        num_classes: int,
        seed: int,
        dtype=np.float32,
        labelled_domains: Optional[Sequence[str]] = None,
    ):
        self.preprocess = preprocess
        self.policy = policy
        self.num_classes = num_classes
        self.seed = seed
        self.dtype = np.dtype(dtype)

        train = dataset.select(split="train")
        self.domain_ids = sorted({s.domain_id for s in train})
        self.domain_index = {d: i for i, d in enumerate(self.domain_ids)}

        labelled = [s for s in train if s.has_mask]
        if labelled_domains is not None:
            labelled = [s for s in labelled if s.domain_id in labelled_domains]
        self.labelled = [prepare_sample(s, preprocess) for s in labelled]
        self.by_domain: Dict[str, List[Sample]] = {
            d: [prepare_sample(s, preprocess) for s in train if s.domain_id == d] for d in self.domain_ids
        }
        self.validation = [
            s.replace(image=finalize_image(s.image, preprocess))
            for s in (prepare_sample(v, preprocess) for v in dataset.select(split="val", labelled=True))
        ]
        logger.info(
            f"Training pools: labelled={len(self.labelled)}, domains={self.domain_ids}, "
            f"validation={len(self.validation)}"
        )

    @property
    def num_domains(self) -> int:
        return len(self.domain_ids)

    @property
    def labelled_domain_ids(self) -> List[str]:
        return sorted({s.domain_id for s in self.labelled})

    def iterations_per_epoch(self, batch_size: int) -> int:
        return max(1, math.ceil(len(self.labelled) / batch_size))

    def _finish(self, sample: Sample, seed: int) -> Sample:
        augmented = augment(sample, seed, self.policy)
        return augmented.replace(image=finalize_image(augmented.image, self.preprocess))

    def seg_batches(self, epoch: int, batch_size: int) -> List[Batch]:
        """One pass over the labelled pool in a per-epoch shuffled order."""
        if not self.labelled:
            raise DannSegError(ErrorCode.INSUFFICIENT_SAMPLES, "no labelled training samples")
        rng = np.random.default_rng(derive_seed(self.seed, epoch, SEG_STREAM))
        order = rng.permutation(len(self.labelled))
        batches = []
        for iteration in range(self.iterations_per_epoch(batch_size)):
            chosen = order[iteration * batch_size:(iteration + 1) * batch_size]
            samples = [
                self._finish(self.labelled[i], derive_seed(self.seed, epoch, AUGMENT_STREAM, SEG_STREAM, iteration, k))
                for k, i in enumerate(chosen)
            ]
            batches.append(build_batch(samples, self.domain_index, self.num_classes, self.dtype, labelled=True))
        return batches

    def disc_batch(self, epoch: int, iteration: int, batch_size: int) -> Batch:
        """
        Domain-balanced batch over all training domains: ceil(batch_size / D) draws per
        domain, shuffled and trimmed to batch_size.
        """
        rng = np.random.default_rng(derive_seed(self.seed, epoch, DISC_STREAM, iteration))
        per_domain = math.ceil(batch_size / self.num_domains)
        picked: List[Sample] = []
        for domain in self.domain_ids:
            pool = self.by_domain[domain]
            replace = len(pool) < per_domain
            picked.extend(pool[i] for i in rng.choice(len(pool), size=per_domain, replace=replace))
        order = rng.permutation(len(picked))[:batch_size]
        samples = [
            self._finish(picked[i], derive_seed(self.seed, epoch, AUGMENT_STREAM, DISC_STREAM, iteration, k))
            for k, i in enumerate(order)
        ]
        return build_batch(samples, self.domain_index, self.num_classes, self.dtype, labelled=False)

    def validation_batches(self, batch_size: int) -> List[Batch]:
        return [
            build_batch(self.validation[i:i + batch_size], self.domain_index_all(), self.num_classes,
                        self.dtype, labelled=True)
            for i in range(0, len(self.validation), batch_size)
        ]

    def domain_index_all(self) -> Dict[str, int]:
        index = dict(self.domain_index)
        for sample in self.validation:
            index.setdefault(sample.domain_id, len(index))
        return index
