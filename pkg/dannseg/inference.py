import logging
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from sklearn.model_selection import train_test_split
from sklearn.preprocessing import StandardScaler

from dannseg.error import DannSegError, ErrorCode
from dannseg.metrics import MetricsReport, SampleMetrics
from dannseg.networks import NetworkParameters, unet_forward
from dannseg.phantom import Sample
from dannseg.preprocessing import PreprocessConfig, crop_or_pad_array, preprocess_sample

logger = logging.getLogger(__name__)

GRID_POSITIONS = 3
MIN_PROBE_SAMPLES = 10


@dataclass
class EvalConfig:
    split: str = "test"
    batch_size: int = 9
    probe_test_fraction: float = 0.3
    probe_epochs: int = 200
    probe_lr: float = 0.1
    probe_min_per_domain: int = MIN_PROBE_SAMPLES

    def validate(self) -> None:
        if not 0.0 < self.probe_test_fraction < 1.0 or self.probe_epochs < 1 or self.probe_lr <= 0:
            raise DannSegError(ErrorCode.INVALID_CONFIG, f"invalid evaluation config {self.to_dict()}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EvalConfig":
        return cls(**data)


def window_starts(size: int, window: int, positions: int = GRID_POSITIONS) -> List[int]:
    """Evenly spaced window origins; the first window touches the start, the last the end."""
    return sorted({int(round(s)) for s in np.linspace(0, size - window, positions)})


def _pad_to(image: np.ndarray, window: int) -> Tuple[np.ndarray, Tuple[slice, slice]]:
    pads, crop = [], []
    for size in image.shape:
        extra = max(0, window - size)
        before = extra // 2
        pads.append((before, extra - before))
        crop.append(slice(before, before + size))
    return np.pad(image, pads, mode="constant"), tuple(crop)


def sliding_window_predict(
    params: NetworkParameters,
    image: np.ndarray,
    window: Optional[int] = None,
    return_coverage: bool = False,
):
    """
    Class probabilities (K, H, W) for a 2-D image of any size.

    Axes shorter than the window are zero-padded and cropped back afterwards; longer axes are
    covered by a 3-position grid of window-sized patches whose probabilities are averaged.
    """
    if image.ndim != 2:
        raise DannSegError(ErrorCode.SHAPE_MISMATCH, f"expected a 2-D image, got shape {image.shape}")
    window = window or params.config.input_size
    padded, crop = _pad_to(image, window)
    h, w = padded.shape
    origins = [(r, c) for r in window_starts(h, window) for c in window_starts(w, window)]

    patches = np.stack([padded[r:r + window, c:c + window] for r, c in origins])[:, None]
    probs = unet_forward(params, patches.astype(params.dtype), mode="eval").probs.data

    total = np.zeros((probs.shape[1], h, w), dtype=np.float64)
    coverage = np.zeros((h, w), dtype=np.int64)
    for (r, c), patch_probs in zip(origins, probs):
        total[:, r:r + window, c:c + window] += patch_probs
        coverage[r:r + window, c:c + window] += 1
    averaged = (total / coverage).astype(params.dtype)[:, crop[0], crop[1]]
    if return_coverage:
        return averaged, coverage[crop[0], crop[1]]
    return averaged


def predict_mask(params: NetworkParameters, image: np.ndarray) -> np.ndarray:
    return np.argmax(sliding_window_predict(params, image), axis=0).astype(np.uint8)


def extract_embedding(params: NetworkParameters, image: np.ndarray) -> np.ndarray:
    """Per-channel mean then per-channel standard deviation of the bottleneck activations."""
    return extract_embeddings(params, [image])[0]


def extract_embeddings(params: NetworkParameters, images: Sequence[np.ndarray], batch_size: int = 16) -> np.ndarray:
    window = params.config.input_size
    rows = []
    for start in range(0, len(images), batch_size):
        chunk = np.stack([crop_or_pad_array(img, window) for img in images[start:start + batch_size]])[:, None]
        bottleneck = unet_forward(params, chunk.astype(params.dtype), mode="eval").taps["bottleneck"].data
        flat = bottleneck.reshape(bottleneck.shape[0], bottleneck.shape[1], -1).astype(np.float64)
        rows.append(np.concatenate([flat.mean(axis=2), flat.std(axis=2)], axis=1))
    if not rows:
        return np.zeros((0, 2 * params.config.bottleneck_channels))
    return np.concatenate(rows)


class ProbeResult:
    def __init__(self, accuracy: float, num_domains: int, n_train: int, n_test: int):
        self.accuracy = accuracy
        self.num_domains = num_domains
        self.chance = 1.0 / num_domains
        self.n_train = n_train
        self.n_test = n_test

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "chance": self.chance,
            "num_domains": self.num_domains,
            "n_train": self.n_train,
            "n_test": self.n_test,
        }

    def __repr__(self):
        return f"ProbeResult(accuracy={self.accuracy:.3f}, chance={self.chance:.3f})"


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def domain_probe(
    embeddings: np.ndarray,
    domains: Sequence[str],
    seed: int,
    test_fraction: float = 0.3,
    epochs: int = 200,
    lr: float = 0.1,
    min_per_domain: int = MIN_PROBE_SAMPLES,
) -> ProbeResult:
    """
    Multinomial logistic regression on standardised frozen embeddings, fitted by full-batch
    gradient descent from zero weights; returns the held-out accuracy.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels_text = np.asarray(domains)
    classes, labels = np.unique(labels_text, return_inverse=True)
    if len(classes) < 2:
        raise DannSegError(ErrorCode.INSUFFICIENT_SAMPLES, f"domain probe needs >= 2 domains, got {list(classes)}")
    counts = np.bincount(labels)
    if counts.min() < min_per_domain:
        raise DannSegError(
            ErrorCode.INSUFFICIENT_SAMPLES,
            f"domain probe needs >= {min_per_domain} samples per domain, got "
            f"{dict(zip(classes.tolist(), counts.tolist()))}",
        )

    x_train, x_test, y_train, y_test = train_test_split(
        embeddings, labels, test_size=test_fraction, random_state=seed, stratify=labels,
    )
    scaler = StandardScaler().fit(x_train)
    x_train, x_test = scaler.transform(x_train), scaler.transform(x_test)

    k = len(classes)
    weights = np.zeros((x_train.shape[1], k))
    bias = np.zeros(k)
    targets = np.eye(k)[y_train]
    for _ in range(epochs):
        residual = (_softmax_rows(x_train @ weights + bias) - targets) / len(x_train)
        weights -= lr * x_train.T @ residual
        bias -= lr * residual.sum(axis=0)

    predicted = np.argmax(x_test @ weights + bias, axis=1)
    accuracy = float(np.mean(predicted == y_test))
    logger.info(f"Domain probe accuracy={accuracy:.3f} (chance {1.0 / k:.3f}) on {len(y_test)} held-out samples")
    return ProbeResult(accuracy, k, len(y_train), len(y_test))


def evaluate(
    params: NetworkParameters,
    samples: Sequence[Sample],
    preprocess: PreprocessConfig,
    checkpoint: str = "",
) -> MetricsReport:
    """
    Segment labelled samples at native extent on the target grid and score them per class.

    Images are resampled, normalised and equalised without cropping, then predicted with the
    sliding window; metrics use the resampled mask and the target spacing.
    """
    rows = []
    for sample in samples:
        if not sample.has_mask:
            raise DannSegError(ErrorCode.UNLABELLED_SAMPLE, f"sample {sample.sample_id} has no mask to evaluate against")
        prepared = preprocess_sample(sample, preprocess, crop=False)
        predicted = predict_mask(params, prepared.image)
        rows.append(SampleMetrics.compute(
            sample.sample_id, sample.domain_id, predicted, prepared.mask, prepared.pixel_spacing,
        ))
    logger.info(f"Evaluated {len(rows)} samples")
    return MetricsReport(rows, checkpoint=checkpoint)
