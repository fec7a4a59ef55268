import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from dannseg.error import DannSegError, ErrorCode
from dannseg.functional import (
    RunningStats,
    batchnorm2d,
    concat,
    conv2d,
    dense,
    global_avg_pool2d,
    maxpool2d,
    relu,
    softmax,
    upsample_nearest2x,
)
from dannseg.tensor import Tensor
from dannseg.util import array_fingerprint

logger = logging.getLogger(__name__)

SEG_CONV = "seg-conv"
SEG_OTHER = "seg-other"
DISC = "disc"
PARTITIONS = (SEG_CONV, SEG_OTHER, DISC)

TAP_NAMES = ("penultimate", "bottleneck")


@dataclass
class UNetConfig:
    input_size: int = 192
    base_channels: int = 16
    depth: int = 4
    num_classes: int = 4
    kernel_size: int = 3
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    # Moves the batch-norm affine parameters into the adversarially updated partition.
    adversarial_batchnorm: bool = False

    def validate(self) -> None:
        if self.depth < 1 or self.base_channels < 1 or self.num_classes < 2:
            raise DannSegError(ErrorCode.INVALID_CONFIG, f"invalid U-Net config {self.to_dict()}")
        if self.input_size % (2 ** self.depth):
            raise DannSegError(
                ErrorCode.INVALID_CONFIG,
                f"input size {self.input_size} is not divisible by 2^{self.depth}",
            )
        if self.kernel_size % 2 == 0:
            raise DannSegError(ErrorCode.INVALID_CONFIG, "kernel size must be odd")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    @property
    def bottleneck_channels(self) -> int:
        return self.channels(self.depth)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "UNetConfig":
        return cls(**data)


@dataclass
class DiscriminatorConfig:
    conv_channels: Tuple[int, ...] = (16, 32, 64, 128)
    fc_widths: Tuple[int, ...] = (128, 64)
    num_domains: int = 3
    kernel_size: int = 3
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    # Input widths of the two branches; filled in by discriminator_for().
    tap_channels: Dict[str, int] = field(default_factory=dict)

    def validate(self) -> None:
        if self.num_domains < 2:
            raise DannSegError(ErrorCode.INVALID_CONFIG, f"discriminator needs >= 2 domains, got {self.num_domains}")
        if not self.conv_channels or self.kernel_size % 2 == 0:
            raise DannSegError(ErrorCode.INVALID_CONFIG, f"invalid discriminator config {self.to_dict()}")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["conv_channels"] = list(self.conv_channels)
        data["fc_widths"] = list(self.fc_widths)
        data["tap_channels"] = dict(self.tap_channels)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "DiscriminatorConfig":
        data = dict(data)
        data["conv_channels"] = tuple(data.get("conv_channels", cls.conv_channels))
        data["fc_widths"] = tuple(data.get("fc_widths", cls.fc_widths))
        data["tap_channels"] = dict(data.get("tap_channels", {}))
        return cls(**data)


NetworkConfig = Union[UNetConfig, DiscriminatorConfig]


class NetworkParameters:
    """
    Ordered name -> Tensor mapping for one network, with a partition label per tensor
    and the batch-norm running statistics that travel with the weights.
    """

    def __init__(self, config: NetworkConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.tensors: Dict[str, Tensor] = {}
        self.partitions: Dict[str, str] = {}
        self.running: Dict[str, RunningStats] = {}

    @property
    def network(self) -> str:
        return "segmenter" if isinstance(self.config, UNetConfig) else "discriminator"

    def add(self, name: str, data: np.ndarray, partition: str) -> Tensor:
        if partition not in PARTITIONS:
            raise DannSegError(ErrorCode.INVALID_CONFIG, f"unknown partition {partition!r}")
        if name in self.tensors:
            raise DannSegError(ErrorCode.INVALID_CONFIG, f"duplicate parameter name {name!r}")
        tensor = Tensor(np.asarray(data, dtype=self.dtype), requires_grad=True, dtype=self.dtype)
        self.tensors[name] = tensor
        self.partitions[name] = partition
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self, partition: Optional[str] = None) -> List[str]:
        return [n for n in self.tensors if partition is None or self.partitions[n] == partition]

    def items(self, partition: Optional[str] = None) -> List[Tuple[str, Tensor]]:
        return [(n, self.tensors[n]) for n in self.names(partition)]

    def zero_grad(self) -> None:
        for tensor in self.tensors.values():
            tensor.zero_grad()

    def fingerprint(self, partition: Optional[str] = None) -> Dict[str, str]:
        return {name: array_fingerprint(t.data) for name, t in self.items(partition)}

    def running_fingerprint(self) -> Dict[str, str]:
        return {
            name: array_fingerprint(np.concatenate([s.mean, s.var])) for name, s in self.running.items()
        }

    def copy(self) -> "NetworkParameters":
        clone = NetworkParameters(self.config, self.dtype)
        for name, tensor in self.tensors.items():
            clone.add(name, tensor.data.copy(), self.partitions[name])
        clone.running = {name: stats.copy() for name, stats in self.running.items()}
        return clone

    def count(self, partition: Optional[str] = None) -> int:
        return sum(t.size for _, t in self.items(partition))

    def __repr__(self):
        return f"NetworkParameters({self.network}, tensors={len(self)}, values={self.count()})"


def _he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _add_conv(params, rng, name, in_ch, out_ch, kernel, partition):
    params.add(f"{name}.weight", _he_normal(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel), partition)
    params.add(f"{name}.bias", np.zeros(out_ch), partition)


def _add_bn(params, name, channels, partition):
    params.add(f"{name}.gamma", np.ones(channels), partition)
    params.add(f"{name}.beta", np.zeros(channels), partition)
    params.running[name] = RunningStats.initial(channels, params.dtype)


def _add_conv_block(params, rng, prefix, in_ch, out_ch, config: UNetConfig):
    bn_partition = SEG_CONV if config.adversarial_batchnorm else SEG_OTHER
    _add_conv(params, rng, f"{prefix}.conv1", in_ch, out_ch, config.kernel_size, SEG_CONV)
    _add_bn(params, f"{prefix}.bn1", out_ch, bn_partition)
    _add_conv(params, rng, f"{prefix}.conv2", out_ch, out_ch, config.kernel_size, SEG_CONV)
    _add_bn(params, f"{prefix}.bn2", out_ch, bn_partition)


def init_parameters(config: NetworkConfig, seed: int, dtype=np.float32) -> NetworkParameters:
    """
    He-normal weights (std = sqrt(2 / fan_in)), zero biases, batch-norm gamma 1 and beta 0.

    Values are drawn in 64-bit and cast, so 32- and 64-bit runs start from the same point.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    params = NetworkParameters(config, dtype)

    if isinstance(config, UNetConfig):
        in_ch = 1
        for level in range(config.depth):
            _add_conv_block(params, rng, f"enc{level}", in_ch, config.channels(level), config)
            in_ch = config.channels(level)
        _add_conv_block(params, rng, "bottleneck", in_ch, config.bottleneck_channels, config)
        for level in reversed(range(config.depth)):
            _add_conv_block(
                params, rng, f"dec{level}", config.channels(level + 1) + config.channels(level),
                config.channels(level), config,
            )
        _add_conv(params, rng, "head", config.base_channels, config.num_classes, 1, SEG_CONV)
    else:
        tap_channels = _discriminator_tap_channels(config)
        for tap in TAP_NAMES:
            in_ch = tap_channels[tap]
            for stage, out_ch in enumerate(config.conv_channels):
                _add_conv(params, rng, f"{tap}.conv{stage}", in_ch, out_ch, config.kernel_size, DISC)
                _add_bn(params, f"{tap}.bn{stage}", out_ch, DISC)
                in_ch = out_ch
        widths = [2 * config.conv_channels[-1], *config.fc_widths, config.num_domains]
        for index, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            params.add(f"fc{index}.weight", _he_normal(rng, (fan_in, fan_out), fan_in), DISC)
            params.add(f"fc{index}.bias", np.zeros(fan_out), DISC)

    logger.info(f"Initialised {params} with seed={seed}, dtype={params.dtype}")
    return params


def _discriminator_tap_channels(config: DiscriminatorConfig) -> Dict[str, int]:
    channels = config.tap_channels
    if set(channels) != set(TAP_NAMES):
        raise DannSegError(
            ErrorCode.INVALID_CONFIG,
            "discriminator config needs tap channels; build it with discriminator_for(unet_config, ...)",
        )
    return channels


def discriminator_for(unet_config: UNetConfig, config: DiscriminatorConfig) -> DiscriminatorConfig:
    """Bind a discriminator config to the tap widths of a given U-Net."""
    bound = DiscriminatorConfig.from_dict(config.to_dict())
    bound.tap_channels = {
        "penultimate": unet_config.base_channels,
        "bottleneck": unet_config.bottleneck_channels,
    }
    tap_sizes = {
        "penultimate": unet_config.input_size,
        "bottleneck": unet_config.input_size // 2 ** unet_config.depth,
    }
    for tap, size in tap_sizes.items():
        skipped = [stage for stage, pooled in enumerate(pooling_plan(size, len(bound.conv_channels))) if not pooled]
        if skipped:
            logger.debug(f"Discriminator {tap} branch ({size}x{size}) skips 2x2 pooling at stages {skipped}")
    return bound


def pooling_plan(size: int, stages: int) -> List[bool]:
    """Whether each discriminator stage max-pools a square map of the given size (only even sizes pool)."""
    plan = []
    for _ in range(stages):
        pooled = size % 2 == 0
        plan.append(pooled)
        if pooled:
            size //= 2
    return plan


class UNetOutput:
    def __init__(self, probs: Tensor, taps: Dict[str, Tensor]):
        self.probs = probs
        self.taps = taps


def _conv_block(params, prefix, x, mode, update_stats, config: UNetConfig) -> Tensor:
    for j in (1, 2):
        x = conv2d(x, params[f"{prefix}.conv{j}.weight"], params[f"{prefix}.conv{j}.bias"])
        x = batchnorm2d(
            x, params[f"{prefix}.bn{j}.gamma"], params[f"{prefix}.bn{j}.beta"],
            running=params.running[f"{prefix}.bn{j}"], mode=mode,
            momentum=config.bn_momentum, eps=config.bn_eps, update_stats=update_stats,
        )
        x = relu(x)
    return x


def unet_forward(
    params: NetworkParameters,
    image: Union[Tensor, np.ndarray],
    mode: str = "train",
    update_stats: bool = True,
) -> UNetOutput:
    """
    Segmenter forward pass.

    Args:
        params: segmenter parameters
        image: (N, 1, H, W) with H and W divisible by 2^depth
        mode: "train" uses batch statistics, "eval" the running statistics
        update_stats: whether train mode folds batch statistics into the running ones

    Returns:
        UNetOutput with per-pixel class probabilities (N, K, H, W) and the taps
        "penultimate" (last decoder features, full resolution) and "bottleneck"
        (minimum-resolution features).
    """
    config: UNetConfig = params.config
    x = image if isinstance(image, Tensor) else Tensor(image, dtype=params.dtype)
    if x.ndim != 4 or x.shape[1] != 1:
        raise DannSegError(ErrorCode.SHAPE_MISMATCH, f"U-Net expects (N, 1, H, W) input, got {x.shape}")
    factor = 2 ** config.depth
    if x.shape[2] % factor or x.shape[3] % factor:
        raise DannSegError(
            ErrorCode.SHAPE_MISMATCH,
            f"U-Net input {x.shape[2]}x{x.shape[3]} is not divisible by {factor}",
        )

    skips = []
    for level in range(config.depth):
        x = _conv_block(params, f"enc{level}", x, mode, update_stats, config)
        skips.append(x)
        x = maxpool2d(x)
    bottleneck = _conv_block(params, "bottleneck", x, mode, update_stats, config)

    x = bottleneck
    for level in reversed(range(config.depth)):
        x = concat([upsample_nearest2x(x), skips[level]], axis=1)
        x = _conv_block(params, f"dec{level}", x, mode, update_stats, config)
    penultimate = x

    logits = conv2d(penultimate, params["head.weight"], params["head.bias"])
    probs = softmax(logits, axis=1)
    return UNetOutput(probs, {"penultimate": penultimate, "bottleneck": bottleneck})


def discriminator_forward(
    params: NetworkParameters,
    taps: Dict[str, Tensor],
    mode: str = "train",
    update_stats: bool = True,
) -> Tensor:
    """
    Domain classifier on the U-Net taps; returns unnormalised (N, D) logits.

    Each tap runs through its own conv-BN-ReLU stages, pooling 2x2 while the spatial
    size stays even; the branches are globally average-pooled and concatenated ahead of
    the fully-connected layers (ReLU between them, none after the last).
    """
    config: DiscriminatorConfig = params.config
    batch_sizes = {taps[name].shape[0] for name in TAP_NAMES}
    if len(batch_sizes) != 1:
        raise DannSegError(
            ErrorCode.SHAPE_MISMATCH,
            f"tap batch sizes differ: {[taps[name].shape for name in TAP_NAMES]}",
        )

    pooled = []
    for tap in TAP_NAMES:
        x = taps[tap]
        for stage in range(len(config.conv_channels)):
            x = conv2d(x, params[f"{tap}.conv{stage}.weight"], params[f"{tap}.conv{stage}.bias"])
            x = batchnorm2d(
                x, params[f"{tap}.bn{stage}.gamma"], params[f"{tap}.bn{stage}.beta"],
                running=params.running[f"{tap}.bn{stage}"], mode=mode,
                momentum=config.bn_momentum, eps=config.bn_eps, update_stats=update_stats,
            )
            x = relu(x)
            if x.shape[2] % 2 == 0 and x.shape[3] % 2 == 0:
                x = maxpool2d(x)
        pooled.append(global_avg_pool2d(x))

    x = concat(pooled, axis=1)
    layers = len(config.fc_widths) + 1
    for index in range(layers):
        x = dense(x, params[f"fc{index}.weight"], params[f"fc{index}.bias"])
        if index < layers - 1:
            x = relu(x)
    return x


def domain_probabilities(logits: Tensor) -> Tensor:
    return softmax(logits, axis=1)
