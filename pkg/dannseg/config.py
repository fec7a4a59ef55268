import copy
import json
import logging
import os
from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional

from dannseg.augmentation import AugmentPolicy
from dannseg.error import DannSegError, ErrorCode
from dannseg.inference import EvalConfig
from dannseg.networks import DiscriminatorConfig, UNetConfig
from dannseg.preprocessing import PreprocessConfig
from dannseg.trainer import TrainerConfig

logger = logging.getLogger(__name__)

RUN_CONFIG_NAME = "run_config.json"
SEED_ENV = "DANNSEG_SEED"
DEFAULT_SEED = 0


@dataclass
class GenerationConfig:
    domains: str = "default"
    per_domain: int = 100
    size: int = 32

    def validate(self) -> None:
        if self.per_domain < 1:
            raise DannSegError(ErrorCode.INVALID_CONFIG, f"--per-domain must be >= 1, got {self.per_domain}")
        if self.size < 32:
            raise DannSegError(ErrorCode.INVALID_CONFIG, f"--size must be >= 32, got {self.size}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GenerationConfig":
        return cls(**data)


_SECTIONS = {
    "unet": UNetConfig,
    "discriminator": DiscriminatorConfig,
    "trainer": TrainerConfig,
    "preprocess": PreprocessConfig,
    "augment": AugmentPolicy,
    "evaluation": EvalConfig,
    "generation": GenerationConfig,
}


class RunConfig:
    """Every setting of one run; a persisted RunConfig re-creates the run."""

    def __init__(
        self,
        seed: int = DEFAULT_SEED,
        preset: str = "desk",
        data_dir: str = "",
        output_dir: str = "",
        unet: Optional[UNetConfig] = None,
        discriminator: Optional[DiscriminatorConfig] = None,
        trainer: Optional[TrainerConfig] = None,
        preprocess: Optional[PreprocessConfig] = None,
        augment: Optional[AugmentPolicy] = None,
        evaluation: Optional[EvalConfig] = None,
        generation: Optional[GenerationConfig] = None,
    ):
        self.seed = seed
        self.preset = preset
        self.data_dir = data_dir
        self.output_dir = output_dir
        self.unet = unet or UNetConfig()
        self.discriminator = discriminator or DiscriminatorConfig()
        self.trainer = trainer or TrainerConfig()
        self.preprocess = preprocess or PreprocessConfig()
        self.augment = augment or AugmentPolicy()
        self.evaluation = evaluation or EvalConfig()
        self.generation = generation or GenerationConfig()

    def validate(self) -> None:
        for name in _SECTIONS:
            getattr(self, name).validate()
        if self.preprocess.crop_size != self.unet.input_size:
            raise DannSegError(
                ErrorCode.INVALID_CONFIG,
                f"preprocess.crop_size ({self.preprocess.crop_size}) must equal unet.input_size ({self.unet.input_size})",
            )

    def to_dict(self) -> dict:
        data = {"seed": self.seed, "preset": self.preset, "data_dir": self.data_dir, "output_dir": self.output_dir}
        for name in _SECTIONS:
            data[name] = getattr(self, name).to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = set(data) - {"seed", "preset", "data_dir", "output_dir", *_SECTIONS}
        if unknown:
            raise DannSegError(ErrorCode.INVALID_CONFIG, f"unknown config keys {sorted(unknown)}")
        sections = {}
        for name, section_cls in _SECTIONS.items():
            if name in data:
                try:
                    sections[name] = section_cls.from_dict(data[name])
                except TypeError as e:
                    raise DannSegError(ErrorCode.INVALID_CONFIG, f"invalid {name} config: {e}")
        return cls(
            seed=int(data.get("seed", DEFAULT_SEED)),
            preset=data.get("preset", "desk"),
            data_dir=data.get("data_dir", ""),
            output_dir=data.get("output_dir", ""),
            **sections,
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, json_str: str) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(json_str))
        except json.JSONDecodeError as e:
            raise DannSegError(ErrorCode.INVALID_CONFIG, f"config is not valid JSON: {e}")

    def write(self, directory: str) -> str:
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, RUN_CONFIG_NAME)
        with open(path, "w") as f:
            f.write(self.to_json())
        logger.info(f"Wrote resolved configuration to {path}")
        return path

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.to_dict() == other.to_dict()


def preset(name: str) -> RunConfig:
    """
    "desk": 32 px inputs, base 8 channels, 20/20/40 epochs with a 40-epoch ramp.
    "full": 192 px inputs, base 16 channels, 150/150/150 epochs with a 150-epoch ramp.
    """
    if name == "desk":
        return RunConfig(
            preset="desk",
            unet=UNetConfig(input_size=32, base_channels=8),
            trainer=TrainerConfig(phase_epochs=(20, 20, 40), alpha_ramp=40),
            preprocess=PreprocessConfig(crop_size=32, clahe_tiles=4),
            augment=AugmentPolicy(translation_px=2.0, warp_px=1.0),
            generation=GenerationConfig(per_domain=100, size=32),
        )
    if name == "full":
        return RunConfig(
            preset="full",
            unet=UNetConfig(input_size=192, base_channels=16),
            trainer=TrainerConfig(phase_epochs=(150, 150, 150), alpha_ramp=150),
            preprocess=PreprocessConfig(crop_size=192, clahe_tiles=8),
            generation=GenerationConfig(per_domain=100, size=192),
        )
    raise DannSegError(ErrorCode.INVALID_CONFIG, f"unknown preset {name!r}; expected 'desk' or 'full'")


def _deep_merge(base: dict, update: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict) and key != "tap_channels":
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _set_path(data: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            raise DannSegError(ErrorCode.INVALID_CONFIG, f"unknown config section in {dotted!r}")
        node = node[key]
    if keys[-1] not in node:
        raise DannSegError(ErrorCode.INVALID_CONFIG, f"unknown config key {dotted!r}")
    node[keys[-1]] = value


def resolve_run_config(
    preset_name: Optional[str] = None,
    config_file: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
    environ: Optional[Dict[str, str]] = None,
) -> RunConfig:
    """
    Merge configuration sources; later ones win: preset defaults, DANNSEG_SEED, the JSON file,
    then command-line overrides given as dotted keys ("trainer.mode", "seed").
    """
    environ = os.environ if environ is None else environ
    file_data: dict = {}
    if config_file:
        try:
            with open(config_file) as f:
                file_data = json.load(f)
        except OSError as e:
            raise DannSegError(ErrorCode.INVALID_CONFIG, f"cannot read config file {config_file}: {e}")
        except json.JSONDecodeError as e:
            raise DannSegError(ErrorCode.INVALID_CONFIG, f"config file {config_file} is not valid JSON: {e}")

    name = preset_name or file_data.get("preset") or "desk"
    data = preset(name).to_dict()
    if environ.get(SEED_ENV):
        try:
            data["seed"] = int(environ[SEED_ENV])
        except ValueError:
            raise DannSegError(ErrorCode.INVALID_CONFIG, f"{SEED_ENV} must be an integer, got {environ[SEED_ENV]!r}")
    data = _deep_merge(data, file_data)
    data["preset"] = name
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_path(data, dotted, value)

    config = RunConfig.from_dict(data)
    config.validate()
    return config
