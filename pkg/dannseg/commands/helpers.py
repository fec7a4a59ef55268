import glob
import logging
import os
from functools import wraps
from typing import Any, Dict, Optional

from dannseg.checkpoint import Checkpoint
from dannseg.config import RunConfig, resolve_run_config
from dannseg.error import DannSegError, ErrorCode, ExitCode
from dannseg.preprocessing import PreprocessConfig

command_logger = logging.getLogger(__name__)


def init_helpers(logger):
    global command_logger
    command_logger = logger or logging.getLogger(__name__)


def command_errors(f):
    """Turn library errors into the process exit-code contract."""

    @wraps(f)
    def decorated_function(*args, **kwargs):
        try:
            f(*args, **kwargs)
        except DannSegError as e:
            command_logger.error(f"{e.code.name}: {e.message}")
            return e.exit_code.value
        except Exception as e:
            command_logger.exception(f"{ErrorCode.UNKNOWN_ERROR.name}: {e}")
            return ExitCode.USAGE.value
        return ExitCode.SUCCESS.value

    return decorated_function


def add_config_arguments(parser) -> None:
    parser.add_argument("--config", help="JSON run configuration; flags override its values")
    parser.add_argument("--preset", choices=["desk", "full"], help="defaults to start from (default: desk)")
    parser.add_argument("--seed", type=int, help="run seed (default: $DANNSEG_SEED or 0)")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")


def resolve_config(args, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    merged = {"seed": args.seed, "output_dir": args.out}
    merged.update(overrides or {})
    return resolve_run_config(args.preset, args.config, merged)


def is_non_empty_dir(path: str) -> bool:
    return os.path.isdir(path) and bool(os.listdir(path))


def prepare_output_dir(path: str, force: bool, allow_existing: bool = False) -> None:
    if is_non_empty_dir(path) and not (force or allow_existing):
        raise DannSegError(ErrorCode.OUTPUT_EXISTS, f"{path} is not empty; pass --force to overwrite")
    os.makedirs(path, exist_ok=True)


def remove_matching(directory: str, *patterns: str) -> int:
    removed = 0
    for pattern in patterns:
        for path in glob.glob(os.path.join(directory, pattern)):
            os.remove(path)
            removed += 1
    return removed


def same_path(a: str, b: str) -> bool:
    return os.path.realpath(a) == os.path.realpath(b)


def check_not_input(out: str, data: str) -> None:
    if same_path(out, data):
        raise DannSegError(ErrorCode.INVALID_CONFIG, "output directory must differ from the dataset directory")


def align_with_checkpoint(config: RunConfig, checkpoint: Checkpoint, explicit_config: bool) -> RunConfig:
    """
    Take the network and preprocessing settings from the checkpoint's training run unless a
    config file was given, in which case its U-Net must match the checkpoint.
    """
    trained = checkpoint.segmenter.config
    if explicit_config and config.unet != trained:
        raise DannSegError(
            ErrorCode.CHECKPOINT_MISMATCH,
            f"checkpoint U-Net {trained.to_dict()} does not match the configured {config.unet.to_dict()}",
        )
    config.unet = trained
    run_config = checkpoint.extra.get("run_config") or {}
    if not explicit_config and "preprocess" in run_config:
        config.preprocess = PreprocessConfig.from_dict(run_config["preprocess"])
    config.preprocess.crop_size = trained.input_size
    return config
