import json
import os

import pytest

from dannseg.config import RUN_CONFIG_NAME, GenerationConfig, RunConfig, preset, resolve_run_config
from dannseg.error import DannSegError, ErrorCode


def _write(tmp_path, data, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def test_presets():
    desk, full = preset("desk"), preset("full")
    assert desk.unet.input_size == desk.preprocess.crop_size == 32
    assert desk.trainer.phase_epochs == (20, 20, 40)
    assert full.unet.input_size == full.preprocess.crop_size == 192
    assert full.trainer.phase_epochs == (150, 150, 150)
    desk.validate()
    full.validate()
    with pytest.raises(DannSegError):
        preset("laptop")


def test_sources_override_in_order(tmp_path):
    assert resolve_run_config(environ={}).seed == 0
    assert resolve_run_config(environ={"DANNSEG_SEED": "5"}).seed == 5
    path = _write(tmp_path, {"seed": 7, "trainer": {"mode": "baseline"}})
    from_file = resolve_run_config(config_file=path, environ={"DANNSEG_SEED": "5"})
    assert from_file.seed == 7
    assert from_file.trainer.mode == "baseline"
    flags = resolve_run_config(config_file=path, overrides={"seed": 9, "trainer.mode": "adversarial"},
                               environ={"DANNSEG_SEED": "5"})
    assert flags.seed == 9
    assert flags.trainer.mode == "adversarial"


def test_unset_flags_do_not_override(tmp_path):
    path = _write(tmp_path, {"trainer": {"precision": "float64"}})
    config = resolve_run_config(config_file=path, overrides={"trainer.precision": None}, environ={})
    assert config.trainer.precision == "float64"


def test_file_sections_merge_into_the_preset(tmp_path):
    path = _write(tmp_path, {"preset": "full", "unet": {"base_channels": 4}})
    config = resolve_run_config(config_file=path, environ={})
    assert config.preset == "full"
    assert config.unet.base_channels == 4
    assert config.unet.input_size == 192


@pytest.mark.parametrize("data", [
    {"colour": "blue"},
    {"unet": {"width": 3}},
    {"preprocess": {"crop_size": 48}},
])
def test_invalid_files(tmp_path, data):
    with pytest.raises(DannSegError) as info:
        resolve_run_config(config_file=_write(tmp_path, data), environ={})
    assert info.value.code == ErrorCode.INVALID_CONFIG


def test_invalid_override_and_environment(tmp_path):
    with pytest.raises(DannSegError):
        resolve_run_config(overrides={"trainer.colour": 1}, environ={})
    with pytest.raises(DannSegError):
        resolve_run_config(environ={"DANNSEG_SEED": "abc"})
    with pytest.raises(DannSegError):
        resolve_run_config(config_file=str(tmp_path / "missing.json"), environ={})


def test_generation_limits():
    with pytest.raises(DannSegError):
        GenerationConfig(per_domain=0).validate()
    with pytest.raises(DannSegError):
        GenerationConfig(size=16).validate()


def test_round_trip_and_write(tmp_path):
    config = resolve_run_config("desk", overrides={"seed": 3, "trainer.precision": "float64"}, environ={})
    assert RunConfig.from_json(config.to_json()) == config
    path = config.write(str(tmp_path))
    assert os.path.basename(path) == RUN_CONFIG_NAME
    with open(path) as f:
        assert RunConfig.from_dict(json.load(f)) == config
