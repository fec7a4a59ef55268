import csv
import json
import os

import pytest

from app import main
from dannseg.error import ExitCode
from dannseg.metrics import MetricsReport

TINY_RUN = {
    "preset": "desk",
    "unet": {"input_size": 16, "base_channels": 2, "depth": 2},
    "discriminator": {"conv_channels": [2, 4], "fc_widths": [4]},
    "trainer": {"phase_epochs": [1, 1, 2], "alpha_ramp": 2, "seg_batch_size": 4, "disc_batch_size": 6,
                "plateau_window": 1},
    "preprocess": {"target_spacing_mm": 2.5, "crop_size": 16, "clahe_tiles": 2},
    "augment": {"translation_px": 1.0, "warp_px": 0.5},
    "generation": {"per_domain": 10, "size": 32},
}


@pytest.fixture(autouse=True)
def no_seed_from_environment(monkeypatch):
    monkeypatch.delenv("DANNSEG_SEED", raising=False)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "run.json"
    config.write_text(json.dumps(TINY_RUN))
    data = str(root / "data")
    assert main(["generate", "--config", str(config), "--out", data, "--seed", "1"]) == 0
    return root, str(config), data


@pytest.fixture(scope="module")
def trained(workspace):
    root, config, data = workspace
    out = str(root / "baseline")
    assert main(["train", "--config", config, "--data", data, "--mode", "baseline", "--out", out, "--seed", "1"]) == 0
    return out


def _files(directory):
    return sorted(name for name in os.listdir(directory) if name.endswith((".img", ".msk", ".json")))


def test_generate_is_reproducible(workspace, tmp_path):
    _, config, data = workspace
    again = str(tmp_path / "again")
    assert main(["generate", "--config", config, "--out", again, "--seed", "1"]) == 0
    names = [n for n in _files(data) if n != "run_config.json"]
    assert names == [n for n in _files(again) if n != "run_config.json"]
    for name in names:
        with open(os.path.join(data, name), "rb") as a, open(os.path.join(again, name), "rb") as b:
            assert a.read() == b.read(), name


def test_generate_rejects_zero_samples(tmp_path):
    assert main(["generate", "--out", str(tmp_path / "d"), "--per-domain", "0"]) == ExitCode.USAGE.value


def test_generate_refuses_non_empty_directory(workspace):
    _, config, data = workspace
    assert main(["generate", "--config", config, "--out", data]) == ExitCode.USAGE.value


def test_missing_required_flag_is_a_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["generate"])
    assert info.value.code == ExitCode.USAGE.value


def test_train_writes_one_log_row_per_epoch(trained):
    with open(os.path.join(trained, "training_log.csv"), newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 4
    assert [row["phase"] for row in rows] == ["seg", "disc", "joint", "joint"]
    assert os.path.exists(os.path.join(trained, "model.ckpt"))
    with open(os.path.join(trained, "run_config.json")) as f:
        assert json.load(f)["trainer"]["mode"] == "baseline"


def test_train_on_missing_dataset_is_a_data_error(workspace, tmp_path):
    _, config, _ = workspace
    code = main(["train", "--config", config, "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "t")])
    assert code == ExitCode.DATA.value


def test_eval_compare_with_itself(workspace, trained, tmp_path):
    _, config, data = workspace
    model = os.path.join(trained, "model.ckpt")
    out = str(tmp_path / "eval")
    assert main(["eval", "--config", config, "--data", data, "--checkpoint", model, "--compare", model,
                 "--out", out]) == 0
    with open(os.path.join(out, "metrics.json")) as f:
        report = json.load(f)
    assert "All" in report["aggregates"]
    assert report["comparisons"]
    assert all(c["p"] == pytest.approx(1.0) for c in report["comparisons"])
    assert os.path.exists(os.path.join(out, "metrics.csv"))
    assert os.path.exists(os.path.join(out, "metrics_compare.csv"))


def test_probe_writes_one_embedding_per_sample(workspace, trained, tmp_path):
    _, config, data = workspace
    out = str(tmp_path / "probe")
    assert main(["probe", "--config", config, "--data", data, "--checkpoint", os.path.join(trained, "model.ckpt"),
                 "--out", out]) == 0
    with open(os.path.join(out, "embeddings.csv"), newline="") as f:
        rows = list(csv.reader(f))
    assert len(rows) == 1 + 4 * 10
    assert len(rows[0]) == 2 + 2 * 8
    with open(os.path.join(out, "probe.json")) as f:
        probe = json.load(f)
    assert probe["num_domains"] == 4
    assert 0.0 <= probe["accuracy"] <= 1.0


def test_probe_on_a_single_domain_is_a_data_error(workspace, trained, tmp_path):
    _, config, data = workspace
    code = main(["probe", "--config", config, "--data", data, "--checkpoint", os.path.join(trained, "model.ckpt"),
                 "--domains", "A", "--out", str(tmp_path / "probe")])
    assert code == ExitCode.DATA.value


def test_training_log_is_byte_identical_across_runs(workspace, trained, tmp_path):
    _, config, data = workspace
    again = str(tmp_path / "again")
    assert main(["train", "--config", config, "--data", data, "--mode", "baseline", "--out", again,
                 "--seed", "1"]) == 0
    with open(os.path.join(trained, "training_log.csv"), "rb") as a, \
            open(os.path.join(again, "training_log.csv"), "rb") as b:
        assert a.read() == b.read()


def test_commands_leave_the_dataset_untouched(workspace, trained, tmp_path):
    _, config, data = workspace

    def snapshot():
        contents = {}
        for name in sorted(os.listdir(data)):
            with open(os.path.join(data, name), "rb") as f:
                contents[name] = f.read()
        return contents

    before = snapshot()
    model = os.path.join(trained, "model.ckpt")
    assert main(["eval", "--config", config, "--data", data, "--checkpoint", model, "--out",
                 str(tmp_path / "eval")]) == 0
    assert main(["probe", "--config", config, "--data", data, "--checkpoint", model, "--out",
                 str(tmp_path / "probe")]) == 0
    assert snapshot() == before


def _read(directory, name):
    with open(os.path.join(directory, name), "rb") as f:
        return f.read()


def test_interrupted_training_resumes_to_the_same_files(workspace, tmp_path):
    _, config, data = workspace
    out = str(tmp_path / "run")
    argv = ["train", "--config", config, "--data", data, "--mode", "adversarial", "--out", out, "--seed", "3"]
    assert main(argv) == 0
    expected = {name: _read(out, name) for name in ("training_log.csv", "model.ckpt")}

    for name in ("model.ckpt", "training_log.csv", "training_log.json", "selection.json",
                 os.path.join("checkpoints", "epoch_0002.ckpt"), os.path.join("checkpoints", "epoch_0003.ckpt")):
        os.remove(os.path.join(out, name))
    assert main(argv + ["--resume", os.path.join(out, "checkpoints", "epoch_0001.ckpt")]) == 0

    for name, content in expected.items():
        assert _read(out, name) == content, name


def test_eval_aggregates_are_reproducible(workspace, trained, tmp_path):
    _, config, data = workspace
    model = os.path.join(trained, "model.ckpt")
    first, second = str(tmp_path / "first"), str(tmp_path / "second")
    for out in (first, second):
        assert main(["eval", "--config", config, "--data", data, "--checkpoint", model, "--out", out]) == 0

    for name in ("metrics.csv", "metrics.json"):
        assert _read(first, name) == _read(second, name), name
    report = json.loads(_read(first, "metrics.json"))
    assert set(report["aggregates"]) == {"A", "B", "C", "D", "All"}
    recomputed = MetricsReport.from_csv(os.path.join(second, "metrics.csv")).aggregates
    assert json.loads(json.dumps(recomputed)) == report["aggregates"]
