import numpy as np
import pytest

from dannseg.checkpoint import Checkpoint, load_checkpoint, read_checkpoint_header, save_checkpoint
from dannseg.error import DannSegError, ErrorCode
from dannseg.networks import discriminator_for, init_parameters
from dannseg.optimizer import OptimizerState


@pytest.fixture
def checkpoint(tiny_unet_config, tiny_disc_config):
    segmenter = init_parameters(tiny_unet_config, seed=1, dtype=np.float64)
    discriminator = init_parameters(discriminator_for(tiny_unet_config, tiny_disc_config), seed=2, dtype=np.float64)
    segmenter.running["enc0.bn1"].mean = np.arange(2, dtype=np.float64)
    name = "head.weight"
    state = OptimizerState(step=3, m={name: np.full(segmenter[name].shape, 0.5)},
                           v={name: np.full(segmenter[name].shape, 0.25)})
    return Checkpoint(segmenter, discriminator, {"seg": state}, epoch=4, seed=9, extra={"note": "x"})


def test_round_trip_is_exact(tmp_path, checkpoint):
    path = save_checkpoint(str(tmp_path / "model.ckpt"), checkpoint)
    loaded = load_checkpoint(path)
    assert loaded.epoch == 4 and loaded.seed == 9
    assert loaded.extra == {"note": "x"}
    assert loaded.segmenter.fingerprint() == checkpoint.segmenter.fingerprint()
    assert loaded.segmenter.running_fingerprint() == checkpoint.segmenter.running_fingerprint()
    assert loaded.segmenter.partitions == checkpoint.segmenter.partitions
    assert loaded.discriminator.fingerprint() == checkpoint.discriminator.fingerprint()
    assert loaded.optimizers["seg"] == checkpoint.optimizers["seg"]


def test_header_records_precision(tmp_path, checkpoint):
    path = save_checkpoint(str(tmp_path / "model.ckpt"), checkpoint)
    header, payload = read_checkpoint_header(path)
    assert header["dtype"] == "<f8"
    assert header["networks"]["segmenter"]["config"]["input_size"] == 16
    elements = sum(int(np.prod(entry["shape"])) for entry in header["tensors"])
    assert len(payload) == header["payload_bytes"] == 8 * elements


def test_segmenter_only_checkpoint(tmp_path, tiny_unet_config):
    segmenter = init_parameters(tiny_unet_config, seed=1)
    path = save_checkpoint(str(tmp_path / "seg.ckpt"), Checkpoint(segmenter))
    assert read_checkpoint_header(path)[0]["dtype"] == "<f4"
    loaded = load_checkpoint(path)
    assert loaded.discriminator is None
    assert loaded.segmenter.dtype == np.float32
    assert loaded.segmenter.fingerprint() == segmenter.fingerprint()


def test_truncated_checkpoint_is_rejected(tmp_path, checkpoint):
    path = save_checkpoint(str(tmp_path / "model.ckpt"), checkpoint)
    with open(path, "rb") as f:
        raw = f.read()
    with open(path, "wb") as f:
        f.write(raw[:-16])
    with pytest.raises(DannSegError) as info:
        load_checkpoint(path)
    assert info.value.code == ErrorCode.CHECKPOINT_MISMATCH


def test_non_checkpoint_file_is_rejected(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(DannSegError) as info:
        load_checkpoint(str(path))
    assert info.value.code == ErrorCode.CHECKPOINT_MISMATCH
