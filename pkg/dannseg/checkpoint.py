"""
Checkpoint file: an 8-byte magic, the header length as little-endian uint64, a UTF-8 JSON
header and then the raw little-endian floats of every tensor in header order.

Header fields:
    format_version: layout version
    dtype: "<f4" for 32-bit runs and "<f8" for 64-bit runs. Every array in the payload has
        this width, so a 64-bit run resumes bit-exactly
    networks: kind, config and partition labels of the segmenter and the discriminator
    optimizers: step counter per optimizer (moments are stored as tensors)
    tensors: key, shape and byte offset of every payload array
    payload_bytes: total payload size, checked on load
    epoch, seed, extra: training position, run seed, run config and the log so far
"""
import json
import logging
import os
import struct
from typing import Dict, List, Optional, Tuple

import numpy as np

from dannseg.error import DannSegError, ErrorCode
from dannseg.functional import RunningStats
from dannseg.networks import (
    DiscriminatorConfig,
    NetworkParameters,
    UNetConfig,
    init_parameters,
)
from dannseg.optimizer import OptimizerState

logger = logging.getLogger(__name__)

MAGIC = b"DANNCKPT"
FORMAT_VERSION = 1
_DTYPES = {np.dtype(np.float32): "<f4", np.dtype(np.float64): "<f8"}


class Checkpoint:
    def __init__(
        self,
        segmenter: NetworkParameters,
        discriminator: Optional[NetworkParameters] = None,
        optimizers: Optional[Dict[str, OptimizerState]] = None,
        epoch: int = -1,
        seed: int = 0,
        extra: Optional[dict] = None,
    ):
        self.segmenter = segmenter
        self.discriminator = discriminator
        self.optimizers = optimizers or {}
        self.epoch = epoch
        self.seed = seed
        self.extra = extra or {}

    def __repr__(self):
        return f"Checkpoint(epoch={self.epoch}, seed={self.seed}, discriminator={self.discriminator is not None})"


def _network_entries(prefix: str, params: NetworkParameters) -> List[Tuple[str, np.ndarray]]:
    entries = [(f"{prefix}/param/{name}", t.data) for name, t in params.items()]
    for name, stats in params.running.items():
        entries.append((f"{prefix}/running/{name}/mean", stats.mean))
        entries.append((f"{prefix}/running/{name}/var", stats.var))
    return entries


def _optimizer_entries(key: str, state: OptimizerState) -> List[Tuple[str, np.ndarray]]:
    entries = [(f"optimizer/{key}/m/{name}", m) for name, m in state.m.items()]
    entries += [(f"optimizer/{key}/v/{name}", v) for name, v in state.v.items()]
    return entries


def save_checkpoint(path: str, checkpoint: Checkpoint) -> str:
    dtype = checkpoint.segmenter.dtype
    if dtype not in _DTYPES:
        raise DannSegError(ErrorCode.INVALID_CONFIG, f"unsupported checkpoint dtype {dtype}")
    stored = np.dtype(_DTYPES[dtype])

    entries = _network_entries("segmenter", checkpoint.segmenter)
    networks = {"segmenter": _network_header(checkpoint.segmenter)}
    if checkpoint.discriminator is not None:
        entries += _network_entries("discriminator", checkpoint.discriminator)
        networks["discriminator"] = _network_header(checkpoint.discriminator)
    for key, state in checkpoint.optimizers.items():
        entries += _optimizer_entries(key, state)

    layout = []
    offset = 0
    for key, array in entries:
        layout.append({"key": key, "shape": list(array.shape), "offset": offset})
        offset += int(array.size) * stored.itemsize

    header = {
        "format_version": FORMAT_VERSION,
        "dtype": _DTYPES[dtype],
        "epoch": checkpoint.epoch,
        "seed": checkpoint.seed,
        "networks": networks,
        "optimizers": {key: {"step": state.step} for key, state in checkpoint.optimizers.items()},
        "tensors": layout,
        "payload_bytes": offset,
        "extra": checkpoint.extra,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp_path = path + ".tmp"
    with open(tmp_path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for _, array in entries:
            f.write(np.ascontiguousarray(array, dtype=stored).tobytes())
    os.replace(tmp_path, path)
    logger.info(f"Saved checkpoint epoch={checkpoint.epoch} to {path} ({offset} payload bytes)")
    return path


def _network_header(params: NetworkParameters) -> dict:
    return {
        "kind": params.network,
        "config": params.config.to_dict(),
        "partitions": dict(params.partitions),
    }


def read_checkpoint_header(path: str) -> Tuple[dict, bytes]:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DannSegError(ErrorCode.CHECKPOINT_MISMATCH, f"cannot read checkpoint {path}: {e}")
    if raw[:len(MAGIC)] != MAGIC or len(raw) < len(MAGIC) + 8:
        raise DannSegError(ErrorCode.CHECKPOINT_MISMATCH, f"{path} is not a checkpoint file")
    (header_len,) = struct.unpack("<Q", raw[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        header = json.loads(raw[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DannSegError(ErrorCode.CHECKPOINT_MISMATCH, f"malformed checkpoint header in {path}: {e}")
    payload = raw[start + header_len:]
    if len(payload) != header.get("payload_bytes"):
        raise DannSegError(
            ErrorCode.CHECKPOINT_MISMATCH,
            f"checkpoint {path} payload has {len(payload)} bytes, header declares {header.get('payload_bytes')}",
        )
    return header, payload


def _restore_network(kind: str, meta: dict, arrays: Dict[str, np.ndarray], dtype) -> NetworkParameters:
    if kind == "segmenter":
        config = UNetConfig.from_dict(meta["config"])
    else:
        config = DiscriminatorConfig.from_dict(meta["config"])
    params = init_parameters(config, seed=0, dtype=dtype)
    for name, tensor in params.items():
        key = f"{kind}/param/{name}"
        if key not in arrays:
            raise DannSegError(ErrorCode.CHECKPOINT_MISMATCH, f"checkpoint lacks {kind} tensor {name!r}")
        if arrays[key].shape != tensor.shape:
            raise DannSegError(
                ErrorCode.CHECKPOINT_MISMATCH,
                f"{kind} tensor {name!r} has shape {arrays[key].shape}, config expects {tensor.shape}",
            )
        if meta["partitions"].get(name) != params.partitions[name]:
            raise DannSegError(ErrorCode.CHECKPOINT_MISMATCH, f"partition label mismatch for {name!r}")
        tensor.data = arrays[key]
    for name in params.running:
        params.running[name] = RunningStats(arrays[f"{kind}/running/{name}/mean"], arrays[f"{kind}/running/{name}/var"])
    extra = {k for k in arrays if k.startswith(f"{kind}/param/")} - {f"{kind}/param/{n}" for n in params}
    if extra:
        raise DannSegError(ErrorCode.CHECKPOINT_MISMATCH, f"checkpoint has unexpected tensors {sorted(extra)}")
    return params


def load_checkpoint(path: str) -> Checkpoint:
    header, payload = read_checkpoint_header(path)
    stored = np.dtype(header["dtype"])
    dtype = np.float64 if stored.itemsize == 8 else np.float32

    arrays: Dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        end = start + count * stored.itemsize
        if end > len(payload):
            raise DannSegError(ErrorCode.CHECKPOINT_MISMATCH, f"tensor {entry['key']} runs past the payload")
        arrays[entry["key"]] = np.frombuffer(payload[start:end], dtype=stored).astype(dtype).reshape(entry["shape"])

    networks = header["networks"]
    segmenter = _restore_network("segmenter", networks["segmenter"], arrays, dtype)
    discriminator = None
    if "discriminator" in networks:
        discriminator = _restore_network("discriminator", networks["discriminator"], arrays, dtype)

    optimizers = {}
    for key, meta in header.get("optimizers", {}).items():
        state = OptimizerState(step=meta["step"])
        for array_key, array in arrays.items():
            prefix = f"optimizer/{key}/"
            if array_key.startswith(prefix):
                moment, name = array_key[len(prefix):].split("/", 1)
                getattr(state, moment)[name] = array
        optimizers[key] = state

    logger.info(f"Loaded checkpoint epoch={header['epoch']} from {path}")
    return Checkpoint(
        segmenter, discriminator, optimizers,
        epoch=header["epoch"], seed=header["seed"], extra=header.get("extra", {}),
    )
