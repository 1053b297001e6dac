"""Checkpoint encoding."""

import json
import struct

import numpy as np
import pytest

from otmil.checkpoint import (
    CheckpointError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from otmil.model import ModelParams
from otmil.train import TrainConfig


@pytest.fixture
def params():
    return ModelParams.initialize(6, 4, 3, np.random.default_rng(0))


def test_round_trip(tmp_path, params):
    cfg = TrainConfig(latent_dim=4, n_tokens=3).as_dict()
    save_checkpoint(tmp_path / "m.ckpt", params, cfg, 7, 12, {"fold": "2"})
    back, header = load_checkpoint(tmp_path / "m.ckpt")
    assert np.array_equal(back.flatten(), params.flatten())
    assert header["config"] == cfg and header["seed"] == 7 and header["epochs"] == 12
    assert header["extra"] == {"fold": "2"}
    assert TrainConfig(**header["config"]) == TrainConfig(latent_dim=4, n_tokens=3)


def test_layout_and_named_dims(params):
    data = encode_checkpoint(params, {}, 0, 0)
    magic, version, head_len = struct.unpack_from("<8sHI", data)
    assert (magic, version) == (b"OTMILCKP", 1)
    header = json.loads(data[14: 14 + head_len])
    dims = {t["name"]: t["dims"] for t in header["tensors"]}
    assert dims["proj_weight"] == ["feature", "latent"]
    assert dims["tokens"] == ["token", "latent"]


def test_deterministic_bytes(params):
    assert encode_checkpoint(params, {"b": 1, "a": 2}, 0, 1) == encode_checkpoint(
        params, {"a": 2, "b": 1}, 0, 1)


def test_corruption_detected(params):
    data = bytearray(encode_checkpoint(params, {}, 0, 0))
    data[-20] ^= 1
    with pytest.raises(CheckpointError, match="checksum"):
        decode_checkpoint(bytes(data))
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"XXXXXXXX" + bytes(data[8:]))
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(b"OTMIL")
