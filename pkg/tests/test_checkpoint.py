import numpy as np
import pytest
import torch

from conftest import tiny_encoder_config
from crosscoherence.encoders.checkpoint import (
    CheckpointError,
    load_checkpoint,
    load_module,
    save_checkpoint,
    save_module,
)
from crosscoherence.encoders.pointnet import PointNetEncoder


def test_checkpoint_round_trip_bytes(tmp_path, rng):
    tensors = {"a": rng.random((2, 3)).astype(np.float32), "b.c": np.arange(4, dtype=np.float32)}
    save_checkpoint(tmp_path / "x.ckpt", tensors)
    back = load_checkpoint(tmp_path / "x.ckpt")
    assert list(back) == ["a", "b.c"]
    save_checkpoint(tmp_path / "y.ckpt", back)
    assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()


def test_module_round_trip(tmp_path):
    a = PointNetEncoder(tiny_encoder_config())
    b = PointNetEncoder(tiny_encoder_config())
    save_module(tmp_path / "m.ckpt", a)
    load_module(tmp_path / "m.ckpt", b)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_shape_mismatch_rejected(tmp_path):
    save_module(tmp_path / "m.ckpt", PointNetEncoder(tiny_encoder_config(widths=8)))
    with pytest.raises(CheckpointError):
        load_module(tmp_path / "m.ckpt", PointNetEncoder(tiny_encoder_config(widths=4)))


def test_trailing_bytes_rejected(tmp_path):
    save_checkpoint(tmp_path / "x.ckpt", {"a": np.zeros(2, np.float32)})
    with open(tmp_path / "x.ckpt", "ab") as f:
        f.write(b"\x00")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.ckpt")
