"""Checkpoint round-trips and the config-echo consistency rule."""

import numpy as np
import pytest

from ivit.checkpoint import (
    apply_parameters,
    load_checkpoint,
    load_into,
    model_from_checkpoint,
    save_checkpoint,
)
from ivit.config import ModelConfig
from ivit.errors import BadMagicError, ConsistencyError, TruncatedFileError, VersionMismatchError
from ivit.model import InstructionModel


def tiny_model(seed=0, **kw):
    base = dict(image_size=8, patch_size=4, channels=3, dim=16, depth=1, heads=2,
                mlp_ratio=2.0, prompt_dim=8, n_classes=3)
    base.update(kw)
    return InstructionModel(ModelConfig(**base), seed=seed)


def test_round_trip_bit_exact(tmp_path):
    model = tiny_model(seed=4)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, step=17)
    config, params, step = load_checkpoint(path)
    assert step == 17
    assert config == model.config
    own = model.parameter_dict()
    assert set(params) == set(own)
    for name, arr in params.items():
        assert np.array_equal(arr, own[name].data), name


def test_load_into_restores_parameters(tmp_path):
    src = tiny_model(seed=4)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, src, step=3)
    dst = tiny_model(seed=99)  # different init
    assert not np.array_equal(dst.head.weight.data, src.head.weight.data)
    step = load_into(dst, path)
    assert step == 3
    for name, p in dst.named_parameters():
        assert np.array_equal(p.data, dict(src.named_parameters())[name].data), name


def test_config_echo_mismatch_rejected(tmp_path):
    src = tiny_model(dim=16)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, src)
    other = tiny_model(dim=32, heads=2)
    with pytest.raises(ConsistencyError, match="config"):
        load_into(other, path)


def test_model_from_checkpoint_rebuilds(tmp_path):
    src = tiny_model(seed=6, n_classes=5)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, src, step=1)
    rebuilt, step = model_from_checkpoint(path)
    assert rebuilt.config == src.config
    assert np.array_equal(rebuilt.head.weight.data, src.head.weight.data)


def test_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, tiny_model())
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(BadMagicError):
        load_checkpoint(path)


def test_bad_version(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, tiny_model())
    blob = bytearray(path.read_bytes())
    blob[4] = 42
    path.write_bytes(bytes(blob))
    with pytest.raises(VersionMismatchError):
        load_checkpoint(path)


def test_truncated(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, tiny_model())
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(TruncatedFileError):
        load_checkpoint(path)


def test_shape_mismatch_rejected(tmp_path):
    model = tiny_model()
    params = {name: p.data.copy() for name, p in model.named_parameters()}
    params["head.bias"] = np.zeros(7, dtype=np.float32)
    with pytest.raises(ConsistencyError, match="head.bias"):
        apply_parameters(model, params)


def test_missing_parameter_rejected(tmp_path):
    model = tiny_model()
    params = {name: p.data.copy() for name, p in model.named_parameters()}
    del params["head.bias"]
    with pytest.raises(ConsistencyError, match="missing"):
        apply_parameters(model, params)
