"""체크포인트 테스트"""
import numpy as np
import pytest

from app.config import Settings
from app.core.encoder import SIGMA_PARAM, EncoderModel
from app.core.errors import CheckpointError
from app.core.models import ModelConfig
from app.services import checkpoint as checkpoint_module
from app.services.checkpoint import HEADER_KEY, load_checkpoint, read_header, save_checkpoint
from tests.conftest import random_cloud


def test_round_trip_is_bitwise(tmp_path, toy_model, toy_experiment, rng):
    path = save_checkpoint(tmp_path / "model.ckpt", toy_model, toy_experiment, epoch=3, loss=0.5)
    loaded = load_checkpoint(path)

    assert loaded.header.epoch == 3
    assert loaded.header.loss == 0.5
    assert loaded.experiment == toy_experiment
    assert loaded.model.config == toy_model.config
    for name, array in toy_model.state_arrays().items():
        np.testing.assert_array_equal(loaded.model.params[name].data, array)

    x, y = random_cloud(rng, 5), random_cloud(rng, 5)
    np.testing.assert_array_equal(loaded.model.predict(x, y).output.data, toy_model.predict(x, y).output.data)


def test_fixed_sigmas_are_stored(tmp_path):
    model = EncoderModel.initialize(ModelConfig(d=16, heads=4, layers=1, gaussian_heads=4))
    path = save_checkpoint(tmp_path / "fixed.ckpt", model)
    header = read_header(path)
    assert header.sigmas == [0.05, 0.1, 0.5, 1.0]
    assert not header.sigma_learnable
    assert header.parameters[SIGMA_PARAM] == [4]


def test_learned_sigmas_survive(tmp_path, toy_model):
    toy_model.params[SIGMA_PARAM].data = np.array([0.25, 0.75])
    loaded = load_checkpoint(save_checkpoint(tmp_path / "learned.ckpt", toy_model))
    assert loaded.model.sigma_values() == [0.25, 0.75]
    assert loaded.model.params[SIGMA_PARAM].requires_grad


def test_truncated_file(tmp_path, toy_model):
    path = save_checkpoint(tmp_path / "model.ckpt", toy_model)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_garbage_file(tmp_path):
    path = tmp_path / "garbage.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_tampered_parameters(tmp_path, toy_model):
    path = save_checkpoint(tmp_path / "model.ckpt", toy_model)
    with np.load(path) as archive:
        payload = {key: archive[key] for key in archive.files}
    payload["p:output_proj.bias"] = payload["p:output_proj.bias"] + 1.0
    with open(path, "wb") as handle:
        np.savez(handle, **payload)
    with pytest.raises(CheckpointError, match="digest"):
        load_checkpoint(path)


def test_version_mismatch(tmp_path, toy_model, monkeypatch):
    path = save_checkpoint(tmp_path / "model.ckpt", toy_model)
    monkeypatch.setattr(checkpoint_module, "get_settings", lambda: Settings(checkpoint_version=2))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_missing_header(tmp_path, toy_model):
    path = save_checkpoint(tmp_path / "model.ckpt", toy_model)
    with np.load(path) as archive:
        payload = {key: archive[key] for key in archive.files if key != HEADER_KEY}
    with open(path, "wb") as handle:
        np.savez(handle, **payload)
    with pytest.raises(CheckpointError):
        read_header(path)
