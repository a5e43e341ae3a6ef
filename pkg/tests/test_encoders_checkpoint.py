import numpy as np
import pytest
import torch

from conftest import mean_intensity_model
from rankcount.checkpoint import (
    file_digest,
    load_probe,
    load_rank_model,
    save_probe,
    save_rank_model,
)
from rankcount.encoders import BackboneAdapter, EncoderConfig, ToyCNN, build_encoder
from rankcount.exceptions import DigestMismatchError
from rankcount.probe import ProbeModel
from rankcount.ranking import TrainConfig, init_rank_model

SMALL = EncoderConfig(input_size=(24, 24))


# ---------------------------------------------------------------------------
# encoders


def test_encoder_config_defaults():
    assert EncoderConfig().feature_dim == 64
    assert EncoderConfig("backbone_adapter").feature_dim == 2048
    assert EncoderConfig(input_size=[32, 40]).input_size == (32, 40)
    with pytest.raises(ValueError):
        EncoderConfig("vit")
    with pytest.raises(ValueError):
        EncoderConfig(feature_dim=0)


def test_toy_cnn_features_are_nonnegative():
    enc = build_encoder(EncoderConfig(feature_dim=16))
    assert isinstance(enc, ToyCNN)
    z = enc(torch.rand(5, 3, 48, 48))
    assert z.shape == (5, 16) and (z >= 0).all()


def test_backbone_adapter_shapes_and_weights(tmp_path):
    torch.manual_seed(0)
    enc = BackboneAdapter(feature_dim=2048)
    enc.eval()
    with torch.no_grad():
        z = enc(torch.rand(2, 3, 64, 64))
    assert z.shape == (2, 2048) and (z >= 0).all()
    path = tmp_path / "w.pt"
    state = dict(enc.trunk.state_dict())
    state["fc.weight"] = torch.zeros(1000, 2048)
    torch.save(state, path)
    other = BackboneAdapter(weights_path=str(path))
    for k, v in enc.trunk.state_dict().items():
        assert torch.equal(v, other.trunk.state_dict()[k]), k
    torch.save({"conv1.weight": torch.zeros(1)}, path)
    with pytest.raises(RuntimeError):
        BackboneAdapter(weights_path=str(path))
    assert BackboneAdapter(feature_dim=32).project.out_features == 32


# ---------------------------------------------------------------------------
# checkpoints


def _trained_like(seed=0):
    model = init_rank_model(SMALL, seed)
    model.train_cfg = TrainConfig(epochs=3)
    model.epoch, model.val_accuracy = 2, 0.875
    return model


def test_rank_checkpoint_round_trip(tmp_path):
    model = _trained_like()
    path = save_rank_model(model, tmp_path / "r.pt", config={"seed": 1}, upstream={"m": "x"})
    loaded = load_rank_model(path)
    for (k, v), w in zip(model.state_dict().items(), loaded.state_dict().values()):
        assert torch.equal(v, w), k
    assert loaded.enc_cfg == model.enc_cfg
    assert loaded.train_cfg == model.train_cfg
    assert (loaded.epoch, loaded.val_accuracy) == (2, 0.875)
    assert loaded.config == {"seed": 1}
    x = torch.rand(3, 3, 24, 24)
    assert torch.equal(loaded(x), model.eval()(x))


def test_rank_checkpoint_bytes_are_deterministic(tmp_path):
    a = save_rank_model(_trained_like(), tmp_path / "a.pt")
    b = save_rank_model(_trained_like(), tmp_path / "b.pt")
    assert a.read_bytes() == b.read_bytes()


@pytest.mark.parametrize("offset", [100, -50])
def test_corrupt_checkpoint_raises_digest_error(tmp_path, offset):
    path = save_rank_model(_trained_like(), tmp_path / "r.pt")
    data = bytearray(path.read_bytes())
    data[offset] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(DigestMismatchError) as info:
        load_rank_model(path)
    assert str(path) in str(info.value) and info.value.exit_code == 4


def test_tampered_tensor_is_detected(tmp_path):
    path = save_rank_model(_trained_like(), tmp_path / "r.pt")
    blob = torch.load(path, weights_only=True)
    blob["state"]["decoder.weight"][0] += 1.0
    torch.save(blob, path)
    with pytest.raises(DigestMismatchError):
        load_rank_model(path)


def test_wrong_kind_is_rejected(tmp_path):
    rank = save_rank_model(_trained_like(), tmp_path / "r.pt")
    with pytest.raises(DigestMismatchError):
        load_probe(rank)
    with pytest.raises(FileNotFoundError):
        load_rank_model(tmp_path / "missing.pt")


def test_probe_checkpoint_round_trip_and_pairing(tmp_path):
    model = _trained_like()
    rank = save_rank_model(model, tmp_path / "ck" / "r.pt")
    probe = ProbeModel(model, np.linspace(-1, 1, 64), 3.5, TrainConfig(epochs=2))
    path = save_probe(probe, tmp_path / "ck" / "p.pt", rank, config={"a": 1})
    loaded = load_probe(path)
    assert np.array_equal(loaded.weight, probe.weight) and loaded.bias == 3.5
    assert loaded.rank_digest == file_digest(rank)
    assert loaded.train_cfg == TrainConfig(epochs=2)
    # the rank reference is relative, so the pair can move together
    moved = tmp_path / "moved"
    (tmp_path / "ck").rename(moved)
    assert load_probe(moved / "p.pt").bias == 3.5


def test_probe_refuses_a_different_rank_checkpoint(tmp_path):
    rank = save_rank_model(_trained_like(0), tmp_path / "r.pt")
    probe = ProbeModel(load_rank_model(rank), np.zeros(64))
    path = save_probe(probe, tmp_path / "p.pt", rank)
    save_rank_model(_trained_like(1), tmp_path / "r.pt")
    with pytest.raises(DigestMismatchError, match="r.pt"):
        load_probe(path)
    other = save_rank_model(_trained_like(0), tmp_path / "other.pt")
    assert load_probe(path, rank_path=other).bias == 0.0


def test_custom_encoders_are_not_checkpointable_silently(tmp_path):
    # a model with a non-standard encoder cannot be rebuilt from its config
    model = mean_intensity_model()
    path = save_rank_model(model, tmp_path / "m.pt")
    with pytest.raises(RuntimeError):
        load_rank_model(path)
