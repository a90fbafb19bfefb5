import dataclasses
import json

import numpy as np
import pytest

from hvnet.config import (ConfigError, ModelConfig, desk_config, from_dict, load_config,
                          save_config, to_dict)
from hvnet.model import HVNet
from hvnet.pointcloud_io import SceneSpec
from hvnet.weights import ArchiveError, load_weights, quantize, read_manifest, save_weights


def test_config_json_round_trip(tmp_path):
    cfg = desk_config()
    save_config(tmp_path / "c.json", cfg)
    assert load_config(tmp_path / "c.json") == cfg


def test_unknown_keys_rejected():
    d = to_dict(desk_config())
    d["backbone"]["chanels"] = [1, 2, 3]
    with pytest.raises(ConfigError, match="chanels"):
        from_dict(ModelConfig, d)


def test_wrong_types_rejected():
    d = to_dict(desk_config())
    d["q"] = 8.5
    with pytest.raises(ConfigError, match="q"):
        from_dict(ModelConfig, d)
    d = to_dict(desk_config())
    d["normalize_inputs"] = 1
    with pytest.raises(ConfigError):
        from_dict(ModelConfig, d)


def test_non_exact_grid_rejected():
    with pytest.raises(ConfigError, match="exactly"):
        ModelConfig(voxel_size=(0.3, 0.3))


def test_scales_must_double():
    with pytest.raises(ConfigError):
        dataclasses.replace(desk_config(), scales_r=(1.0, 3.0))


def test_fingerprint_tracks_architecture_only():
    cfg = desk_config()
    assert len(cfg.fingerprint()) == 16
    lr = dataclasses.replace(cfg, optimizer=dataclasses.replace(cfg.optimizer, lr=1.0))
    assert lr.fingerprint() == cfg.fingerprint()
    assert dataclasses.replace(cfg, q=16).fingerprint() != cfg.fingerprint()


def test_default_config_is_full_size():
    cfg = ModelConfig()
    assert (cfg.grid(1.0).n_L, cfg.grid(1.0).n_W) == (320, 320)
    assert cfg.scene == SceneSpec((0.0, -32.0, -3.0), (64.0, 32.0, 2.0))


def test_archive_round_trip_bit_identical(tmp_path):
    cfg = desk_config()
    model = HVNet(cfg)
    store = quantize(model.init_params(np.random.default_rng(0)))
    save_weights(tmp_path / "w.hvw", store, cfg.fingerprint())
    back = load_weights(tmp_path / "w.hvw", model.param_shapes(), cfg.fingerprint())
    assert set(back) == set(store)
    for k in store:
        assert back[k].tobytes() == store[k].tobytes()
    save_weights(tmp_path / "w2.hvw", back, cfg.fingerprint())
    assert (tmp_path / "w.hvw").read_bytes() == (tmp_path / "w2.hvw").read_bytes()


def test_archive_manifest(tmp_path):
    save_weights(tmp_path / "w.hvw", {"b": np.ones(3), "a": np.zeros((2, 2))}, "abc")
    manifest, data = read_manifest(tmp_path / "w.hvw")
    assert manifest["fingerprint"] == "abc"
    assert [e["name"] for e in manifest["params"]] == ["a", "b"]
    assert len(data) == 4 * 7
    assert np.frombuffer(data[16:], "<f4").tolist() == [1.0, 1.0, 1.0]


def test_archive_missing_parameter(tmp_path):
    save_weights(tmp_path / "w.hvw", {"a": np.zeros(2)}, "x")
    with pytest.raises(ArchiveError, match="missing parameter b"):
        load_weights(tmp_path / "w.hvw", {"a": (2,), "b": (3,)})


def test_archive_shape_mismatch(tmp_path):
    save_weights(tmp_path / "w.hvw", {"a": np.zeros(2)}, "x")
    with pytest.raises(ArchiveError, match="shape"):
        load_weights(tmp_path / "w.hvw", {"a": (3,)})


def test_archive_fingerprint_mismatch_refused(tmp_path):
    save_weights(tmp_path / "w.hvw", {"a": np.zeros(2)}, "x")
    with pytest.raises(ArchiveError, match="fingerprint"):
        load_weights(tmp_path / "w.hvw", fingerprint="y")


def test_archive_truncated_and_garbage(tmp_path):
    save_weights(tmp_path / "w.hvw", {"a": np.zeros(8)}, "x")
    raw = (tmp_path / "w.hvw").read_bytes()
    (tmp_path / "t.hvw").write_bytes(raw[:-4])
    with pytest.raises(ArchiveError, match="truncated"):
        load_weights(tmp_path / "t.hvw")
    (tmp_path / "g.hvw").write_bytes(b"not an archive at all")
    with pytest.raises(ArchiveError):
        load_weights(tmp_path / "g.hvw")


def test_quantize_is_float32_rounding():
    q = quantize({"a": np.array([0.1])})
    assert q["a"][0] == float(np.float32(0.1)) and q["a"].dtype == np.float64
