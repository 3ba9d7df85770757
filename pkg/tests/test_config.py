import pytest

from ulmtrack.config import ConfigError, default_config, from_dict, load_config, save_config


def test_seed_is_mandatory():
    with pytest.raises(ConfigError):
        from_dict({"acquisition": {"rate_hz": 85.0}})


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        from_dict({"seed": 1, "acquisition": {"rate": 85.0}})


def test_non_positive_quantities_rejected():
    with pytest.raises(ConfigError):
        default_config(1, **{"acquisition.rate_hz": 0.0})
    with pytest.raises(ConfigError):
        default_config(1, **{"acquisition.fidelity": "slow"})


def test_toml_round_trip_keeps_hash(tmp_path):
    cfg = default_config(4, **{"scene.profile.kind": "stepped", "tracking.enabled": False})
    save_config(cfg, tmp_path / "c.toml")
    again = load_config(tmp_path / "c.toml")
    assert again == cfg
    assert again.hash() == cfg.hash()


def test_hash_changes_with_any_parameter():
    a = default_config(1)
    assert a.hash() == default_config(1).hash()
    assert a.hash() != default_config(2).hash()
    assert a.hash() != default_config(1, **{"ulm.ncc_threshold": 0.6}).hash()
