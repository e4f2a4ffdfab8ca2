import json

import pytest

from cvar_distill import config as cfgmod
from cvar_distill.errors import ConfigError


def test_defaults_and_presets():
    cfg = cfgmod.build_config()
    assert cfg["schema_version"] == cfgmod.SCHEMA_VERSION
    assert cfg["universe"]["n_assets"] == 36
    desk = cfgmod.build_config(preset="desk")
    assert desk["universe"]["n_assets"] == 8 and desk["grid"]["model_seeds"] == [0, 1, 2]
    # preset does not leak into the shared defaults
    assert cfgmod.DEFAULTS["universe"]["n_assets"] == 36
    with pytest.raises(ConfigError, match="preset"):
        cfgmod.build_config(preset="huge")


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="train.learnign_rate"):
        cfgmod.build_config({"train": {"learnign_rate": 0.1}})
    with pytest.raises(ConfigError, match="'bogus'"):
        cfgmod.build_config({"bogus": 1})


@pytest.mark.parametrize("override, key", [
    ({"train": {"epochs_s0": "200"}}, "train.epochs_s0"),
    ({"train": {"epochs_s0": 2.5}}, "train.epochs_s0"),
    ({"network": {"hidden": 64}}, "network.hidden"),
    ({"teacher": True}, "teacher"),
    ({"train": {"beta": "small"}}, "train.beta"),
    ({"constraints": {"w_max": True}}, "constraints.w_max"),
])
def test_type_errors_name_the_key(override, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        cfgmod.build_config(override)


def test_int_promotes_to_float_and_nullables():
    cfg = cfgmod.build_config({"constraints": {"w_max": 1}, "train": {"beta": 1, "batch_size": 32}})
    assert isinstance(cfg["constraints"]["w_max"], float)
    assert isinstance(cfg["train"]["beta"], float)
    assert cfg["train"]["batch_size"] == 32
    assert cfgmod.build_config({"train": {"batch_size": None}})["train"]["batch_size"] is None


def test_schema_version_checked():
    with pytest.raises(ConfigError, match="schema_version"):
        cfgmod.build_config({"schema_version": 99})


def test_hash_ignores_key_order():
    a = cfgmod.build_config({"train": {"epochs_s0": 3, "cycles": 2}})
    b = cfgmod.build_config({"train": {"cycles": 2, "epochs_s0": 3}})
    shuffled = json.loads(json.dumps(b))
    shuffled = {k: shuffled[k] for k in reversed(list(shuffled))}
    assert cfgmod.config_hash(a) == cfgmod.config_hash(shuffled)
    assert cfgmod.config_hash(a) != cfgmod.config_hash(cfgmod.build_config())


def test_set_dotted():
    cfg = cfgmod.set_dotted(cfgmod.build_config(), "synth.horizon", 900)
    assert cfg["synth"]["horizon"] == 900
    with pytest.raises(ConfigError, match="synth.horizn"):
        cfgmod.set_dotted(cfg, "synth.horizn", 900)
    with pytest.raises(ConfigError):
        cfgmod.set_dotted(cfg, "synth.horizon", "long")


def test_load_config_file_and_env_dir(tmp_path, monkeypatch):
    (tmp_path / "run.json").write_text(json.dumps({"preset": "desk", "synth": {"horizon": 300}}))
    cfg = cfgmod.load_config(tmp_path / "run.json")
    assert cfg["synth"]["horizon"] == 300 and cfg["universe"]["n_assets"] == 8

    monkeypatch.chdir(tmp_path / "..")
    monkeypatch.setenv(cfgmod.CONFIG_DIR_ENV, str(tmp_path))
    assert cfgmod.load_config("run.json") == cfg


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        cfgmod.load_config(tmp_path / "absent.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        cfgmod.load_config(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text("[1, 2]")
    with pytest.raises(ConfigError, match="object"):
        cfgmod.load_config(tmp_path / "list.json")


def test_dump_round_trip():
    cfg = cfgmod.build_config(preset="desk")
    assert cfgmod.build_config(json.loads(cfgmod.dump_config(cfg))) == cfg
