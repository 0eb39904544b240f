import pytest

from textdissect import config
from textdissect.agents import ScriptedChat
from textdissect.errors import ConfigError
from textdissect.providers.http import HttpChat


def test_defaults_resolve():
    cfg = config.resolve()
    assert cfg["run"]["tau_best"] == 0.01 and cfg["run"]["m"] == 5 and cfg["run"]["k"] == 10
    assert cfg["run"]["early_stop_consecutive"] == 10 and cfg["run"]["max_steps"] == 1000


def test_layering_order(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[run]\nseed = 3\nk = 4\n")
    cfg = config.resolve(p, ["run.k=6", "run.init_prompt=a dog"], preset=config.SLICE_PRESET)
    assert cfg["run"]["seed"] == 3 and cfg["run"]["k"] == 6
    assert cfg["run"]["init_prompt"] == "a dog" and cfg["run"]["tau_best"] == 0.9


def test_unknown_and_bad_keys(tmp_path):
    with pytest.raises(ConfigError, match="run.bogus"):
        config.resolve(overrides=["run.bogus=1"])
    with pytest.raises(ConfigError):
        config.resolve(overrides=["nonsense"])
    with pytest.raises(ConfigError):
        config.resolve(tmp_path / "missing.toml")
    with pytest.raises(ConfigError):
        config.resolve(overrides=["run.top_k=9"])


def test_parse_override_literals():
    assert config.parse_override("run.epsilon=1e-3") == (["run", "epsilon"], 1e-3)
    assert config.parse_override("simulation.vocabulary=['a','b']") == (["simulation", "vocabulary"], ["a", "b"])
    assert config.parse_override("run.init_prompt=a dog") == (["run", "init_prompt"], "a dog")


def test_http_mode_requires_endpoints(monkeypatch):
    for var in config.ENV_URLS.values():
        monkeypatch.delenv(var, raising=False)
    cfg = config.resolve(overrides=["providers.mode=http"])
    with pytest.raises(ConfigError, match="providers.chat_url"):
        config.build_providers(cfg)
    monkeypatch.setenv("UNBOX_CHAT_URL", "http://chat")
    monkeypatch.setenv("UNBOX_GEN_URL", "http://gen")
    monkeypatch.setenv("UNBOX_CLF_URL", "http://clf")
    monkeypatch.setenv("UNBOX_CHAT_KEY", "secret")
    prov = config.build_providers(cfg)
    assert isinstance(prov.chat, HttpChat) and prov.chat.key == "secret" and prov.embedder is None


def test_simulation_providers_and_worlds(tmp_path):
    prov = config.build_providers(config.resolve(), with_captioner=True)
    assert isinstance(prov.chat, ScriptedChat) and prov.captioner is not None
    with pytest.raises(ConfigError):
        config.load_world(config.resolve(overrides=[f"simulation.world='{tmp_path / 'none.json'}'"]))
    assert config.load_world(config.resolve(preset=config.SLICE_PRESET)).class_count == 2
