"""Layered configuration: built-in defaults, then a TOML file, then dotted overrides.

Secrets come from the environment only. Endpoint URLs may sit in the file or
come from the environment when the file leaves them empty.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict
from importlib import resources
from pathlib import Path

from .errors import ConfigError
from .optimizer import RunConfig

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

ENV_URLS = {
    "chat_url": "UNBOX_CHAT_URL",
    "gen_url": "UNBOX_GEN_URL",
    "clf_url": "UNBOX_CLF_URL",
    "emb_url": "UNBOX_EMB_URL",
    "cap_url": "UNBOX_CAP_URL",
}
ENV_KEYS = {"chat": "UNBOX_CHAT_KEY", "gen": "UNBOX_GEN_KEY"}

DEFAULTS = {
    "run": asdict(RunConfig()),
    "providers": {
        "mode": "simulation",
        "chat_url": "",
        "chat_model": "gpt-oss:120b",
        "chat_temperature": 0.7,
        "gen_url": "",
        "gen_steps": 1,
        "clf_url": "",
        "clf_upload": "json",
        "emb_url": "",
        "cap_url": "",
        "timeout": 120.0,
        "max_concurrency": 4,
        "min_interval": 0.0,
        "retry_attempts": 3,
        "retry_base_delay": 0.5,
    },
    "simulation": {
        "world": "builtin:demo",  # world JSON path, or builtin:demo / builtin:waterbirds
        "vocabulary": [],  # extra words offered to the scripted agents
        "blocked_words": [],
        "embed_dim": 2048,
        "embed_seed": 0,
        "deterministic_clock": True,
    },
    "paths": {"signal_tables": "", "stop_words": "", "templates": ""},
    "slice": {"domain": "bird", "exclude_prior": True},
}


def _deep_merge(base: dict, upd: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in upd.items():
        name = f"{where}{key}"
        if key not in out:
            raise ConfigError(f"unknown configuration key {name!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"configuration key {name!r} must be a table")
            out[key] = _deep_merge(out[key], value, name + ".")
        else:
            out[key] = value
    return out


def parse_override(item: str) -> tuple:
    """``run.max_steps=50`` -> (["run", "max_steps"], 50). Values are TOML literals, else strings."""
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {item!r} is not of the form key=value")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key.strip().split("."), value


def _nest(path, value) -> dict:
    doc = value
    for part in reversed(path):
        doc = {part: doc}
    return doc


SLICE_PRESET = {
    "run": {"mode": "slice-discover", "tau_best": 0.9, "tau_high": 0.9},
    "simulation": {"world": "builtin:waterbirds"},
}
BUILTIN_WORLDS = {"builtin:demo": "demo_world.json", "builtin:waterbirds": "waterbirds_world.json"}


def resolve(config_path=None, overrides=(), preset: dict | None = None) -> dict:
    """Merge defaults, an optional command preset, the file, then overrides (last wins)."""
    cfg = copy.deepcopy(DEFAULTS)
    if preset:
        cfg = _deep_merge(cfg, preset)
    if config_path:
        try:
            file_doc = tomllib.loads(Path(config_path).read_text("utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {config_path} not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {config_path}: {exc}") from None
        cfg = _deep_merge(cfg, file_doc)
    for item in overrides:
        path, value = parse_override(item) if isinstance(item, str) else item
        cfg = _deep_merge(cfg, _nest(path, value))
    run_config(cfg)  # validate early
    return cfg


def run_config(cfg: dict) -> RunConfig:
    try:
        return RunConfig.from_dict(cfg["run"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def endpoint(cfg: dict, name: str, required: bool = True) -> str:
    url = cfg["providers"].get(name) or os.environ.get(ENV_URLS[name], "")
    if required and not url:
        raise ConfigError(f"missing endpoint: set providers.{name} or {ENV_URLS[name]}")
    return url


def load_world(cfg: dict):
    from .providers.simulation import LexicalWorldSpec

    path = cfg["simulation"]["world"] or "builtin:demo"
    try:
        if path in BUILTIN_WORLDS:
            text = resources.files("textdissect").joinpath(f"data/{BUILTIN_WORLDS[path]}").read_text("utf-8")
        else:
            text = Path(path).read_text("utf-8")
    except FileNotFoundError:
        raise ConfigError(f"world file {path} not found") from None
    try:
        return LexicalWorldSpec.from_dict(json.loads(text))
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"invalid world specification: {exc}") from None


def build_providers(cfg: dict, with_captioner: bool = False):
    """Construct the provider set named by ``providers.mode``."""
    from .agents import ScriptedChat
    from .providers import Providers, RetryPolicy
    from .providers import http, simulation

    p = cfg["providers"]
    retry = RetryPolicy(attempts=int(p["retry_attempts"]), base_delay=float(p["retry_base_delay"]))
    if p["mode"] == "simulation":
        sim = cfg["simulation"]
        world = load_world(cfg)
        vocab = world.vocabulary() + [w.lower() for w in sim["vocabulary"]]
        return Providers(
            generator=simulation.IdentityGenerator(sim["blocked_words"]),
            classifier=simulation.LexicalWorldClassifier(world),
            chat=ScriptedChat(vocab, seed=int(cfg["run"]["seed"])),
            embedder=simulation.ToyEmbedder(int(sim["embed_dim"]), int(sim["embed_seed"])),
            captioner=simulation.SimCaptioner(world) if with_captioner else None,
            retry=retry,
        )
    if p["mode"] != "http":
        raise ConfigError(f"providers.mode must be 'http' or 'simulation', got {p['mode']!r}")
    limiter = http.RateLimiter(int(p["max_concurrency"]), float(p["min_interval"]))
    kw = {"timeout": float(p["timeout"]), "limiter": limiter}
    chat = http.HttpChat(endpoint(cfg, "chat_url"), p["chat_model"], os.environ.get(ENV_KEYS["chat"]),
                         temperature=float(p["chat_temperature"]), **kw)
    gen = http.HttpGenerator(endpoint(cfg, "gen_url"), os.environ.get(ENV_KEYS["gen"]),
                             steps=int(p["gen_steps"]), seed=int(cfg["run"]["seed"]), **kw)
    clf = http.HttpClassifier(endpoint(cfg, "clf_url"), upload=p["clf_upload"], **kw)
    emb_url = endpoint(cfg, "emb_url", required=False)
    cap_url = endpoint(cfg, "cap_url", required=False)
    return Providers(
        generator=gen,
        classifier=clf,
        chat=chat,
        embedder=http.HttpEmbedder(emb_url, **kw) if emb_url else None,
        captioner=http.HttpCaptioner(cap_url, **kw) if (with_captioner and cap_url) else None,
        retry=retry,
    )


def build_embedder(cfg: dict):
    from .providers import http, simulation

    if cfg["providers"]["mode"] == "simulation":
        sim = cfg["simulation"]
        return simulation.ToyEmbedder(int(sim["embed_dim"]), int(sim["embed_seed"]))
    p = cfg["providers"]
    return http.HttpEmbedder(endpoint(cfg, "emb_url"), timeout=float(p["timeout"]))
