"""Run configuration: built-in defaults < config file < command-line flags."""

from __future__ import annotations

import copy
import difflib
import json
from dataclasses import dataclass
from pathlib import Path

from clapaug.errors import ConfigError

DEFAULTS: dict[str, dict] = {
    "model": {
        "feature_dim": 64,
        "vocab_buckets": 32768,
        "token_embed_dim": 64,
        "hidden_dim": 128,
        "embed_dim": 64,
        "temperature_init": 1 / 0.07,
        "temperature_max": 100.0,
    },
    "train": {
        "batch_size": 32,
        "epochs": 50,
        "steps": None,
        "learning_rate": 5e-4,
        "seed": 0,
        "checkpoint_every": 0,
    },
    "augment": {
        "p": 0.4,
        "k": 4,
        "in_context": 5,
    },
    "prompt": {
        "t": 3,
        "n": 4,
        "template": "The sound of a {label}",
    },
    "eval": {
        "n_prompts": 2,
        "seed": 0,
        "ks": [1, 5, 10],
    },
    "llm": {
        "endpoint": "http://localhost:8000/v1/chat/completions",
        "model": "llama-3.1-8b-instruct",
        "api_key_env": "LLM_API_KEY",
        "max_in_flight": 4,
        "timeout": 60.0,
        "retries": 3,
        "backoff_base": 1.0,
        "backoff_factor": 2.0,
        "temperature": 0.7,
    },
}

# keys whose default is None still need a declared type
_NULLABLE_TYPES = {("train", "steps"): int}


def _expected_type(section: str, key: str):
    default = DEFAULTS[section][key]
    if default is None:
        return _NULLABLE_TYPES[(section, key)]
    return type(default)


def _coerce(section: str, key: str, value):
    where = f"{section}.{key}"
    expected = _expected_type(section, key)
    if value is None:
        if DEFAULTS[section][key] is None:
            return None
        raise ConfigError(f"{where}: null is not allowed")
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {type(value).__name__}")
        return float(value)
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {type(value).__name__}")
        return value
    if expected is list:
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{where}: expected a list of integers")
        return list(value)
    if not isinstance(value, expected):
        raise ConfigError(f"{where}: expected {expected.__name__}, got {type(value).__name__}")
    return value


def _unknown(name: str, candidates) -> ConfigError:
    close = difflib.get_close_matches(name, list(candidates), n=1)
    hint = f"; did you mean {close[0]!r}?" if close else ""
    return ConfigError(f"unknown config key {name!r}{hint}")


def _split_key(dotted: str) -> tuple[str, str]:
    section, _, key = dotted.partition(".")
    if section not in DEFAULTS:
        raise _unknown(section, DEFAULTS)
    if key not in DEFAULTS[section]:
        raise _unknown(key, DEFAULTS[section])
    return section, key


@dataclass
class ResolvedConfig:
    values: dict[str, dict]
    sources: dict[str, dict]

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def echo(self) -> str:
        """The resolved values as canonical JSON; loadable as a config file."""
        return json.dumps(self.values, indent=2, sort_keys=True) + "\n"

    def sources_echo(self) -> str:
        return json.dumps(self.sources, indent=2, sort_keys=True) + "\n"

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        (out_dir / "config.json").write_text(self.echo())
        (out_dir / "config_sources.json").write_text(self.sources_echo())


def load_config(path=None, overrides: dict | None = None) -> ResolvedConfig:
    """Resolve a config file (JSON, optional) plus ``{"section.key": value}`` overrides."""
    values = copy.deepcopy(DEFAULTS)
    sources = {s: {k: "default" for k in keys} for s, keys in DEFAULTS.items()}

    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8") or "{}")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc.msg}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config document must be an object of sections")
        for section, entries in raw.items():
            if section not in DEFAULTS:
                raise _unknown(section, DEFAULTS)
            if not isinstance(entries, dict):
                raise ConfigError(f"config section {section!r} must be an object")
            for key, value in entries.items():
                if key not in DEFAULTS[section]:
                    raise _unknown(key, DEFAULTS[section])
                values[section][key] = _coerce(section, key, value)
                sources[section][key] = "file"

    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, key = _split_key(dotted)
        values[section][key] = _coerce(section, key, value)
        sources[section][key] = "flag"

    return ResolvedConfig(values, sources)
