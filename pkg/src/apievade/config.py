"""INI-style experiment manifests with a fixed schema.

Every key has a type and a default; unknown sections or keys are rejected
before anything runs. Command-line overrides use ``section.key=value``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from typing import Any, Callable, Optional

from .errors import ConfigError


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.replace(",", " ").split())


def _strs(s: str) -> tuple[str, ...]:
    return tuple(x for x in s.replace(",", " ").split())


def _opt(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    def inner(s: str):
        return None if s.strip().lower() in ("", "none") else parse(s)
    return inner


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: str
    doc: str


SCHEMA: dict[str, dict[str, Key]] = {
    "general": {
        "seed": Key(int, "7", "master seed; every random stream is derived from it"),
    },
    "paths": {
        "corpus": Key(str, "corpus.jsonl", "corpus file (programs go to <stem>.programs.jsonl)"),
        "oracle": Key(str, "plain.model", "oracle (attacker-side) model file"),
        "target": Key(str, "triple.model", "black-box target model file"),
        "reports": Key(str, "reports", "directory for report files and figures"),
    },
    "corpus": {
        "n_benign": Key(int, "500", "benign programs"),
        "n_malicious": Key(int, "500", "malicious programs"),
        "min_len": Key(int, "20", "minimum observed trace length (>= 15)"),
        "max_len": Key(int, "100", "maximum observed trace length"),
        "nondet_level": Key(float, "0.5", "nondeterminism in [0, 1]"),
        "vocab_size": Key(int, "300", "API vocabulary size"),
    },
    "model": {
        "window": Key(int, "64", "window length n"),
        "embed_dim": Key(int, "16", "embedding width d"),
        "hidden": Key(int, "32", "GRU units per direction"),
        "threshold": Key(float, "0.5", "malware decision threshold"),
    },
    "train": {
        "epochs": Key(int, "20", "training epochs"),
        "lr": Key(float, "0.05", "learning rate"),
        "batch": Key(int, "16", "mini-batch size"),
        "momentum": Key(float, "0.9", "SGD momentum"),
        "clip_norm": Key(float, "5.0", "gradient norm clip"),
    },
    "attack": {
        "attack": Key(str, "ps-fgsm", "ps-fgsm | gradient-random-pos | random"),
        "cadence": Key(int, "4", "greatest-absolute position rule every c-th iteration"),
        "max_injections_per_window": Key(int, "800", "per-window injection cap n_A"),
        "overhead_limit": Key(float, "0.20", "injection budget as a fraction of trace length"),
        "mode": Key(str, "stop-on-evasion", "stop-on-evasion | exhaust-budget"),
    },
    "experiment": {
        "attacks": Key(_strs, "ps-fgsm gradient-random-pos random", "attacks (feature space)"),
        "strategies": Key(_strs, "lkb bco", "planners (problem space)"),
        "b": Key(int, "5", "executions per program before and after patching"),
        "overhead_limits": Key(_floats, "0.20", "overhead limits as fractions"),
        "arsenal_buckets": Key(_floats, "0 0.05 0.10 0.15 1", "arsenal-size bucket edges (fraction of vocab)"),
        "thresholds": Key(_floats, "", "target thresholds; empty = the target's own"),
        "split": Key(str, "test", "corpus split to attack"),
        "nondet_level": Key(_opt(float), "none", "override program nondeterminism"),
        "max_samples": Key(_opt(int), "none", "cap on attacked samples"),
        "bco_rounds": Key(int, "10", "BCO round limit"),
        "figures": Key(_bool, "yes", "render figures next to reports"),
    },
}


class Config:
    """Parsed, typed view of a manifest: ``cfg["train"]["epochs"]``."""

    def __init__(self, values: dict[str, dict[str, Any]]):
        self.values = values

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def to_record(self) -> dict:
        return {s: dict(v) for s, v in self.values.items()}


def _parse_value(section: str, key: str, raw: str) -> Any:
    try:
        return SCHEMA[section][key].parse(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc


def load_config(path: Optional[str] = None, overrides: Optional[list[str]] = None) -> Config:
    raw: dict[str, dict[str, str]] = {s: {k: key.default for k, key in keys.items()}
                                      for s, keys in SCHEMA.items()}
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section in cp.sections():
            if section not in SCHEMA:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, value in cp.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
                raw[section][key] = value
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not section.key=value")
        name, value = item.split("=", 1)
        section, key = name.strip().split(".", 1)
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown override key {name!r}")
        raw[section][key] = value
    values = {s: {k: _parse_value(s, k, v) for k, v in keys.items()} for s, keys in raw.items()}
    return Config(values)


def schema_doc() -> str:
    """Plain-text schema listing, used by ``--help`` and the README."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for k, key in keys.items():
            lines.append(f"  {k} = {key.default or '(empty)'}    # {key.doc}")
    return "\n".join(lines)
