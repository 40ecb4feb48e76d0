"""Run configuration files.

A config file is plain ``key = value`` lines, optionally under a
``[federation]`` header; ``#`` and ``;`` start comments.  Every key names a
:class:`~evifed.federation.FedConfig` field.  ``T`` is required; all other
fields fall back to their defaults.  Example::

    T = 4
    rounds = 10
    mu = 0.2
    prompted_blocks = 0, 1, 2, 3
    lambda_ramp = none
"""
from __future__ import annotations

import configparser
from dataclasses import fields
from pathlib import Path

from evifed.errors import ConfigError
from evifed.federation import FedConfig

SECTION = "federation"
REQUIRED = ("T",)

_INT = {"T", "rounds", "step_l", "step_c", "prompt_len", "head_hidden", "batch_size",
        "per_client_n", "hidden_dim", "blocks", "heads", "seed_data", "seed_init",
        "seed_shuffle", "workers"}
_FLOAT = {"mu", "lam", "prompt_init_std", "dropout", "prompt_lr", "head_lr",
          "local_lr_decay", "dluc_lr", "dluc_lr_decay"}
_BOOL = {"deterministic"}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_value(name: str, raw: str):
    raw = raw.strip()
    if name in _INT:
        return int(raw)
    if name in _FLOAT:
        return float(raw)
    if name in _BOOL:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if name == "lambda_ramp":
        return None if raw.lower() in ("", "none") else int(raw)
    if name == "prompted_blocks":
        return tuple(int(p) for p in raw.replace(",", " ").split())
    return raw


def parse_config_text(text: str, source: str = "<config>") -> FedConfig:
    """Parse config text; raises ConfigError listing every bad field."""
    if not any(line.strip().startswith("[") for line in text.splitlines()):
        text = f"[{SECTION}]\n{text}"
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: unreadable config: {exc}") from exc
    unknown_sections = [s for s in parser.sections() if s != SECTION]
    if unknown_sections:
        raise ConfigError(f"{source}: unknown section(s) {unknown_sections}; use [{SECTION}]")
    known = {f.name for f in fields(FedConfig)}
    values, problems = {}, []
    items = parser.items(SECTION) if parser.has_section(SECTION) else []
    for key, raw in items:
        if key not in known:
            problems.append(f"{key}: unknown field")
            continue
        try:
            values[key] = _parse_value(key, raw)
        except ValueError as exc:
            problems.append(f"{key}: bad value {raw!r} ({exc})")
    for key in REQUIRED:
        if key not in values and not any(p.startswith(f"{key}:") for p in problems):
            problems.append(f"{key}: missing required field")
    if problems:
        raise ConfigError(f"{source}: " + "; ".join(problems))
    try:
        return FedConfig(**values)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path) -> FedConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from exc
    return parse_config_text(text, str(p))


def dump_config(cfg: FedConfig) -> str:
    """Inverse of :func:`parse_config_text` for every field."""
    lines = [f"[{SECTION}]"]
    for name, value in cfg.to_dict().items():
        if name == "prompted_blocks":
            value = ", ".join(str(b) for b in value)
        elif value is None:
            value = "none"
        elif isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"
