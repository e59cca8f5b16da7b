"""Flat ``key=value`` run configuration with per-task presets.

A run is described by one map covering the trainer, the SAC core, the environment,
the dataset path and the output directory.  Files hold one ``key = value`` per line
(``#`` starts a comment); command-line ``--set key=value`` pairs override them.
"""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .errors import ConfigurationError
from .meta import MoorlConfig
from .sac import SacConfig

MOORL_KEYS = tuple(f.name for f in fields(MoorlConfig) if f.name != "sac")
SAC_KEYS = tuple(f.name for f in fields(SacConfig))
RUN_KEYS = ("algo", "env", "dataset", "out_dir")
ALL_KEYS = RUN_KEYS + MOORL_KEYS + tuple(f"sac.{k}" for k in SAC_KEYS)

ALGOS = ("moorl", "sac", "mixed")

_SPARSE_GRID = {
    "hidden": "32,32",
    "sac.use_cdq": "true", "sac.use_entropy_backup": "false",
}

# task presets applied before the config file; gamma always follows the environment
PRESETS = {
    "grid1x2": _SPARSE_GRID,
    "grid5": _SPARSE_GRID,
    "grid8": _SPARSE_GRID,
    "pointmass": {"hidden": "64,64", "batch_size": "64"},
}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(kind, text: str):
    if kind is bool:
        return _parse_bool(text)
    if kind is int:
        return int(float(text)) if "e" in text.lower() else int(text)
    if kind is float:
        return float(text)
    if kind == "hidden":
        return tuple(int(h) for h in text.split(",") if h.strip())
    if kind == "optional_float":
        return None if text.strip().lower() in ("", "none", "auto") else float(text)
    return text


_TYPES = {
    "total_steps": int, "inner_steps": int, "inner_lr": float, "meta_lr": float,
    "offline_prob": float, "batch_size": int, "warmup_steps": int, "eval_every": int,
    "eval_episodes": int, "seed": int, "hidden": "hidden", "env_steps_per_epoch": int,
    "buffer_capacity": int,
    "sac.gamma": float, "sac.ema_rho": float, "sac.lr": float,
    "sac.target_entropy": "optional_float", "sac.use_cdq": bool, "sac.use_entropy_backup": bool,
    "sac.init_alpha": float,
}


def parse_pairs(lines, source: str = "<args>") -> dict:
    """``key=value`` strings to a dict; unknown keys are rejected."""
    out = {}
    for i, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigurationError(f"{source}:{i}: expected key=value, got {raw.strip()!r}")
        if key not in ALL_KEYS:
            raise ConfigurationError(f"{source}:{i}: unknown config key {key!r}")
        out[key] = value
    return out


def read_config_file(path) -> dict:
    path = Path(path)
    return parse_pairs(path.read_text().splitlines(), str(path))


class RunConfig:
    """Resolved string map plus typed views for the trainer."""

    def __init__(self, values: dict):
        unknown = set(values) - set(ALL_KEYS)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        self.values = dict(values)
        self.moorl_config()  # validate eagerly

    @classmethod
    def resolve(cls, env_id: str | None = None, gamma: float | None = None, file_values=None,
                overrides=None) -> "RunConfig":
        """Layering: preset for the env, then the config file, then overrides."""
        file_values = dict(file_values or {})
        overrides = dict(overrides or {})
        env_id = overrides.get("env") or file_values.get("env") or env_id
        values = dict(PRESETS.get(env_id or "", {}))
        if gamma is not None:
            values["sac.gamma"] = repr(float(gamma))
        values.update(file_values)
        values.update(overrides)
        if env_id:
            values["env"] = env_id
        return cls(values)

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def _typed(self, key: str):
        try:
            return _convert(_TYPES.get(key, str), self.values[key])
        except ValueError as exc:
            raise ConfigurationError(f"bad value for {key}: {exc}") from exc

    def sac_config(self) -> SacConfig:
        kw = {k: self._typed(f"sac.{k}") for k in SAC_KEYS if f"sac.{k}" in self.values}
        return SacConfig(**kw)

    def moorl_config(self) -> MoorlConfig:
        kw = {k: self._typed(k) for k in MOORL_KEYS if k in self.values}
        return MoorlConfig(sac=self.sac_config(), **kw)

    def resolved_lines(self) -> list[str]:
        """Every key with its effective value (defaults filled in), sorted."""
        cfg = self.moorl_config()
        eff = {k: self.values.get(k, "") for k in RUN_KEYS}
        for k in MOORL_KEYS:
            v = getattr(cfg, k)
            eff[k] = ",".join(str(h) for h in v) if k == "hidden" else _render(v)
        for k in SAC_KEYS:
            eff[f"sac.{k}"] = _render(getattr(cfg.sac, k))
        return [f"{k}={eff[k]}" for k in sorted(eff)]


def _render(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)
