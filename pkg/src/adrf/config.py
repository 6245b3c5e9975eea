"""Pipeline configuration: INI sections of ``key = value`` pairs.

Every key has a typed default. ``paper`` defaults are the published training
hyperparameters; ``desk`` shrinks epochs, batch sizes and frame size so the
whole pipeline runs in minutes on one CPU core.
"""
from __future__ import annotations

import configparser
from pathlib import Path

_INT, _FLOAT, _BOOL, _INTS, _STRS = "int", "float", "bool", "ints", "strs"

SCHEMA = {
    "corpus": {
        "n_normal": _INT, "n_abnormal": _INT, "imu_length": _INT,
        "frame_length": _INT, "frame_size": _INT,
    },
    "imu": {
        "autoencoder_hidden": _INTS, "forecaster_hidden": _INT,
        "epochs": _INT, "lr": _FLOAT, "batch": _INT,
    },
    "vision": {
        "codec_epochs": _INT, "codec_lr": _FLOAT, "codec_batch": _INT, "augment": _BOOL,
        "forecaster_epochs": _INT, "forecaster_lr": _FLOAT, "forecaster_batch": _INT,
        "cgan_epochs": _INT, "cgan_lr": _FLOAT, "discriminator_lr": _FLOAT, "cgan_batch": _INT,
        "lambda": _FLOAT, "discriminator_hidden": _INT,
        "n_threshold": _INT, "n_test": _INT, "mirror": _BOOL,
    },
    "calibration": {"confidence": _FLOAT, "candidates": _STRS},
}

PAPER = {
    "corpus": {"n_normal": "6", "n_abnormal": "6", "imu_length": "600",
               "frame_length": "80", "frame_size": "128"},
    "imu": {"autoencoder_hidden": "128, 64", "forecaster_hidden": "64",
            "epochs": "500", "lr": "0.01", "batch": "1"},
    "vision": {"codec_epochs": "100", "codec_lr": "0.001", "codec_batch": "16", "augment": "true",
               "forecaster_epochs": "100", "forecaster_lr": "0.001", "forecaster_batch": "16",
               "cgan_epochs": "20", "cgan_lr": "0.0001", "discriminator_lr": "0.0001", "cgan_batch": "16",
               "lambda": "100", "discriminator_hidden": "64",
               "n_threshold": "100", "n_test": "100", "mirror": "true"},
    "calibration": {"confidence": "0.95",
                    "candidates": "birnbaum_saunders, johnson_su, normal_inverse_gaussian, normal, gamma"},
}

DESK_OVERRIDES = {
    "corpus": {"imu_length": "600", "frame_length": "60", "frame_size": "32"},
    "imu": {"epochs": "40", "batch": "64"},
    "vision": {"codec_epochs": "20", "codec_batch": "32", "forecaster_epochs": "30",
               "forecaster_batch": "32", "cgan_batch": "32"},
}

SCALES = ("desk", "paper")


class ConfigError(ValueError):
    pass


def _parse(kind: str, raw: str, name: str):
    try:
        if kind == _INT:
            return int(raw)
        if kind == _FLOAT:
            return float(raw)
        if kind == _BOOL:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == _INTS:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return tuple(v.strip() for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{name}: cannot read {raw!r} as {kind}") from None


class Config:
    """Typed view over the merged settings; ``cfg["imu.epochs"]``."""

    def __init__(self, values: dict, scale: str = "desk"):
        self.scale = scale
        self._raw = {s: dict(v) for s, v in values.items()}

    def __getitem__(self, dotted: str):
        section, _, key = dotted.partition(".")
        kind = SCHEMA.get(section, {}).get(key)
        if kind is None:
            raise ConfigError(f"unknown config key {dotted!r}")
        try:
            raw = self._raw[section][key]
        except KeyError:
            raise ConfigError(f"missing config key {dotted!r}") from None
        return _parse(kind, raw, dotted)

    def section(self, name: str) -> dict:
        return {k: self[f"{name}.{k}"] for k in SCHEMA[name]}

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for s in SCHEMA:
            cp[s] = {k: self._raw[s][k] for k in SCHEMA[s] if k in self._raw.get(s, {})}
        lines = [f"# scale = {self.scale}"]
        for s in cp.sections():
            lines.append(f"[{s}]")
            lines += [f"{k} = {v}" for k, v in cp[s].items()]
            lines.append("")
        return "\n".join(lines)

    def validate(self) -> None:
        """Parse every key so typos and bad values surface before training."""
        for s, keys in SCHEMA.items():
            for k in keys:
                self[f"{s}.{k}"]


def defaults(scale: str = "desk") -> dict:
    if scale not in SCALES:
        raise ConfigError(f"unknown scale {scale!r}; choose from {SCALES}")
    values = {s: dict(v) for s, v in PAPER.items()}
    if scale == "desk":
        for s, v in DESK_OVERRIDES.items():
            values[s].update(v)
    return values


def load_config(path=None, scale: str = "desk") -> Config:
    """Defaults for ``scale`` overridden by the INI file at ``path``.

    Unknown sections and keys are rejected by name.
    """
    values = defaults(scale)
    if path is not None:
        cp = configparser.ConfigParser()
        try:
            with open(Path(path), encoding="utf-8") as fh:
                cp.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for s in cp.sections():
            if s not in SCHEMA:
                raise ConfigError(f"{path}: unknown section [{s}]")
            for k, v in cp[s].items():
                if k not in SCHEMA[s]:
                    raise ConfigError(f"{path}: unknown key {s}.{k}")
                values[s][k] = v
    cfg = Config(values, scale)
    cfg.validate()
    return cfg
