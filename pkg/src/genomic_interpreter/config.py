"""Run configuration: ``key = value`` text with [model], [train] and [bench] sections.

Example::

    [model]
    d_model = 16
    window = 4
    heads = 2
    width_cap = 32

    [train]
    steps = 1000
    batch_size = 8
    lr = 0.0003
    seed = 0

Keys left out fall back to the defaults below.  ``n``, ``m``, ``tracks`` and
``track_groups`` may be omitted from [model]; they are then taken from the
dataset.  Overrides are ``section.key=value`` strings and win over the file.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .model import InterpreterConfig, make_config
from .train import TrainHyper

MODEL_DEFAULTS = {
    "d_model": 16, "window": 4, "shift": None, "heads": 2, "width_cap": 32,
    "depth": None, "ff": True, "rel_bias": True, "d_in": 4,
    "n": None, "m": None, "tracks": None, "track_groups": None,
}
TRAIN_DEFAULTS = {
    "steps": 1000, "batch_size": 8, "lr": 3e-4, "t_max": None, "eta_min": 0.0,
    "clip": 1.0, "eval_every": 0, "seed": 0, "dtype": "float64",
}
BENCH_DEFAULTS = {"repeats": 5, "dtype": "float32", "depth": 4, "m": 1, "tracks": 1}

_SECTIONS = {"model": MODEL_DEFAULTS, "train": TRAIN_DEFAULTS, "bench": BENCH_DEFAULTS}


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    if raw.lower() in ("none", ""):
        return None
    if key == "track_groups":
        return [g.strip() for g in raw.split(",") if g.strip()]
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, float) or key in ("lr", "eta_min", "clip"):
        return float(raw)
    if isinstance(default, str):
        return raw
    return int(raw)


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, list):
        return ", ".join(v)
    return str(v)


@dataclass
class RunConfig:
    model: dict = field(default_factory=lambda: dict(MODEL_DEFAULTS))
    train: dict = field(default_factory=lambda: dict(TRAIN_DEFAULTS))
    bench: dict = field(default_factory=lambda: dict(BENCH_DEFAULTS))

    def set(self, section: str, key: str, raw: str) -> None:
        defaults = _SECTIONS.get(section)
        if defaults is None:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in defaults:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        try:
            getattr(self, section)[key] = _coerce(key, raw, defaults[key])
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from None

    @classmethod
    def parse(cls, text: str, overrides: list[str] | None = None) -> "RunConfig":
        cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unreadable config: {exc}") from None
        cfg = cls()
        for section in cp.sections():
            for key, raw in cp[section].items():
                cfg.set(section, key, raw)
        for item in overrides or []:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override {item!r} is not section.key=value")
            lhs, raw = item.split("=", 1)
            section, key = lhs.strip().split(".", 1)
            cfg.set(section, key, raw)
        return cfg

    @classmethod
    def load(cls, path, overrides: list[str] | None = None) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        return cls.parse(p.read_text(), overrides)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for section in _SECTIONS:
            values = getattr(self, section)
            cp[section] = {k: _format(v) for k, v in values.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def interpreter_config(self, n=None, m=None, tracks=None, track_groups=None) -> InterpreterConfig:
        """Model config; unset shape fields come from the arguments (normally the dataset)."""
        mc = self.model
        for key, given in (("n", n), ("m", m), ("tracks", tracks)):
            if mc[key] is not None and given is not None and mc[key] != given:
                raise ConfigError(f"config {key} = {mc[key]} but the data has {key} = {given}")
        n, m, tracks = mc["n"] or n, mc["m"] or m, mc["tracks"] or tracks
        if None in (n, m, tracks):
            raise ConfigError("n, m and tracks must come from the config or the data")
        groups = mc["track_groups"] or track_groups
        if groups is not None and track_groups is not None and list(groups) != list(track_groups):
            raise ConfigError(f"config track groups {groups} differ from the data's {track_groups}")
        return make_config(
            n, m, tracks, d_model=mc["d_model"], window=mc["window"], shift=mc["shift"],
            heads=mc["heads"], width_cap=mc["width_cap"], depth=mc["depth"], ff=mc["ff"],
            rel_bias=mc["rel_bias"], track_groups=groups, d_in=mc["d_in"],
        )

    def hyper(self) -> TrainHyper:
        t = self.train
        if t["steps"] < 0 or t["batch_size"] < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        return TrainHyper(
            steps=t["steps"], batch_size=t["batch_size"], lr=t["lr"], t_max=t["t_max"],
            eta_min=t["eta_min"], clip=t["clip"], eval_every=t["eval_every"],
        )
