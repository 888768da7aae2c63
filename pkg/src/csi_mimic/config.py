"""Experiment config files: sectioned key = value text with an explicit version.

Every key is validated before any compute starts and unknown keys are
rejected so a typo in an ablation config cannot silently fall back to a
default. Example::

    [experiment]
    version = 1
    out_dir = runs/desk
    seeds = 0, 1, 2, 3

    [channel]
    scenario = indoor
    Nc = 32

    [model]
    eta = 1/4

    [train]
    epochs = 100
    mimic_epochs = 20
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path

from .autodiff import ConfigError
from .data import ChannelConfig
from .distill import TrainPlan

CONFIG_VERSION = 1

# config key -> ChannelConfig field
_CHANNEL_KEYS = {
    "scenario": "scenario", "Nc_full": "n_subcarriers", "Nc": "n_delay", "Nt": "n_antennas",
    "min_paths": "min_paths", "max_paths": "max_paths", "first_tap": "first_tap",
    "delay_spread": "delay_spread", "seed": "seed",
}
_DATA_KEYS = ("train", "test")
_LR_KEYS = ("lr_benchmark", "lr_mimic", "lr_explore_decoder", "lr_explore_encoder")
_PLAN_KEYS = {f.name for f in fields(TrainPlan)}


@dataclass(frozen=True)
class ExperimentConfig:
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    n_train: int = 5000
    n_test: int = 1000
    codeword_size: int = 512
    plan: TrainPlan = field(default_factory=TrainPlan)
    out_dir: str = "runs"
    seeds: tuple[int, ...] = (0,)
    teacher_seed: int = 0

    @property
    def input_dims(self) -> tuple[int, int, int]:
        return (2, self.channel.n_delay, self.channel.n_antennas)

    def plan_for(self, pipeline: str, seed: int, **overrides) -> TrainPlan:
        return replace(self.plan, pipeline=pipeline, seed=seed, **overrides)


def _err(section: str, key: str, msg: str) -> ConfigError:
    return ConfigError(f"[{section}] {key}: {msg}")


def _int(section, key, raw) -> int:
    try:
        return int(raw)
    except ValueError:
        raise _err(section, key, f"expected an integer, got {raw!r}") from None


def _float(section, key, raw) -> float:
    try:
        return float(Fraction(raw.strip())) if "/" in raw else float(raw)
    except (ValueError, ZeroDivisionError):
        raise _err(section, key, f"expected a number, got {raw!r}") from None


def _bool(section, key, raw) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise _err(section, key, f"expected a boolean, got {raw!r}")


def _pair(section, key, raw) -> tuple[float, float]:
    parts = [p for p in raw.replace("->", ",").split(",") if p.strip()]
    if len(parts) != 2:
        raise _err(section, key, f"expected 'start, end', got {raw!r}")
    return (_float(section, key, parts[0]), _float(section, key, parts[1]))


def _reject_unknown(cp: configparser.ConfigParser, section: str, allowed) -> None:
    if not cp.has_section(section):
        return
    for key in cp[section]:
        if key not in allowed:
            raise _err(section, key, f"unknown key (allowed: {', '.join(sorted(allowed))})")


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str  # keys are case-sensitive: Nc vs Nt
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    known = {"experiment", "channel", "model", "train"}
    for section in cp.sections():
        if section not in known:
            raise ConfigError(f"unknown section [{section}]")
    if not cp.has_section("experiment") or "version" not in cp["experiment"]:
        raise _err("experiment", "version", "missing (this build reads version 1)")

    _reject_unknown(cp, "experiment", {"version", "out_dir", "seeds", "teacher_seed"})
    _reject_unknown(cp, "channel", set(_CHANNEL_KEYS) | set(_DATA_KEYS))
    _reject_unknown(cp, "model", {"eta", "M"})
    _reject_unknown(cp, "train", _PLAN_KEYS - {"seed"})

    exp = cp["experiment"]
    version = _int("experiment", "version", exp["version"])
    if version != CONFIG_VERSION:
        raise _err("experiment", "version", f"unsupported version {version}")
    kwargs: dict = {}
    if "out_dir" in exp:
        kwargs["out_dir"] = exp["out_dir"].strip()
    if "seeds" in exp:
        seeds = tuple(_int("experiment", "seeds", s) for s in exp["seeds"].split(",") if s.strip())
        if not seeds:
            raise _err("experiment", "seeds", "empty seed list")
        kwargs["seeds"] = seeds
    if "teacher_seed" in exp:
        kwargs["teacher_seed"] = _int("experiment", "teacher_seed", exp["teacher_seed"])

    ch = cp["channel"] if cp.has_section("channel") else {}
    ch_kwargs = {}
    for key, attr in _CHANNEL_KEYS.items():
        if key not in ch:
            continue
        raw = ch[key]
        if key == "scenario":
            ch_kwargs[attr] = raw.strip()
        elif key in ("first_tap", "delay_spread"):
            ch_kwargs[attr] = _float("channel", key, raw)
        else:
            ch_kwargs[attr] = _int("channel", key, raw)
    for key in ("Nc_full", "Nc", "Nt"):
        v = ch_kwargs.get(_CHANNEL_KEYS[key])
        if v is not None and v <= 0:
            raise _err("channel", key, f"must be positive, got {v}")
    n_sub = ch_kwargs.get("n_subcarriers", ChannelConfig.n_subcarriers)
    n_delay = ch_kwargs.get("n_delay", ChannelConfig.n_delay)
    if n_delay > n_sub:
        raise _err("channel", "Nc", f"Nc={n_delay} exceeds Nc_full={n_sub} (truncation keeps at most Nc_full rows)")
    try:
        kwargs["channel"] = ChannelConfig(**ch_kwargs)
    except ConfigError as exc:
        raise ConfigError(f"[channel] {exc}") from None
    for key in _DATA_KEYS:
        if key in ch:
            n = _int("channel", key, ch[key])
            if n <= 0:
                raise _err("channel", key, f"sample count must be positive, got {n}")
            kwargs["n_train" if key == "train" else "n_test"] = n

    dims = 2 * kwargs["channel"].n_delay * kwargs["channel"].n_antennas
    if cp.has_section("model"):
        model = cp["model"]
        if "eta" in model and "M" in model:
            raise _err("model", "M", "give either eta or M, not both")
        if "M" in model:
            M = _int("model", "M", model["M"])
        elif "eta" in model:
            eta = _float("model", "eta", model["eta"])
            if not 0 < eta < 1:
                raise _err("model", "eta", f"compression ratio must lie in (0, 1), got {eta}")
            M = round(eta * dims)
        else:
            M = dims // 4
    else:
        M = dims // 4
    if not 0 < M < dims:
        raise _err("model", "M", f"codeword size {M} must lie in (0, {dims})")
    kwargs["codeword_size"] = M

    plan_kwargs = {}
    if cp.has_section("train"):
        tr = cp["train"]
        for key, raw in tr.items():
            if key in _LR_KEYS or key == "adam_betas":
                plan_kwargs[key] = _pair("train", key, raw)
            elif key == "adam_eps":
                plan_kwargs[key] = _float("train", key, raw)
            elif key in ("alpha0", "beta0"):
                plan_kwargs[key] = None if raw.strip().lower() in ("auto", "") else _float("train", key, raw)
            elif key == "reset_adam_at_boundary":
                plan_kwargs[key] = _bool("train", key, raw)
            elif key in ("pipeline", "alpha_scheduler"):
                plan_kwargs[key] = raw.strip()
            else:
                plan_kwargs[key] = _int("train", key, raw)
    try:
        kwargs["plan"] = TrainPlan(**plan_kwargs)
    except ConfigError as exc:
        raise ConfigError(f"[train] {exc}") from None
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))
