"""Run configuration: dataclasses, the INI-style file format, and overrides.

A config file has up to four sections, every key optional::

    [env]
    sigma_o = 3.0

    [encoder]
    kind = dvrl
    K = 30

    [train]
    n_g = 25

    [log]
    metrics = metrics.csv

Command-line overrides use dotted keys (``--train.n_g=5``) and are applied
after the file; ``BELIEFRL_SEED`` overrides ``train.seed`` last.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field, fields
from typing import Dict, Iterable, Optional, Tuple

from .errors import ConfigError
from .envs import DiscreteHMM, Flicker, MountainHike, MountainHikeParams

SEED_ENV_VAR = "BELIEFRL_SEED"


@dataclass
class EnvConfig:
    name: str = "mountain_hike"
    sigma_o: float = 3.0
    p_blank: float = 0.0
    horizon: int = 75
    transition_cov: float = 0.25
    step_cap: float = 0.5
    action_penalty: float = 0.01
    start_x: float = -8.5
    start_y: float = -8.5
    start_cov: float = 1.0
    ridge: str = "-10,-10; -2,-6; 10,10"
    ridge_slope: float = 0.1
    basin: float = 0.0


@dataclass
class EncoderConfig:
    kind: str = "dvrl"
    K: int = 30
    d_h: int = 128
    d_z: int = 128
    rnn_d_h: int = 256
    obs_embed: int = 64
    action_embed: int = 64
    recon_loss: bool = False


@dataclass
class TrainConfig:
    n_e: int = 16
    n_s: int = 5
    n_g: int = 25
    gamma: float = 0.99
    lambda_h: float = 0.01
    lambda_v: float = 0.5
    lambda_e: float = 1.0
    lr: float = 1e-4
    rms_alpha: float = 0.99
    max_grad_norm: float = 0.5
    total_frames: int = 1_000_000
    seed: int = 0
    joint_optim: bool = True


@dataclass
class LogConfig:
    metrics: str = "metrics.csv"
    checkpoint: str = "checkpoint.bin"
    checkpoint_every: int = 0
    return_window: int = 100
    wall_time: bool = False


SECTIONS = {"env": EnvConfig, "encoder": EncoderConfig, "train": TrainConfig, "log": LogConfig}


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    log: LogConfig = field(default_factory=LogConfig)

    def validate(self) -> "RunConfig":
        t, e = self.train, self.encoder
        if t.n_s < 1:
            raise ConfigError("train.n_s must be >= 1", "train.n_s")
        if t.n_g < t.n_s:
            raise ConfigError(
                f"train.n_g ({t.n_g}) must be >= train.n_s ({t.n_s})", "train.n_g")
        if not 0.0 <= t.gamma < 1.0:
            raise ConfigError("train.gamma must lie in [0, 1)", "train.gamma")
        if t.n_e < 1:
            raise ConfigError("train.n_e must be >= 1", "train.n_e")
        if e.K < 1:
            raise ConfigError("encoder.K must be >= 1", "encoder.K")
        if e.kind not in ("rnn", "dvrl"):
            raise ConfigError("encoder.kind must be 'rnn' or 'dvrl'", "encoder.kind")
        if self.env.name not in ENV_BUILDERS:
            raise ConfigError(f"env.name must be one of {sorted(ENV_BUILDERS)}", "env.name")
        if self.env.sigma_o < 0:
            raise ConfigError("env.sigma_o must be >= 0", "env.sigma_o")
        if not 0.0 <= self.env.p_blank <= 1.0:
            raise ConfigError("env.p_blank must lie in [0, 1]", "env.p_blank")
        try:
            parse_ridge(self.env.ridge)
        except ValueError as exc:
            raise ConfigError(f"env.ridge: {exc}", "env.ridge") from None
        return self

    def to_text(self) -> str:
        """Serialize every key (defaults included) in the file format."""
        out = io.StringIO()
        for name in SECTIONS:
            section = getattr(self, name)
            out.write(f"[{name}]\n")
            for f in fields(section):
                out.write(f"{f.name} = {_format(getattr(section, f.name))}\n")
            out.write("\n")
        return out.getvalue()

    def copy(self) -> "RunConfig":
        return RunConfig(**{k: dataclasses.replace(getattr(self, k)) for k in SECTIONS})


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(raw: str, typ, key: str):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            f = float(raw)
            if not f.is_integer():
                raise ValueError(raw)
            return int(f)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}", key) from None


def _field_types(section_cls) -> Dict[str, type]:
    hints = {"int": int, "float": float, "bool": bool, "str": str}
    return {f.name: hints.get(f.type, f.type) if isinstance(f.type, str) else f.type
            for f in fields(section_cls)}


def set_key(cfg: RunConfig, dotted: str, raw: str) -> None:
    if "." not in dotted:
        raise ConfigError(f"unknown key {dotted!r} (expected section.key)", dotted)
    section, key = dotted.split(".", 1)
    if section not in SECTIONS:
        raise ConfigError(f"unknown section {section!r}", dotted)
    types = _field_types(SECTIONS[section])
    if key not in types:
        raise ConfigError(f"unknown key {dotted!r}", dotted)
    setattr(getattr(cfg, section), key, _coerce(str(raw), types[key], dotted))


def parse_overrides(args: Iterable[str]) -> Dict[str, str]:
    out = {}
    for arg in args:
        body = arg[2:] if arg.startswith("--") else arg
        if "=" not in body:
            raise ConfigError(f"override {arg!r} must look like --section.key=value", body)
        k, v = body.split("=", 1)
        out[k.strip()] = v
    return out


def config_from_text(text: str, overrides: Optional[Dict[str, str]] = None,
                     environ: Optional[Dict[str, str]] = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = RunConfig()
    for section in parser.sections():
        for key, raw in parser.items(section):
            set_key(cfg, f"{section}.{key}", raw)
    for key, raw in (overrides or {}).items():
        set_key(cfg, key, raw)
    environ = os.environ if environ is None else environ
    if environ.get(SEED_ENV_VAR):
        set_key(cfg, "train.seed", environ[SEED_ENV_VAR])
    return cfg.validate()


def parse_config(path: Optional[str] = None, overrides=None, environ=None) -> RunConfig:
    """Load ``path`` (or start from defaults), then apply overrides and the seed env var."""
    text = ""
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    if overrides is not None and not isinstance(overrides, dict):
        overrides = parse_overrides(overrides)
    return config_from_text(text, overrides, environ)


# --------------------------------------------------------------------------
# Environment construction
# --------------------------------------------------------------------------


def parse_ridge(text: str) -> Tuple[Tuple[float, float], ...]:
    pts = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        xy = [float(v) for v in chunk.split(",")]
        if len(xy) != 2:
            raise ValueError(f"ridge point {chunk!r} needs two coordinates")
        pts.append((xy[0], xy[1]))
    if len(pts) < 2:
        raise ValueError("ridge needs at least two points")
    return tuple(pts)


def mountain_hike_params(env: EnvConfig) -> MountainHikeParams:
    return MountainHikeParams(
        transition_cov=env.transition_cov,
        obs_noise=env.sigma_o,
        step_cap=env.step_cap,
        action_penalty=env.action_penalty,
        horizon=env.horizon,
        start_mean=(env.start_x, env.start_y),
        start_cov=env.start_cov,
        ridge_points=parse_ridge(env.ridge),
        ridge_slope=env.ridge_slope,
        basin=env.basin,
    )


def _build_mountain_hike(env: EnvConfig):
    return MountainHike(mountain_hike_params(env))


def _build_noisy_guess(env: EnvConfig):
    # hidden bit fixed per episode, 75%-accurate readings; reward 1 for naming it
    stay = [[1.0, 0.0], [0.0, 1.0]]
    emit = [[0.75, 0.25], [0.25, 0.75]]
    return DiscreteHMM(
        transitions=[stay, stay],
        emissions=emit,
        initial=[0.5, 0.5],
        rewards=[[1.0, 0.0], [0.0, 1.0]],
        horizon=env.horizon,
    )


ENV_BUILDERS = {"mountain_hike": _build_mountain_hike, "noisy_guess": _build_noisy_guess}


def make_env(env: EnvConfig):
    base = ENV_BUILDERS[env.name](env)
    if env.p_blank > 0:
        return Flicker(base, env.p_blank)
    return base
