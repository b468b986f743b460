"""Pipeline configuration stored as an INI file.

Sections mirror the components: ``[env]`` (:class:`EnvSpec`), ``[policy]``,
``[data]``, ``[model]``, ``[cert]`` (:class:`CertConfig` plus method and
depth), ``[train]`` (:class:`TrainConfig`) and ``[run]``. Every key is
optional; missing keys take the dataclass defaults. The root seed can be
overridden by the ``CERTBOUND_SEED`` environment variable.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .certification import CertConfig, TrainConfig
from .predictor import Architecture
from .rollout import TIER_NOISE, EnvSpec

__all__ = [
    "ConfigError",
    "PipelineConfig",
    "METHOD_TAGS",
    "DEFAULT_DEPTH",
    "SEED_ENV_VAR",
    "load_config",
    "parse_config",
]

SEED_ENV_VAR = "CERTBOUND_SEED"

# CLI tag -> library method name
METHOD_TAGS = {"nonrec-noninf": "NonRec-NonInf", "nonrec-inf": "NonRec-Inf", "rec": "Rec"}
DEFAULT_DEPTH = {"nonrec-noninf": 1, "nonrec-inf": 2, "rec": 6}


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass(frozen=True)
class PipelineConfig:
    env: EnvSpec = field(default_factory=EnvSpec)
    tier: str = "expert"
    instance: int = 0
    valid_episodes: int = 100
    test_episodes: int = 100
    stride: int = 3
    data_seed: int = 0
    hidden_dims: tuple[int, ...] = (256, 256)
    method: str = "rec"
    depth: int | None = None  # None: the method's default depth
    cert: CertConfig = field(default_factory=CertConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    reps: int = 1
    out: str = "runs"

    def __post_init__(self):
        if self.tier not in TIER_NOISE:
            raise ConfigError(f"unknown tier {self.tier!r}")
        if self.method not in METHOD_TAGS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {sorted(METHOD_TAGS)}")
        if self.valid_episodes < 1 or self.test_episodes < 1:
            raise ConfigError("episode counts must be positive")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if self.reps < 1:
            raise ConfigError("reps must be >= 1")
        if not self.hidden_dims or any(h < 1 for h in self.hidden_dims):
            raise ConfigError("hidden_dims must be positive widths")
        d = self.effective_depth
        if d < 1:
            raise ConfigError("depth must be >= 1")
        if self.method == "nonrec-noninf" and d != 1:
            raise ConfigError("nonrec-noninf uses depth 1")
        if self.method == "nonrec-inf" and d != 2:
            raise ConfigError("nonrec-inf uses depth 2")
        if d > self.valid_episodes:
            raise ConfigError("depth exceeds the number of validation episodes")

    @property
    def effective_depth(self) -> int:
        return DEFAULT_DEPTH[self.method] if self.depth is None else self.depth

    @property
    def method_name(self) -> str:
        return METHOD_TAGS[self.method]

    def architecture(self) -> Architecture:
        return Architecture(self.env.feature_dim, tuple(self.hidden_dims))

    def replace(self, **changes) -> "PipelineConfig":
        try:
            return dataclasses.replace(self, **changes)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["env"] = {k: _fmt(v) for k, v in dataclasses.asdict(self.env).items()}
        cp["policy"] = {"tier": self.tier, "instance": _fmt(self.instance)}
        cp["data"] = {"valid_episodes": _fmt(self.valid_episodes), "test_episodes": _fmt(self.test_episodes),
                      "stride": _fmt(self.stride), "seed": _fmt(self.data_seed)}
        cp["model"] = {"hidden_dims": ",".join(str(h) for h in self.hidden_dims)}
        cert = {"method": self.method, "depth": _fmt(self.effective_depth)}
        cert.update({k: _fmt(v) for k, v in dataclasses.asdict(self.cert).items()})
        cp["cert"] = cert
        train = {k: _fmt(v) for k, v in dataclasses.asdict(self.train).items() if k != "seed"}
        if self.train.batch_size is None:
            train["batch_size"] = "full"
        cp["train"] = train
        cp["run"] = {"seed": _fmt(self.seed), "reps": _fmt(self.reps), "out": self.out}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _convert(raw: str, template: Any, key: str):
    # type follows the default value of the field
    raw = raw.strip()
    try:
        if isinstance(template, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
        if isinstance(template, tuple):
            return tuple(float(x) for x in raw.split(","))
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def _section_to_dataclass(cls, section: Mapping[str, str], name: str, extra: set[str] = frozenset()):
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known - set(extra)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {sorted(unknown)}")
    kwargs = {}
    for key in known & set(section):
        template = getattr(defaults, key)
        if cls is TrainConfig and key == "batch_size":
            raw = section[key].strip().lower()
            kwargs[key] = None if raw in ("", "full", "none") else _convert(raw, 0, f"{name}.{key}")
            continue
        kwargs[key] = _convert(section[key], template, f"{name}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{name}] section: {exc}") from exc


_SECTION_KEYS = {
    "policy": {"tier", "instance"},
    "data": {"valid_episodes", "test_episodes", "stride", "seed"},
    "model": {"hidden_dims"},
    "run": {"seed", "reps", "out"},
}


def parse_config(text: str, environ: Mapping[str, str] | None = None) -> PipelineConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from exc
    allowed = {"env", "cert", "train"} | set(_SECTION_KEYS)
    bad = set(cp.sections()) - allowed
    if bad:
        raise ConfigError(f"unknown section(s): {sorted(bad)}")
    for name, keys in _SECTION_KEYS.items():
        if name in cp:
            unknown = set(cp[name]) - keys
            if unknown:
                raise ConfigError(f"unknown key(s) in [{name}]: {sorted(unknown)}")

    def get(section, key, default, conv=int):
        if section not in cp or key not in cp[section]:
            return default
        raw = cp[section][key].strip()
        try:
            return conv(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from exc

    env = _section_to_dataclass(EnvSpec, cp["env"] if "env" in cp else {}, "env")
    cert_sec = dict(cp["cert"]) if "cert" in cp else {}
    method = cert_sec.pop("method", "rec").strip().lower()
    depth_raw = cert_sec.pop("depth", None)
    cert = _section_to_dataclass(CertConfig, cert_sec, "cert")
    train_sec = dict(cp["train"]) if "train" in cp else {}
    if "seed" in train_sec:
        raise ConfigError("training seeds derive from [run] seed; remove train.seed")
    train = _section_to_dataclass(TrainConfig, train_sec, "train")
    try:
        depth = None if depth_raw is None else int(depth_raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for cert.depth: {depth_raw!r}") from exc

    hidden = get("model", "hidden_dims", (256, 256), lambda s: tuple(int(x) for x in s.split(",")))
    seed = get("run", "seed", 0)
    environ = os.environ if environ is None else environ
    if environ.get(SEED_ENV_VAR, "").strip():
        try:
            seed = int(environ[SEED_ENV_VAR])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer") from exc

    return PipelineConfig(
        env=env,
        tier=get("policy", "tier", "expert", str).lower(),
        instance=get("policy", "instance", 0),
        valid_episodes=get("data", "valid_episodes", 100),
        test_episodes=get("data", "test_episodes", 100),
        stride=get("data", "stride", 3),
        data_seed=get("data", "seed", 0),
        hidden_dims=hidden,
        method=method,
        depth=depth,
        cert=cert,
        train=train,
        seed=seed,
        reps=get("run", "reps", 1),
        out=get("run", "out", "runs", str),
    )


def load_config(path: str | os.PathLike | None, environ: Mapping[str, str] | None = None) -> PipelineConfig:
    if path is None:
        return parse_config("", environ)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, environ)
