"""Run configuration: ``[section]`` headers with ``key = value`` lines.

Blank lines and ``#`` comments are ignored.  Every key has a type and a
default; unknown keys and malformed values are rejected with their line
number.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

from esscale.envs import PoleConfig
from esscale.estimator import EsConfig
from esscale.policy import PolicySpec


class ConfigError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        super().__init__(f"line {line}: {msg}" if line is not None else msg)
        self.line = line


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _intlist(text: str) -> tuple:
    parts = [p for p in text.replace(",", " ").split() if p]
    return tuple(int(p) for p in parts)


def _float(text: str) -> float:
    v = float(text)
    if not math.isfinite(v):
        raise ValueError("must be finite")
    return v


# section -> key -> (parser, default); a None default is resolved later
SCHEMA = {
    "run": {
        "seed": (int, 0),
        "updates": (int, 100),
        "out": (str, "out"),
        "checkpoint_every": (int, 50),
    },
    "es": {
        "sigma": (_float, None),
        "alpha": (_float, 0.01),
        "pop_pairs": (int, 50),
        "l2_coeff": (_float, 0.005),
        "shaping": (str, "centered_ranks"),
        "optimizer": (str, "adam"),
        "momentum": (_float, 0.9),
        "beta1": (_float, 0.9),
        "beta2": (_float, 0.999),
        "eps_adam": (_float, 1e-8),
    },
    "noise": {
        "seed": (int, 7),
        "length": (int, 10_000_000),
    },
    "policy": {
        "hidden": (_intlist, (64, 64)),
        "action_mode": (str, "continuous"),
        "bins": (int, 10),
        "vbn": (_bool, False),
        "vbn_batch": (int, 128),
    },
    "env": {
        "name": (str, "sphere"),
        "dim": (int, 10),
        "chain_T": (int, 100),
        "horizon": (int, 1000),
        "frameskip": (int, 1),
        "gravity": (_float, 9.8),
        "masscart": (_float, 1.0),
        "masspole": (_float, 0.1),
        "length": (_float, 0.5),
        "force_mag": (_float, 10.0),
        "dt": (_float, 0.02),
    },
    "cap": {
        "enabled": (_bool, False),
        "factor": (_float, 2.0),
        "floor": (int, 50),
        "initial_mean": (_float, None),
    },
    "distrib": {
        "host": (str, "127.0.0.1"),
        "port": (int, 7580),
        "workers": (int, 1),
        "timeout": (_float, 30.0),
    },
}

ENV_NAMES = ("sphere", "rosenbrock", "rastrigin", "pole", "chain")


@dataclass
class RunConfig:
    sections: dict = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    @property
    def is_policy_env(self) -> bool:
        return self["env"]["name"] == "pole"

    def es_config(self) -> EsConfig:
        es = dict(self["es"])
        if es["sigma"] is None:
            es["sigma"] = 0.02 if self.is_policy_env else 0.1
        return EsConfig(**es)

    def pole_config(self) -> PoleConfig:
        env = self["env"]
        return PoleConfig(gravity=env["gravity"], masscart=env["masscart"],
                          masspole=env["masspole"], length=env["length"],
                          force_mag=env["force_mag"], dt=env["dt"], horizon=env["horizon"])

    def policy_spec(self) -> PolicySpec:
        p = self["policy"]
        force = self["env"]["force_mag"]
        return PolicySpec(obs_dim=4, action_dim=1, hidden=p["hidden"],
                          action_mode=p["action_mode"], bins=p["bins"], low=-force, high=force)


def defaults() -> RunConfig:
    return RunConfig({s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})


def validate(cfg: RunConfig) -> RunConfig:
    try:
        cfg.es_config()
        if cfg.is_policy_env:
            cfg.policy_spec()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    env = cfg["env"]
    if env["name"] not in ENV_NAMES:
        raise ConfigError(f"env.name must be one of {ENV_NAMES}, got {env['name']!r}")
    checks = [
        (cfg["run"]["updates"] >= 0, "run.updates must be >= 0"),
        (cfg["run"]["checkpoint_every"] >= 1, "run.checkpoint_every must be >= 1"),
        (cfg["noise"]["length"] >= 1, "noise.length must be >= 1"),
        (0 <= cfg["noise"]["seed"] < 2 ** 64, "noise.seed must be a 64-bit unsigned int"),
        (env["dim"] >= 1, "env.dim must be >= 1"),
        (env["chain_T"] >= 1, "env.chain_T must be >= 1"),
        (env["horizon"] >= 1, "env.horizon must be >= 1"),
        (env["frameskip"] >= 1, "env.frameskip must be >= 1"),
        (cfg["cap"]["factor"] > 0, "cap.factor must be > 0"),
        (cfg["cap"]["floor"] >= 1, "cap.floor must be >= 1"),
        (0 < cfg["distrib"]["port"] < 65536, "distrib.port must be in 1..65535"),
        (cfg["distrib"]["workers"] >= 1, "distrib.workers must be >= 1"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)
    return cfg


def parse(text: str) -> RunConfig:
    cfg = defaults()
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", lineno)
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]", lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {raw.strip()!r}", lineno)
        if section is None:
            raise ConfigError("key outside of any [section]", lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {section}.{key}", lineno)
        parser = SCHEMA[section][key][0]
        try:
            cfg.sections[section][key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {section}.{key}: {exc}", lineno) from None
    return validate(cfg)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse(path.read_text())


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump(cfg: RunConfig) -> str:
    """Serialize every non-None value; ``parse(dump(c))`` equals ``c``."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key in keys:
            value = cfg.sections[section][key]
            if value is not None:
                lines.append(f"{key} = {_format(value)}")
        lines.append("")
    return "\n".join(lines)
