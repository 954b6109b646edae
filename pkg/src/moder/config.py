"""Run configuration: one TOML file covering every module, with a stable content hash.

Canonical section order: top-level keys, then ``encoder``, ``world``,
``stream``, ``adapter``, ``replay``, ``experts``, ``forge``, ``eval``.  The
hash is taken over the canonical JSON form (sorted keys), so reordering keys
in the file never changes it.  ``out_dir`` and ``threads`` say where and how
fast to run, not what to compute, and are left out of the hash.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from moder.encoder.model import EncoderSpec
from moder.errors import ConfigError, ModerError
from moder.experts import TrainConfig
from moder.hub.core import ForgeConfig, Protocol

SEED_ENV = "MODER_SEED"
_UNHASHED = ("out_dir", "threads")


@dataclass
class EncoderSection:
    seed: int = 0
    vocab_size: int = 512
    d_tok: int = 64
    hidden: int = 128
    dim: int = 64


@dataclass
class WorldSection:
    n_classes: int = 20
    n_families: int = 5
    gamma: float = 0.4
    delta: float = 0.15
    sigma: float = 0.08


@dataclass
class StreamSection:
    protocol: str = "class_il"
    n_tasks: int = 5
    train_per_class: int = 100
    test_per_class: int = 50


@dataclass
class AdapterSection:
    variant: str = "lora"
    rank: int = 16


@dataclass
class ReplaySection:
    steps: int = 50
    iters: int = 2000
    lr: float = 1e-3
    weight_decay: float = 1e-2
    batch_size: int = 64
    hidden: int = 128
    depth: int = 4
    d_cond: int = 16
    d_time: int = 16
    per_class: int = 100
    sample_batch: int = 100


@dataclass
class ExpertSection:
    lr: float = 1e-3
    weight_decay: float = 0.0
    iterations: int = 300
    batch_size: int = 512
    expert_batch: int = 8
    loss: str = "sigmoid"
    template_aug: bool = True
    temperature: float = 1.0
    retrain_old: bool = True
    lr_schedule: str = "cosine"
    templates_file: str = ""


@dataclass
class ForgeSection:
    k: int = 5
    alpha: float = 0.1
    alpha_seen: float = 1.0
    temperature: float = 1.0
    unseen: str = "forge"


@dataclass
class EvalSection:
    method: str = "moder"
    mtil_transfer_inclusive: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    out_dir: str = "runs/default"
    encoder: EncoderSection = field(default_factory=EncoderSection)
    world: WorldSection = field(default_factory=WorldSection)
    stream: StreamSection = field(default_factory=StreamSection)
    adapter: AdapterSection = field(default_factory=AdapterSection)
    replay: ReplaySection = field(default_factory=ReplaySection)
    experts: ExpertSection = field(default_factory=ExpertSection)
    forge: ForgeSection = field(default_factory=ForgeSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        self.validate()

    # --- conversions ------------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict, base: "RunConfig | None" = None) -> "RunConfig":
        """Overlay ``data`` on ``base`` (defaults if None); unknown keys are errors."""
        merged = (base or cls()).to_dict()
        _overlay(merged, data, "")
        return _build(cls, merged, "")

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def content_hash(self) -> str:
        d = self.to_dict()
        for k in _UNHASHED:
            d.pop(k)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.blake2b(blob.encode(), digest_size=16).hexdigest()

    def with_overrides(self, dotted: dict[str, Any]) -> "RunConfig":
        """Apply ``{"experts.lr": 1e-4, ...}`` style overrides."""
        tree: dict = {}
        for key, value in dotted.items():
            node = tree
            parts = key.split(".")
            for p in parts[:-1]:
                node = node.setdefault(p, {})
            node[parts[-1]] = value
        return RunConfig.from_dict(tree, base=self)

    # --- derived objects ------------------------------------------------------------

    @property
    def encoder_spec(self) -> EncoderSpec:
        return EncoderSpec(**dataclasses.asdict(self.encoder))

    @property
    def protocol(self) -> Protocol:
        return Protocol(self.stream.protocol)

    def train_config(self) -> TrainConfig:
        fields = dataclasses.asdict(self.experts)
        fields.pop("templates_file")
        return TrainConfig(seed=self.seed, **fields)

    def forge_config(self) -> ForgeConfig:
        f = self.forge
        return ForgeConfig(k=f.k, alpha=f.alpha, alpha_seen=f.alpha_seen, temperature=f.temperature)

    def validate(self) -> None:
        from moder.bench.world import WorldSpec  # local: bench imports this module

        checks = (
            ("experts", self.train_config),
            ("forge", self.forge_config),
            ("world", lambda: WorldSpec(**dataclasses.asdict(self.world))),
            ("stream.protocol", lambda: Protocol(self.stream.protocol)),
        )
        for where, build in checks:
            try:
                build()
            except (ModerError, ValueError) as exc:
                raise ConfigError(f"{where}: {exc}") from None
        _choice("adapter.variant", self.adapter.variant, ("lora", "vera"))
        _choice("forge.unseen", self.forge.unseen, ("forge", "zero_shot"))
        _choice("eval.method", self.eval.method, ("moder", "zero_shot"))
        positive = {
            "threads": self.threads, "adapter.rank": self.adapter.rank, "stream.n_tasks": self.stream.n_tasks,
            "stream.train_per_class": self.stream.train_per_class, "stream.test_per_class": self.stream.test_per_class,
            "replay.steps": self.replay.steps, "replay.batch_size": self.replay.batch_size,
            "replay.hidden": self.replay.hidden, "replay.depth": self.replay.depth,
            "replay.per_class": self.replay.per_class, "replay.sample_batch": self.replay.sample_batch,
            "replay.lr": self.replay.lr,
        }
        for name, v in positive.items():
            if v <= 0:
                raise ConfigError(f"{name} must be > 0, got {v}")
        if self.replay.iters < 0 or self.replay.weight_decay < 0:
            raise ConfigError("replay.iters and replay.weight_decay must be >= 0")
        if self.replay.depth < 2:
            raise ConfigError(f"replay.depth must be >= 2, got {self.replay.depth}")


def _choice(name: str, value: str, allowed: tuple[str, ...]) -> None:
    if value not in allowed:
        raise ConfigError(f"{name} must be one of {list(allowed)}, got {value!r}")


def _overlay(target: dict, data: dict, path: str) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a table")
    for key, value in data.items():
        where = f"{path}{key}"
        if key not in target:
            raise ConfigError(f"unknown key {where!r}")
        if isinstance(target[key], dict):
            _overlay(target[key], value, where + ".")
        else:
            target[key] = value


def _build(cls, data: dict, path: str):
    kwargs = {}
    for f in dataclasses.fields(cls):
        where = f"{path}{f.name}"
        value = data[f.name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[f.name] = _build(type(default), value, where + ".")
        else:
            kwargs[f.name] = _coerce(where, value, type(default))
    return cls(**kwargs)


def _coerce(where: str, value, kind: type):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value


def parse_toml(text: str, base: RunConfig | None = None) -> RunConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"TOML parse error: {exc}") from None
    return RunConfig.from_dict(data, base)


def load_config(path: str | Path | None = None, env: dict | None = None) -> RunConfig:
    """Defaults, overlaid by the file at ``path``, then by ``MODER_SEED``."""
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = parse_toml(text)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
        cfg = cfg.with_overrides({"seed": seed})
    return cfg


def default_config_text() -> str:
    return resources.files("moder").joinpath("data/default.toml").read_text(encoding="utf-8")
