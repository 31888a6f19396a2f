"""Experiment configuration: nested dataclasses with a canonical JSON form."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .crowdsim import ConfigError

METHODS = ("taidtm", "taidtm_ft", "global_only", "mv", "ds")


@dataclass
class DataConfig:
    n: int = 3000
    d: int = 8
    C: int = 4
    class_sep: float = 4.0


@dataclass
class NoiseConfig:
    R: int = 60
    G: int = 3
    rho: float = 0.4
    rho_max: float = 0.6
    mean_annotations: float = 2.0


@dataclass
class DistillConfig:
    warmup_epochs: int = 10
    warmup_lr: float = 0.05
    threshold: float = 0.5
    floor: int = 5


@dataclass
class TransitionConfig:
    widths: tuple = (32, 32)
    latent: int = 16
    global_epochs: int = 10
    global_lr: float = 0.05
    finetune_epochs: int = 10
    finetune_lr: float = 0.05
    batch_size: int = 64


@dataclass
class GraphConfig:
    k: int = 10
    svd_rank: int = 0  # 0 means "use the group count"
    norm: str = "l2"
    hidden: tuple = (64,)
    final_activation: str = "identity"
    residual: bool = False  # add the GCN output to the global head
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 128


@dataclass
class ClassifierConfig:
    epochs: int = 60
    lr: float = 0.01
    weight_decay: float = 1e-4
    lr_milestones: tuple = (40, 55)  # divide the rate by 10 at these epochs
    hidden: tuple = (32, 32)
    batch_size: int = 64
    joint_revision: bool = False


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    transition: TransitionConfig = field(default_factory=TransitionConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    seed: int = 0
    method: str = "taidtm"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.noise.R % self.noise.G:
            raise ConfigError("R must be divisible by G")
        if not 1 <= self.graph.k <= self.noise.R:
            raise ConfigError("need 1 <= k <= R")
        if not 1.0 / self.data.C < self.distill.threshold <= 1.0:
            raise ConfigError("threshold must lie in (1/C, 1]")

    @property
    def svd_rank(self):
        return self.graph.svd_rank or self.noise.G

    def to_dict(self):
        return dataclasses.asdict(self)

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self):
        """Hash of everything except ``seed`` and ``method``, so runs of one experiment group together."""
        d = self.to_dict()
        del d["seed"], d["method"]
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def replace(self, **changes):
        """Copy with dotted-path overrides, e.g. ``replace(**{"noise.R": 30})``."""
        d = self.to_dict()
        for key, value in changes.items():
            _set_path(d, key, value)
        return from_dict(d)


def _set_path(d, key, value):
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config section {p!r} in {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


SECTIONS = {
    "data": DataConfig,
    "noise": NoiseConfig,
    "distill": DistillConfig,
    "transition": TransitionConfig,
    "graph": GraphConfig,
    "classifier": ClassifierConfig,
}


def _build(cls, values, where):
    if not isinstance(values, dict):
        raise ConfigError(f"section {where!r} must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where!r}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in values.items():
        default = known[name].default
        if isinstance(default, tuple):
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


def from_dict(d):
    d = dict(d)
    unknown = sorted(set(d) - set(SECTIONS) - {"seed", "method"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    sections = {name: _build(cls, d.get(name, {}), name) for name, cls in SECTIONS.items()}
    return ExperimentConfig(**sections, seed=int(d.get("seed", 0)), method=d.get("method", "taidtm"))


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(raw)
