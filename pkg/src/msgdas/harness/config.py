"""Run configuration, TOML (de)serialization and command-line overrides.

Every default is the full-scale search setting. The desk profile
(:meth:`SearchConfig.desk`) shrinks the problem so a whole run fits in
minutes on one CPU core.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import tomli_w

from ..errors import ConfigurationError
from ..regularizers import DEFAULT_MILESTONES, DistillConfig, DropBlockConfig


@dataclass
class DataConfig:
    dataset: str = "cifar10"           # "synthetic" or "cifar10"
    path: str = ""                     # directory holding data_batch_{1..5}.bin
    subset_per_class: int = 0          # 0 keeps every image
    downsample_to: int = 0             # 0 keeps 32x32
    synthetic_n: int = 512
    synthetic_classes: int = 2
    synthetic_hw: int = 16


@dataclass
class NetworkConfig:
    num_cells: int = 8
    init_channels: int = 16


@dataclass
class SearchParams:
    k: int = 2
    batch_size: int = 128
    epochs: int = 240
    seed: int = 0


@dataclass
class OptimizerConfig:
    w_lr: float = 0.025
    w_momentum: float = 0.9
    w_weight_decay: float = 3e-4
    a_lr: float = 3e-4
    a_beta1: float = 0.5
    a_beta2: float = 0.999
    a_weight_decay: float = 1e-4


@dataclass
class ScheduleConfig:
    tau_start: float = 10.0
    tau_end: float = 1.0


@dataclass
class EvalConfig:
    epochs: int = 15
    batch_size: int = 64
    lr: float = 0.025
    synthetic_n: int = 1024


@dataclass
class SearchConfig:
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    search: SearchParams = field(default_factory=SearchParams)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    dropblock: DropBlockConfig = field(default_factory=DropBlockConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out_dir: str = "runs/default"

    @classmethod
    def full(cls) -> "SearchConfig":
        return cls()

    @classmethod
    def desk(cls) -> "SearchConfig":
        cfg = cls()
        cfg.data.dataset = "synthetic"
        cfg.data.synthetic_n = 256
        cfg.network = NetworkConfig(num_cells=4, init_channels=8)
        cfg.search = SearchParams(k=2, batch_size=64, epochs=30, seed=0)
        cfg.out_dir = "runs/desk"
        return cfg

    def validate(self) -> "SearchConfig":
        if self.data.dataset not in ("synthetic", "cifar10"):
            raise ConfigurationError(f"unknown dataset {self.data.dataset!r}")
        if not 1 <= self.search.k <= 8:
            raise ConfigurationError(f"K must lie in [1, 8], got {self.search.k}")
        if self.search.epochs < 1 or self.search.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if self.network.num_cells < 1 or self.network.init_channels < 1:
            raise ConfigurationError("network needs at least one cell and one channel")
        if not self.schedule.tau_start > self.schedule.tau_end > 0:
            raise ConfigurationError("tau must decay from tau_start down to a positive tau_end")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dropblock"]["milestones"] = [list(m) for m in self.dropblock.milestones]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        sections = {
            "data": DataConfig, "network": NetworkConfig, "search": SearchParams,
            "optimizer": OptimizerConfig, "schedule": ScheduleConfig, "dropblock": DropBlockConfig,
            "distill": DistillConfig, "eval": EvalConfig,
        }
        unknown = set(d) - set(sections) - {"out_dir"}
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for name, typ in sections.items():
            values = dict(d.get(name, {}))
            allowed = {f.name for f in dataclasses.fields(typ)}
            extra = set(values) - allowed
            if extra:
                raise ConfigurationError(f"unknown keys in [{name}]: {sorted(extra)}")
            if name == "dropblock" and "milestones" in values:
                values["milestones"] = tuple(tuple(m) for m in values["milestones"])
            kwargs[name] = typ(**values)
        if "out_dir" in d:
            kwargs["out_dir"] = str(d["out_dir"])
        return cls(**kwargs).validate()

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_toml(cls, text: str) -> "SearchConfig":
        try:
            return cls.from_dict(tomllib.loads(text))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"config is not valid TOML: {exc}") from exc

    @classmethod
    def load(cls, path) -> "SearchConfig":
        return cls.from_toml(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_toml())


def apply_overrides(cfg: SearchConfig, *, seed=None, k=None, epochs=None, dataset=None, out=None,
                    data_path=None) -> SearchConfig:
    """Return a copy of ``cfg`` with the given command-line values applied."""
    cfg = SearchConfig.from_dict(cfg.to_dict())
    if seed is not None:
        cfg.search.seed = seed
    if k is not None:
        cfg.search.k = k
    if epochs is not None:
        cfg.search.epochs = epochs
    if dataset is not None:
        cfg.data.dataset = dataset
    if out is not None:
        cfg.out_dir = str(out)
    if data_path is not None:
        cfg.data.path = str(data_path)
    return cfg.validate()


__all__ = [
    "DEFAULT_MILESTONES", "DataConfig", "EvalConfig", "NetworkConfig", "OptimizerConfig", "ScheduleConfig",
    "SearchConfig", "SearchParams", "apply_overrides",
]
