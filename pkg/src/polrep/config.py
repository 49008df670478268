"""Sectioned ``key = value`` run configuration with canonical serialization."""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace

from .env import EnvConfig
from .trainer import TrainConfig, format_value as _fmt, parse_value as _parse


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_knobs: int = 40
    traj_per_knob: int = 20
    heldout_every: int = 5


@dataclass(frozen=True)
class SteerConfig:
    eta_h: float = 0.5
    eta_lambda: float = 0.1
    max_iters: int = 500
    n_neighbors: int = 32
    pca_rank: int = 1
    tol_target: float = 0.05
    tol_constraint: float = 0.0
    target: float = 24.0
    constraints: str = ""  # "task:lower_bound,..." in raw return units
    init_index: int = -1  # bank member to start from; -1 draws one at random

    def query_kwargs(self):
        return dict(eta_h=self.eta_h, eta_lambda=self.eta_lambda, max_iters=self.max_iters,
                    n_neighbors=self.n_neighbors, pca_rank=self.pca_rank,
                    tol_target=self.tol_target, tol_constraint=self.tol_constraint)

    def parsed_constraints(self):
        out = []
        for item in filter(None, (s.strip() for s in self.constraints.split(","))):
            k, _, v = item.partition(":")
            try:
                out.append((int(k), float(v)))
            except ValueError as exc:
                raise ConfigError(f"bad constraint {item!r}; expected task:bound") from exc
        return out


@dataclass(frozen=True)
class EvalConfig:
    n_queries: int = 50
    n_eval: int = 16
    n_triplets: int = 2000
    ablation_runs: int = 10
    cf_trials: int = 100
    cf_grid: str = "16,32,64,128,256,512"
    cf_reg: float = 1e-6

    def grid(self):
        return [int(v) for v in self.cf_grid.split(",")]


SECTIONS = {"env": EnvConfig, "data": DataConfig, "train": TrainConfig,
            "steer": SteerConfig, "eval": EvalConfig}


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    steer: SteerConfig = field(default_factory=SteerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, env=replace(self.env, seed=seed), train=replace(self.train, seed=seed))

    def to_text(self) -> str:
        lines = []
        for name in sorted(SECTIONS):
            lines.append(f"[{name}]")
            for k, v in sorted(asdict(getattr(self, name)).items()):
                lines.append(f"{k} = {_fmt(v)}")
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#", ";"),
                                           interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        sections = {}
        for name in parser.sections():
            if name not in SECTIONS:
                raise ConfigError(f"unknown config section [{name}]")
            types = {f.name: f.type for f in fields(SECTIONS[name])}
            values = {}
            for key, raw in parser.items(name):
                if key not in types:
                    raise ConfigError(f"unknown key {key!r} in section [{name}]")
                try:
                    values[key] = _parse(raw.strip(), types[key])
                except ValueError as exc:
                    raise ConfigError(f"[{name}] {key}: {exc}") from exc
            try:
                sections[name] = SECTIONS[name](**values)
            except ValueError as exc:
                raise ConfigError(f"[{name}]: {exc}") from exc
        return cls(**sections)

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path in (None, "default"):
            return cls()
        with open(path) as fh:
            return cls.from_text(fh.read())
