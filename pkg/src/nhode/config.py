"""Experiment configuration files.

An INI document (stdlib ``configparser``) with one section per concern.
Missing keys fall back to per-system defaults; unknown sections or keys are
errors. ``ExperimentConfig.from_text(cfg.to_text()) == cfg`` holds for every
valid config.
"""

from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

from .models import COORDS, KINDS, ObservationScheme
from .odeint import METHODS, SolverConfig
from .systems import SYSTEM_DEFAULTS, SYSTEM_KINDS, SystemSpec
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def parse_seeds(text: str) -> tuple[int, ...]:
    """``"0..9"`` (inclusive), ``"1, 4, 7"`` or mixtures like ``"0..2, 5"``."""
    seeds: list[int] = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        m = re.fullmatch(r"(-?\d+)\s*\.\.\s*(-?\d+)", part)
        try:
            if m:
                lo, hi = int(m.group(1)), int(m.group(2))
                if hi < lo:
                    raise ConfigError(f"empty seed range {part!r}")
                seeds.extend(range(lo, hi + 1))
            else:
                seeds.append(int(part))
        except ValueError as exc:
            raise ConfigError(f"bad seed list {text!r}") from exc
    if not seeds:
        raise ConfigError("seed list is empty")
    if any(s < 0 for s in seeds):
        raise ConfigError("seeds must be non-negative")
    return tuple(seeds)


@dataclass(frozen=True)
class SystemSection:
    kind: str = "dms"
    masses: tuple[float, ...] = (1.0, 1.2)
    spring_k: tuple[float, ...] = (3.0, 5.0)
    rest_lengths: tuple[float, ...] = (0.4, 0.6)
    G: float = 1.0
    eps: float = 0.6

    @classmethod
    def default(cls, kind: str) -> SystemSection:
        if kind not in SYSTEM_KINDS:
            raise ConfigError(f"unknown system kind {kind!r}")
        spec = getattr(SystemSpec, kind)()
        return cls.from_spec(spec)

    @classmethod
    def from_spec(cls, spec: SystemSpec) -> SystemSection:
        return cls(spec.kind, tuple(spec.masses), tuple(spec.spring_k), tuple(spec.rest_lengths), spec.G, spec.eps)

    def to_spec(self) -> SystemSpec:
        return SystemSpec(self.kind, self.masses, self.spring_k, self.rest_lengths, self.G, self.eps)


@dataclass(frozen=True)
class ObservationSection:
    # 0-based index of the particle whose position and momentum are hidden; -1 = fully observed
    hidden_particle: int = 1


@dataclass(frozen=True)
class DataSection:
    n_traj: int = 4000
    horizon: float = 1.0
    steps: int = 101
    seed: int = 0
    rtol: float = 1e-6
    atol: float = 1e-8
    max_steps: int = 100_000

    @classmethod
    def default(cls, kind: str) -> DataSection:
        d = SYSTEM_DEFAULTS[kind]
        return cls(d["n_traj"], d["horizon"], d["steps"], 0, d["rtol"], d["atol"], d["max_steps"])


@dataclass(frozen=True)
class ModelSection:
    kind: str = "nhode-pot"
    coords: str = "abs"
    width: int = 128
    depth: int = 4


@dataclass(frozen=True)
class EvalSection:
    n_test: int = 10
    horizon: float = 20.0
    dt: float = 0.01
    seed: int = 1
    method: str = "rk4"
    substeps: int = 1
    long_horizon: float = 0.0


@dataclass(frozen=True)
class SweepSection:
    eps_values: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8)
    n_traj: int = 64
    horizon: float = 3.0
    steps: int = 301
    n_test: int = 8
    test_steps: int = 500
    test_dt: float = 0.002


@dataclass(frozen=True)
class IdentifiabilitySection:
    k2_tilde: float = 5.0
    l2_tilde: float = 0.8
    n_ic: int = 5
    horizon: float = 1.0
    steps: int = 101
    rtol: float = 1e-9
    atol: float = 1e-12
    seed: int = 0


@dataclass(frozen=True)
class TrainSection:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 1200
    decay_rate: float = 0.95
    decay_every: int = 10
    train_fraction: float = 0.85
    method: str = "rk4"
    substeps: int = 1
    use_encoder: bool = False
    window: int = 10
    whiten_window: bool = True
    clip_norm: float = 100.0

    def to_train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **dataclasses.asdict(self))


SECTIONS = {
    "experiment": None,
    "system": SystemSection,
    "observation": ObservationSection,
    "data": DataSection,
    "model": ModelSection,
    "train": TrainSection,
    "eval": EvalSection,
    "sweep": SweepSection,
    "identifiability": IdentifiabilitySection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    system: SystemSection = field(default_factory=SystemSection)
    observation: ObservationSection = field(default_factory=ObservationSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    identifiability: IdentifiabilitySection = field(default_factory=IdentifiabilitySection)
    out_dir: str = "runs/default"
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        self.validate()

    # ---- derived objects -------------------------------------------------
    def spec(self) -> SystemSpec:
        return self.system.to_spec()

    def scheme(self) -> ObservationScheme:
        spec = self.spec()
        if self.observation.hidden_particle < 0:
            return ObservationScheme.full(spec.state_dim)
        return ObservationScheme.hide_particle(spec.n_particles, spec.d, self.observation.hidden_particle)

    def solver(self) -> SolverConfig:
        return SolverConfig("tsit5-adaptive", self.data.rtol, self.data.atol, max_steps=self.data.max_steps)

    def train_config(self, seed: int) -> TrainConfig:
        return self.train.to_train_config(seed)

    def validate(self) -> None:
        try:
            spec = self.spec()
        except ValueError as exc:
            raise ConfigError(f"[system]: {exc}") from exc
        if not -1 <= self.observation.hidden_particle < spec.n_particles:
            raise ConfigError(f"[observation] hidden_particle must be -1 or in [0, {spec.n_particles})")
        if self.model.kind not in KINDS:
            raise ConfigError(f"[model] kind must be one of {KINDS}")
        if self.model.coords not in COORDS:
            raise ConfigError(f"[model] coords must be one of {COORDS}")
        if self.model.width < 1 or self.model.depth < 0:
            raise ConfigError("[model] width >= 1 and depth >= 0 required")
        if self.data.steps < 2 or self.data.n_traj < 1 or self.data.horizon <= 0:
            raise ConfigError("[data] needs steps >= 2, n_traj >= 1 and horizon > 0")
        if self.eval.method not in METHODS[:2]:
            raise ConfigError("[eval] method must be a fixed-step method")
        if self.eval.n_test < 1 or self.eval.dt <= 0 or self.eval.horizon <= 0 or self.eval.long_horizon < 0:
            raise ConfigError("[eval] needs n_test >= 1, dt > 0, horizon > 0 and long_horizon >= 0")
        if not self.sweep.eps_values or min(self.sweep.eps_values) <= 0:
            raise ConfigError("[sweep] eps_values must be non-empty and positive")
        if not self.seeds:
            raise ConfigError("[experiment] seeds must be non-empty")
        if self.train.use_encoder and self.observation.hidden_particle < 0:
            raise ConfigError("[train] use_encoder needs a hidden particle")
        if self.train.use_encoder and self.data.steps < self.train.window + 1:
            raise ConfigError("[train] encoder window is longer than the trajectories")
        try:
            self.train_config(self.seeds[0])
            self.solver()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    @classmethod
    def default(cls, kind: str = "dms") -> ExperimentConfig:
        return cls(system=SystemSection.default(kind), data=DataSection.default(kind),
                   model=ModelSection(depth=SYSTEM_DEFAULTS[kind]["depth"],
                                      coords="abs" if kind == "dms" else "rel"),
                   observation=ObservationSection(1 if kind != "tbp" else 0))

    # ---- text form ---------------------------------------------------------
    def to_text(self) -> str:
        lines = ["[experiment]", f"out_dir = {self.out_dir}", f"seeds = {_fmt(self.seeds)}", ""]
        for name, klass in SECTIONS.items():
            if klass is None:
                continue
            lines.append(f"[{name}]")
            section = getattr(self, name)
            for f in fields(klass):
                lines.append(f"{f.name} = {_fmt(getattr(section, f.name))}")
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_text(cls, text: str) -> ExperimentConfig:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str  # keep key case so typos in case are caught too
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unparseable config: {exc}") from exc
        unknown = set(parser.sections()) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown section(s): {sorted(unknown)}")
        kind = parser.get("system", "kind", fallback="dms").strip()
        base = cls.default(kind) if kind in SYSTEM_KINDS else cls()
        changes = {}
        if parser.has_section("experiment"):
            exp = dict(parser.items("experiment"))
            extra = set(exp) - {"out_dir", "seeds"}
            if extra:
                raise ConfigError(f"[experiment] unknown key(s): {sorted(extra)}")
            if "out_dir" in exp:
                changes["out_dir"] = exp["out_dir"].strip()
            if "seeds" in exp:
                changes["seeds"] = parse_seeds(exp["seeds"])
        for name, klass in SECTIONS.items():
            if klass is None or not parser.has_section(name):
                continue
            changes[name] = _parse_section(name, klass, dict(parser.items(name)), getattr(base, name))
        return dataclasses.replace(base, **changes)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


def _convert(name: str, key: str, raw: str, template):
    raw = raw.strip()
    try:
        if isinstance(template, bool):
            low = raw.lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "yes", "1")
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
        if isinstance(template, tuple):
            return tuple(float(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"[{name}] {key}: cannot parse {raw!r}") from exc


def _parse_section(name: str, klass, items: dict, base):
    known = {f.name for f in fields(klass)}
    extra = set(items) - known
    if extra:
        raise ConfigError(f"[{name}] unknown key(s): {sorted(extra)}")
    values = {k: _convert(name, k, v, getattr(base, k)) for k, v in items.items()}
    try:
        return dataclasses.replace(base, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc
