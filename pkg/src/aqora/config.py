"""Run configuration: one YAML file with seed, schema, workload, simulator, optimizer, training and evaluation sections."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from aqora.agent import ALL_KINDS
from aqora.cbo import CboConfig
from aqora.errors import ConfigError
from aqora.ppo import TrainConfig
from aqora.relstore import SchemaSpec, load_schema
from aqora.stagesim import SimConfig
from aqora.workload import WorkloadSpec

METHODS = ("baseline-syntactic-aqe", "baseline-cbo-aqe", "aqora")


@dataclass(frozen=True)
class LoopConfig:
    episodes: int = 400
    batch_size: int = 8
    checkpoint_every: int = 50
    curriculum: bool = True
    # fractions of the episode budget at which stages 2 and 3 begin
    stage_bounds: tuple[float, float] = (0.1, 0.4)
    kinds: frozenset[str] = ALL_KINDS
    conv: tuple[int, ...] = (64, 128, 64)
    head_hidden: int = 256
    ppo: TrainConfig = TrainConfig()

    def __post_init__(self):
        if self.episodes < 0 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ConfigError("episodes must be >= 0, batch_size and checkpoint_every >= 1")
        a, b = self.stage_bounds
        if not 0 <= a <= b <= 1:
            raise ConfigError("stage_bounds must satisfy 0 <= a <= b <= 1")
        bad = set(self.kinds) - ALL_KINDS
        if bad or "no-op" not in self.kinds:
            raise ConfigError(f"action kinds must be a subset of {sorted(ALL_KINDS)} containing no-op")


@dataclass(frozen=True)
class EvalConfig:
    methods: tuple[str, ...] = METHODS
    # simulated seconds charged per model decision
    decision_charge: float = 0.1
    reference: str = "baseline-syntactic-aqe"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    schema: SchemaSpec | None = None
    workload: WorkloadSpec = WorkloadSpec()
    sim: SimConfig = SimConfig()
    cbo: CboConfig = CboConfig()
    train: LoopConfig = LoopConfig()
    eval: EvalConfig = EvalConfig()


def _build(cls, raw: Mapping | None, section: str, **convert):
    raw = dict(raw or {})
    names = {f.name for f in dataclasses.fields(cls)}
    extra = set(raw) - names
    if extra:
        raise ConfigError(f"unknown keys in {section}: {sorted(extra)}")
    for k, fn in convert.items():
        if k in raw:
            raw[k] = fn(raw[k])
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} section: {exc}") from None


def from_dict(raw: Mapping[str, Any], base_dir: Path | None = None, seed: int | None = None,
              overrides: Mapping[str, Any] | None = None) -> RunConfig:
    raw = dict(raw or {})
    known = {"seed", "schema", "workload", "sim", "cbo", "train", "eval"}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown top-level config keys: {sorted(extra)}")
    seed = int(raw.get("seed", 0) if seed is None else seed)
    schema_raw = raw.get("schema")
    if isinstance(schema_raw, str):
        path = Path(schema_raw)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        schema = load_schema(path)
    elif schema_raw is not None:
        schema = SchemaSpec.from_dict(schema_raw)
    else:
        schema = None
    overrides = dict(overrides or {})
    sim_raw = dict(raw.get("sim") or {})
    sim_raw.setdefault("seed", seed)
    if overrides.get("max_steps") is not None:
        sim_raw["max_steps"] = overrides["max_steps"]
    train_raw = dict(raw.get("train") or {})
    ppo = _build(TrainConfig, train_raw.pop("ppo", None), "train.ppo")
    if overrides.get("curriculum") is not None:
        train_raw["curriculum"] = overrides["curriculum"]
    train = _build(LoopConfig, train_raw, "train", stage_bounds=tuple, kinds=frozenset, conv=tuple)
    train = dataclasses.replace(train, ppo=ppo)
    ev = _build(EvalConfig, raw.get("eval"), "eval", methods=tuple)
    if overrides.get("methods"):
        ev = dataclasses.replace(ev, methods=tuple(overrides["methods"]))
    unknown = set(ev.methods) - set(METHODS)
    if unknown:
        raise ConfigError(f"unknown methods {sorted(unknown)}; choose from {list(METHODS)}")
    return RunConfig(
        seed=seed,
        schema=schema,
        workload=WorkloadSpec.from_dict(raw.get("workload"), seed=seed),
        sim=_build(SimConfig, sim_raw, "sim"),
        cbo=_build(CboConfig, raw.get("cbo"), "cbo"),
        train=train,
        eval=ev,
    )


def load(path, seed: int | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return from_dict(raw, path.parent, seed, overrides)
