"""Experiment plumbing: key=value configs, sweeps and run directories.

Config files are plain text, one ``key = value`` per line, ``#`` starts a
comment. Training keys are the ``TrainConfig`` field names; loss and
controller settings use ``loss.<field>`` and ``controller.<field>``.
Synthetic data is described by ``data.<field>`` keys and an existing dataset
file by ``data = <path>``.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

from .controller import ControllerConfig
from .data import Dataset, generate_synthetic, load_dataset
from .errors import ConfigError
from .losses import LossConfig
from .metrics import CSV_HEADER, EvalReport
from .trainer import EpochRecord, TrainConfig, TrainData, train

SWEEP_PARAMETERS = ("kappa", "mined_fraction")
KAPPA_SWEEP = (1.0, 4.0, 16.0, 64.0)
MINED_FRACTION_SWEEP = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6)


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 20
    per_class: int = 50
    input_dim: int = 32
    cluster_spread: float = 0.2
    nuisance: float = 0.4
    outliers: float = 0.0
    seed: int | None = None  # falls back to the run seed

    def generate(self, run_seed: int) -> Dataset:
        seed = run_seed if self.seed is None else self.seed
        return generate_synthetic(self.num_classes, self.per_class, self.input_dim,
                                  self.cluster_spread, seed, self.nuisance, self.outliers)


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def load_config(path) -> dict[str, str]:
    try:
        return parse_config_text(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None


def parse_override(item: str) -> tuple[str, str]:
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, value = (s.strip() for s in item.split("=", 1))
    return key, value


def _convert(text: str, hint, key: str):
    args = typing.get_args(hint)
    if type(None) in args:
        if text.lower() in ("", "none"):
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {hint.__name__}") from None
    raise ConfigError(f"{key}: unsupported field type {hint}")


def _build(cls, values: dict[str, str], prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, text in values.items():
        if key not in names:
            raise ConfigError(f"unknown key {prefix}{key}")
        kwargs[key] = _convert(text, hints[key], prefix + key)
    return cls(**kwargs)


# keys consumed by the CLI rather than any dataclass
_RUN_KEYS = {"data", "checkpoint", "sweep.parameter", "sweep.values", "bench.sizes",
             "bench.per_class", "bench.kappa", "bench.naive", "data.format",
             "validation_fraction", "log_triplets"}


def split_config(values: dict[str, str]) -> tuple[TrainConfig, SyntheticSpec, dict[str, str]]:
    """Typed training config, synthetic-data spec and the remaining run keys."""
    groups: dict[str, dict[str, str]] = {"": {}, "loss.": {}, "controller.": {}, "data.": {}}
    run: dict[str, str] = {}
    for key, value in values.items():
        if key in _RUN_KEYS:
            run[key] = value
            continue
        for prefix in ("loss.", "controller.", "data."):
            if key.startswith(prefix):
                groups[prefix][key[len(prefix):]] = value
                break
        else:
            groups[""][key] = value
    loss = _build(LossConfig, groups["loss."], "loss.")
    ctl = _build(ControllerConfig, groups["controller."], "controller.")
    base = groups[""]
    for name in ("loss", "controller"):
        if name in base:
            raise ConfigError(f"use {name}.<field> keys instead of {name!r}")
    tc = _build(TrainConfig, base)
    return replace(tc, loss=loss, controller=ctl), _build(SyntheticSpec, groups["data."], "data."), run


def config_to_text(config: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(config):
        v = getattr(config, f.name)
        if dataclasses.is_dataclass(v):
            lines += [f"{f.name}.{g.name} = {getattr(v, g.name)}" for g in dataclasses.fields(v)]
        else:
            lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SweepSpec:
    parameter: str
    values: tuple[float, ...]
    base: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.parameter not in SWEEP_PARAMETERS:
            raise ConfigError(f"sweep parameter must be one of {', '.join(SWEEP_PARAMETERS)}")
        if len(self.values) == 0:
            raise ConfigError("sweep needs at least one value")
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    def config_for(self, value: float) -> TrainConfig:
        if self.parameter == "kappa":
            ctl = replace(self.base.controller, kappa_initial=value)
            return replace(self.base, miner="smart-fixed", controller=ctl)
        return replace(self.base, mined_fraction=value)


@dataclass
class SweepResult:
    value: float
    records: list[EpochRecord]

    @property
    def reports(self) -> list[EvalReport]:
        return [r.report for r in self.records]


def run_sweep(spec: SweepSpec, data: TrainData) -> list[SweepResult]:
    """One training run per value; every run shares the base seed."""
    return [SweepResult(v, train(data, spec.config_for(v))[1]) for v in spec.values]


def sweep_table(spec: SweepSpec, results: list[SweepResult]) -> str:
    lines = [f"{spec.parameter},{CSV_HEADER},kappa_used"]
    for res in results:
        for rec in res.records:
            kappa = "" if rec.kappa is None else repr(rec.kappa)
            lines.append(f"{res.value!r},{rec.report.csv_row()},{kappa}")
    return "\n".join(lines) + "\n"


EPOCH_HEADER = "epoch,kappa,lr,mined,random,fallback,mining_calcs,build_attempts,build_successes"


def epoch_table(records: list[EpochRecord]) -> str:
    lines = [EPOCH_HEADER]
    for r in records:
        b = r.build
        lines.append(",".join([
            str(r.epoch), "" if r.kappa is None else repr(r.kappa), repr(r.lr),
            str(r.mined), str(r.random), str(r.fallback), str(r.mining_distance_computations),
            "" if b is None else str(b.attempts), "" if b is None else str(b.successes),
        ]))
    return "\n".join(lines) + "\n"


def resolve_dataset(run: dict[str, str], synth: SyntheticSpec, seed: int) -> Dataset:
    path = run.get("data")
    return load_dataset(path) if path else synth.generate(seed)
