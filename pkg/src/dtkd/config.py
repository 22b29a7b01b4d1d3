"""Plain-text ``section.key = value`` experiment configs.

Blank lines and ``#`` comments are ignored. Lists are comma-separated and
``none`` clears an optional value. Unknown or repeated keys are errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from dtkd.distill import DistillConfig
from dtkd.harness import DataConfig, ExperimentConfig
from dtkd.net import TrainSchedule
from dtkd.numkit import DomainError

DEFAULT_SEED = 42


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        parts = []
        if line is not None:
            parts.append(f"line {line}")
        if key is not None:
            parts.append(f"key {key!r}")
        prefix = (", ".join(parts) + ": ") if parts else ""
        super().__init__(prefix + message)
        self.key = key
        self.line = line


@dataclass(frozen=True)
class SweepOptions:
    taus: tuple[float, ...] = (1.0, 2.0, 3.0, 4.0, 5.0, 6.0)
    methods: tuple[str, ...] = ("kd_fixed", "dtkd")
    alphas: tuple[float, ...] = (1.0, 2.0, 3.0)
    betas: tuple[float, ...] = (0.5, 1.0)


@dataclass(frozen=True)
class AnalysisOptions:
    sample_count: int = 1000
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    sweep: SweepOptions = field(default_factory=SweepOptions)
    analysis: AnalysisOptions = field(default_factory=AnalysisOptions)
    teacher_checkpoint: str | None = None


def _bool(s):
    v = s.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(conv):
    def parse(s):
        return tuple(conv(p.strip()) for p in s.split(",") if p.strip())
    return parse


def _optional(conv):
    def parse(s):
        return None if s.lower() == "none" else conv(s)
    return parse


_ints, _floats, _strs = _list(int), _list(float), _list(str)

# key -> (section object, field name, parser)
KEYS = {
    "experiment.id": ("experiment", "experiment_id", str),
    "experiment.method": ("experiment", "method", str),
    "experiment.seeds": ("experiment", "seeds", _ints),
    "teacher.hidden": ("experiment", "teacher_hidden", _ints),
    "teacher.checkpoint": ("run", "teacher_checkpoint", _optional(str)),
    "student.hidden": ("experiment", "student_hidden", _ints),
    "data.n_classes": ("data", "n_classes", int),
    "data.dim": ("data", "dim", int),
    "data.n_train": ("data", "n_train", int),
    "data.n_test": ("data", "n_test", int),
    "data.class_spread": ("data", "class_spread", float),
    "data.overlap": ("data", "overlap", float),
    "data.seed": ("data", "seed", int),
    "data.train_path": ("data", "train_path", _optional(str)),
    "data.test_path": ("data", "test_path", _optional(str)),
    "schedule.base_lr": ("schedule", "base_lr", float),
    "schedule.momentum": ("schedule", "momentum", float),
    "schedule.weight_decay": ("schedule", "weight_decay", float),
    "schedule.epochs": ("schedule", "epochs", int),
    "schedule.warmup_epochs": ("schedule", "warmup_epochs", int),
    "schedule.decay_milestones": ("schedule", "decay_milestones", _ints),
    "schedule.decay_factor": ("schedule", "decay_factor", float),
    "schedule.batch_size": ("schedule", "batch_size", int),
    "schedule.seed": ("schedule", "seed", int),
    "distill.tau_ref": ("distill", "tau_ref", float),
    "distill.alpha": ("distill", "alpha", float),
    "distill.beta": ("distill", "beta", float),
    "distill.gamma": ("distill", "gamma", float),
    "distill.temp_grad_mode": ("distill", "temp_grad_mode", str),
    "distill.dkd_mode": ("distill", "dkd_mode", str),
    "distill.tckd_enabled": ("distill", "tckd_enabled", _bool),
    "distill.nckd_enabled": ("distill", "nckd_enabled", _bool),
    "distill.epsilon_floor": ("distill", "epsilon_floor", float),
    "distill.max_mode": ("distill", "max_mode", str),
    "distill.kl_t_teacher": ("distill", "kl_t_teacher", _optional(float)),
    "distill.kl_t_student": ("distill", "kl_t_student", _optional(float)),
    "sweep.taus": ("sweep", "taus", _floats),
    "sweep.methods": ("sweep", "methods", _strs),
    "sweep.alphas": ("sweep", "alphas", _floats),
    "sweep.betas": ("sweep", "betas", _floats),
    "analysis.sample_count": ("analysis", "sample_count", int),
    "analysis.seed": ("analysis", "seed", int),
}


def parse_config(text: str, seed_override: int | None = None,
                 method_override: str | None = None) -> RunConfig:
    sections: dict[str, dict] = {s: {} for s in
                                 ("experiment", "run", "data", "schedule", "distill", "sweep", "analysis")}
    lines_of: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError("unknown key", key=key, line=lineno)
        if key in lines_of:
            raise ConfigError(f"duplicate key (first set on line {lines_of[key]})", key=key, line=lineno)
        section, name, conv = KEYS[key]
        try:
            sections[section][name] = conv(value)
        except ValueError as exc:
            raise ConfigError(f"bad value {value!r}: {exc}", key=key, line=lineno) from None
        lines_of[key] = lineno

    def build(cls, section):
        try:
            return cls(**sections[section])
        except (DomainError, TypeError, ValueError) as exc:
            named = [n for n in sections[section] if n in str(exc)]
            key = f"{section}.{named[0]}" if named else None
            raise ConfigError(str(exc), key=key,
                              line=lines_of.get(key) if key else None) from None

    exp = dict(sections["experiment"])
    sched = dict(sections["schedule"])
    if seed_override is not None:
        sched["seed"] = seed_override
        exp["seeds"] = (seed_override,)
    else:
        sched.setdefault("seed", DEFAULT_SEED)
        exp.setdefault("seeds", (sched["seed"],))
    if method_override is not None:
        exp["method"] = method_override
    sections["schedule"], sections["experiment"] = sched, exp

    data = build(DataConfig, "data")
    schedule = build(TrainSchedule, "schedule")
    dcfg = build(DistillConfig, "distill")
    try:
        experiment = ExperimentConfig(data=data, schedule=schedule, distill=dcfg, **exp)
    except (DomainError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    sweep = build(SweepOptions, "sweep")
    analysis = build(AnalysisOptions, "analysis")
    return RunConfig(experiment, sweep, analysis, sections["run"].get("teacher_checkpoint"))


def load_config(path, seed_override: int | None = None, method_override: str | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    return parse_config(text, seed_override, method_override)


def default_config(seed_override: int | None = None, method_override: str | None = None) -> RunConfig:
    return parse_config("", seed_override, method_override)


def format_config(run: RunConfig) -> str:
    """Render a config back into the key/value format (round-trips through parse)."""
    exp = run.experiment
    objs = {"experiment": exp, "data": exp.data, "schedule": exp.schedule,
            "distill": exp.distill, "sweep": run.sweep, "analysis": run.analysis, "run": run}
    out = []
    for key, (section, name, _) in KEYS.items():
        value = getattr(objs[section], name)
        if value is None:
            text = "none"
        elif isinstance(value, tuple):
            text = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            text = "true" if value else "false"
        else:
            text = str(value)
        out.append(f"{key} = {text}")
    return "\n".join(out) + "\n"
