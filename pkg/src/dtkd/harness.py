"""Experiment orchestration: teacher pretraining, distillation runs and sweeps."""

from __future__ import annotations

import io
import logging
import math
from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from dtkd import net
from dtkd.data import DatasetSplit, batch_indices, gen_synthetic, load_dataset
from dtkd.distill import DistillConfig, LossBreakdown, ce_logit_gradient, loss_and_gradient
from dtkd.net import MlpParams, MlpSpec, TrainSchedule
from dtkd.numkit import DomainError, log_softmax_rows

log = logging.getLogger(__name__)

METHODS = ("baseline_ce", "kd_fixed", "kd_asymmetric", "dtkd", "dkd_fixed", "dkd_dtkd")
METRIC_COLUMNS = ("epoch", "train_acc", "test_acc", "loss_total", "loss_dtkd", "loss_kl",
                  "loss_ce", "mean_t_teacher", "mean_t_student", "degenerate_frac")
ABLATION_ROWS = {(True, True): "TCKD+NCKD", (True, False): "TCKD", (False, True): "NCKD"}


@dataclass(frozen=True)
class DataConfig:
    n_classes: int = 10
    dim: int = 32
    n_train: int = 5000
    n_test: int = 1000
    class_spread: float = 3.0
    overlap: float = 0.9
    seed: int = 42
    train_path: str | None = None
    test_path: str | None = None

    def load(self) -> tuple[DatasetSplit, DatasetSplit]:
        if (self.train_path is None) != (self.test_path is None):
            raise DomainError("data.train_path and data.test_path must be given together")
        if self.train_path is None:
            return gen_synthetic(self.n_classes, self.dim, self.n_train, self.n_test,
                                 self.class_spread, self.overlap, self.seed)
        train, test = load_dataset(self.train_path), load_dataset(self.test_path)
        for split, path in ((train, self.train_path), (test, self.test_path)):
            if split.dim != self.dim or split.n_classes != self.n_classes:
                raise DomainError(
                    f"{path}: dataset has dim {split.dim} and {split.n_classes} classes, "
                    f"config expects {self.dim} and {self.n_classes}")
        return train, test


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    teacher_hidden: tuple[int, ...] = (256, 256)
    student_hidden: tuple[int, ...] = (32,)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    distill: DistillConfig = field(default_factory=DistillConfig)
    method: str = "dtkd"
    seeds: tuple[int, ...] = (42,)
    experiment_id: str = "dtkd"

    def __post_init__(self):
        if self.method not in METHODS:
            raise DomainError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.method == "kd_asymmetric" and self.distill.kl_t_teacher is None:
            raise DomainError("kd_asymmetric needs distill.kl_t_teacher and distill.kl_t_student")
        if not self.seeds:
            raise DomainError("at least one seed is required")

    @property
    def teacher(self) -> MlpSpec:
        return MlpSpec((self.data.dim, *self.teacher_hidden, self.data.n_classes))

    @property
    def student(self) -> MlpSpec:
        return MlpSpec((self.data.dim, *self.student_hidden, self.data.n_classes))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, schedule=replace(self.schedule, seed=seed))


@dataclass
class MetricsRecord:
    epoch: int
    train_accuracy: float
    test_accuracy: float
    loss_total: float
    loss_dtkd: float
    loss_kl: float
    loss_ce: float
    mean_t_teacher: float
    mean_t_student: float
    degenerate_fraction: float

    def row(self) -> tuple:
        return (self.epoch, self.train_accuracy, self.test_accuracy, self.loss_total,
                self.loss_dtkd, self.loss_kl, self.loss_ce, self.mean_t_teacher,
                self.mean_t_student, self.degenerate_fraction)


def method_config(cfg: DistillConfig, method: str) -> DistillConfig:
    """Loss configuration a method actually trains with."""
    if method == "baseline_ce":
        return replace(cfg, alpha=0.0, beta=0.0, dkd_mode="off", kl_t_teacher=None, kl_t_student=None)
    if method == "kd_fixed":
        return replace(cfg, alpha=0.0, dkd_mode="off", kl_t_teacher=None, kl_t_student=None)
    if method == "kd_asymmetric":
        return replace(cfg, alpha=0.0, dkd_mode="off")
    if method == "dtkd":
        return replace(cfg, dkd_mode="off", kl_t_teacher=None, kl_t_student=None)
    if method == "dkd_fixed":
        return replace(cfg, beta=0.0, dkd_mode="fixed_temp", kl_t_teacher=None, kl_t_student=None)
    if method == "dkd_dtkd":
        return replace(cfg, beta=0.0, dkd_mode="dtkd_temp", kl_t_teacher=None, kl_t_student=None)
    raise DomainError(f"unknown method {method!r}")


def accuracy(params: MlpParams, split: DatasetSplit) -> float:
    logits = net.predict(params, split.features)
    return float(np.mean(np.argmax(logits, axis=1) == split.labels))


def as_stored(params: MlpParams) -> MlpParams:
    """Round parameters to what a checkpoint file holds (float32)."""
    return MlpParams([w.astype(np.float32).astype(np.float64) for w in params.weights],
                     [b.astype(np.float32).astype(np.float64) for b in params.biases])


class _EpochStats:
    def __init__(self):
        self.n = 0
        self.sums = np.zeros(4)  # total, dtkd, kl, ce
        self.t_tea = 0.0
        self.t_stu = 0.0
        self.n_temps = 0
        self.n_degenerate = 0
        self.has_temps = False

    def add(self, bd: LossBreakdown | None, n: int, ce: float | None = None):
        self.n += n
        if bd is None:
            self.sums += n * np.array([ce, 0.0, 0.0, ce])
            return
        self.sums += n * np.array([bd.total, bd.dtkd_term, bd.fixed_kl_term, bd.ce_term])
        temps = bd.per_sample_temps
        ok = ~temps.degenerate
        self.has_temps = True
        self.t_tea += float(temps.t_teacher[ok].sum())
        self.t_stu += float(temps.t_student[ok].sum())
        self.n_temps += int(ok.sum())
        self.n_degenerate += int((~ok).sum())

    def record(self, epoch, train_acc, test_acc, tau) -> MetricsRecord:
        total, dtkd, kl, ce = self.sums / max(self.n, 1)
        if not self.has_temps:
            t_tea = t_stu = math.nan
        elif self.n_temps:
            t_tea, t_stu = self.t_tea / self.n_temps, self.t_stu / self.n_temps
        else:
            t_tea = t_stu = tau
        return MetricsRecord(epoch, train_acc, test_acc, float(total), float(dtkd), float(kl),
                             float(ce), t_tea, t_stu, self.n_degenerate / max(self.n, 1))


StepFn = Callable[[np.ndarray, np.ndarray, np.ndarray], tuple[np.ndarray, "LossBreakdown | None", float | None]]


def _fit(spec: MlpSpec, schedule: TrainSchedule, train: DatasetSplit, test: DatasetSplit,
         step: StepFn, tau: float, on_batch=None) -> tuple[MlpParams, list[MetricsRecord]]:
    params = net.new_params(spec, schedule.seed)
    velocity = net.zero_velocity(params)
    records = []
    for epoch in range(schedule.epochs):
        lr = net.lr_at(schedule, epoch)
        stats = _EpochStats()
        for idx in batch_indices(len(train), schedule.batch_size, schedule.seed, epoch):
            logits, cache = net.forward(params, train.features[idx])
            if not np.all(np.isfinite(logits)):
                raise FloatingPointError(f"logits diverged in epoch {epoch}")
            grad, bd, ce = step(idx, logits, train.labels[idx])
            stats.add(bd, len(idx), ce)
            if on_batch is not None and bd is not None:
                on_batch(epoch, bd)
            grads = net.backward(params, cache, grad)
            net.sgd_step(params, grads, schedule, velocity, lr)
        if not all(np.all(np.isfinite(p)) for p in params.arrays()):
            raise FloatingPointError(f"parameters diverged in epoch {epoch}")
        records.append(stats.record(epoch, accuracy(params, train), accuracy(params, test), tau))
    return params, records


def train_teacher(config: ExperimentConfig, checkpoint_path=None,
                  data: tuple[DatasetSplit, DatasetSplit] | None = None,
                  ) -> tuple[MlpParams, list[MetricsRecord]]:
    """Cross-entropy training of the teacher; returns float32-rounded parameters."""
    train, test = data if data is not None else config.data.load()
    _check_compatible(config.teacher, train, "teacher")

    def step(idx, logits, labels):
        n = len(labels)
        ce = float(-log_softmax_rows(logits)[np.arange(n), labels].mean())
        grad = np.zeros_like(logits)
        grad += (1.0 / n) * ce_logit_gradient(logits, labels)
        return grad, None, ce

    params, records = _fit(config.teacher, config.schedule, train, test, step,
                           config.distill.tau_ref)
    params = as_stored(params)
    if checkpoint_path is not None:
        _write(checkpoint_path, lambda p: net.store_checkpoint(params, p))
    return params, records


def _check_compatible(spec: MlpSpec, split: DatasetSplit, what: str):
    if spec.n_inputs != split.dim or spec.n_classes != split.n_classes:
        raise DomainError(
            f"{what} network {spec.layer_sizes} does not fit data with dim {split.dim} "
            f"and {split.n_classes} classes")


def _write(path, writer):
    try:
        writer(path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def distill(config: ExperimentConfig, teacher: MlpParams, checkpoint_path=None,
            data: tuple[DatasetSplit, DatasetSplit] | None = None, on_batch=None,
            ) -> tuple[MlpParams, list[MetricsRecord]]:
    """Distil ``teacher`` into a fresh student with ``config.method``.

    ``on_batch(epoch, breakdown)`` is called after every batch's loss.
    """
    train, test = data if data is not None else config.data.load()
    if teacher.layer_sizes[0] != train.dim or teacher.layer_sizes[-1] != train.n_classes:
        raise DomainError(
            f"teacher checkpoint {teacher.layer_sizes} does not fit data with dim {train.dim} "
            f"and {train.n_classes} classes")
    _check_compatible(config.student, train, "student")
    cfg = method_config(config.distill, config.method)
    teacher_logits = net.predict(teacher, train.features)

    def step(idx, logits, labels):
        bd, grad = loss_and_gradient(teacher_logits[idx], logits, labels, cfg)
        return grad, bd, None

    params, records = _fit(config.student, config.schedule, train, test, step,
                           cfg.tau_ref, on_batch)
    params = as_stored(params)
    if checkpoint_path is not None:
        _write(checkpoint_path, lambda p: net.store_checkpoint(params, p))
    return params, records


# -- metrics / tables ------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".10g")
    return str(v)


def format_metrics(records: Sequence[MetricsRecord]) -> str:
    lines = [",".join(METRIC_COLUMNS)]
    lines += [",".join(_fmt(v) for v in r.row()) for r in records]
    return "\n".join(lines) + "\n"


def write_metrics(records: Sequence[MetricsRecord], path) -> None:
    _write(path, lambda p: Path(p).write_text(format_metrics(records)))


def read_metrics(path) -> list[MetricsRecord]:
    lines = Path(path).read_text().splitlines()
    if not lines or tuple(lines[0].split(",")) != METRIC_COLUMNS:
        raise ValueError(f"{path}: unexpected metrics header")
    out = []
    for line in lines[1:]:
        vals = line.split(",")
        out.append(MetricsRecord(int(vals[0]), *(float(v) for v in vals[1:])))
    return out


@dataclass
class Table:
    columns: list[str]
    rows: list[list]
    notes: list[str] = field(default_factory=list)

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(self.columns) + "\n")
        for row in self.rows:
            buf.write(",".join(_fmt(v) for v in row) + "\n")
        for note in self.notes:
            buf.write(f"# {note}\n")
        return buf.getvalue()

    def cell(self, row_key, column: str):
        j = self.columns.index(column)
        for row in self.rows:
            if row[0] == row_key:
                return row[j]
        raise KeyError(row_key)


def _final_accuracy(args) -> float:
    config, teacher, data = args
    _, records = distill(config, teacher, data=data)
    return records[-1].test_accuracy if records else math.nan


def run_many(configs: Sequence[ExperimentConfig], teacher: MlpParams,
             data: tuple[DatasetSplit, DatasetSplit] | None = None, jobs: int = 1) -> list[float]:
    """Final test accuracy for each config, in input order."""
    if data is None:
        data = configs[0].data.load()
    tasks = [(c, teacher, data) for c in configs]
    if jobs <= 1 or len(tasks) <= 1:
        return [_final_accuracy(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_final_accuracy, tasks))


def _seed_mean(config: ExperimentConfig, variants: list[ExperimentConfig], teacher, data, jobs):
    runs = [v.with_seed(s) for v in variants for s in config.seeds]
    accs = run_many(runs, teacher, data, jobs)
    k = len(config.seeds)
    return [float(np.mean(accs[i * k:(i + 1) * k])) for i in range(len(variants))]


def sweep_reference_temperature(config: ExperimentConfig, teacher: MlpParams,
                                taus: Sequence[float], methods: Sequence[str] = ("kd_fixed", "dtkd"),
                                data=None, jobs: int = 1) -> Table:
    """Mean final test accuracy (over ``config.seeds``) per reference temperature and method."""
    if not taus or any(not t > 0 for t in taus):
        raise DomainError("taus must be a non-empty list of positive temperatures")
    variants = [replace(config, method=m, distill=replace(config.distill, tau_ref=float(t)))
                for t in taus for m in methods]
    means = _seed_mean(config, variants, teacher, data, jobs)
    rows = [[float(t), *means[i * len(methods):(i + 1) * len(methods)]] for i, t in enumerate(taus)]
    return Table(["tau", *methods], rows)


def ablate_tckd_nckd(config: ExperimentConfig, teacher: MlpParams,
                     flags: Sequence[tuple[bool, bool]] = ((True, True), (True, False), (False, True)),
                     data=None, jobs: int = 1) -> Table:
    """DKD with subsets of {TCKD, NCKD}, at the fixed and at the dynamic temperatures.

    Term weights are 1 (alpha = 1, beta = 0); gamma comes from the config.
    Columns hold mean final test accuracy over seeds.
    """
    flags = [tuple(bool(b) for b in f) for f in flags]
    if not flags or any(f == (False, False) for f in flags):
        raise DomainError("each flag set must enable at least one of TCKD/NCKD")
    variants = []
    for tckd, nckd in flags:
        base = replace(config.distill, alpha=1.0, beta=0.0, tckd_enabled=tckd, nckd_enabled=nckd)
        variants.append(replace(config, method="dkd_fixed", distill=base))
        variants.append(replace(config, method="dkd_dtkd", distill=base))
    means = _seed_mean(config, variants, teacher, data, jobs)
    rows, notes = [], []
    for i, f in enumerate(flags):
        label = ABLATION_ROWS[f]
        rows.append([label, means[2 * i], means[2 * i + 1]])
        if config.distill.gamma == 0 and not f[0]:
            notes.append(f"{label}: no target signal (gamma = 0 and TCKD disabled)")
            log.warning("ablation row %s trains without any target-class signal", label)
    return Table(["terms", "dkd_fixed", "dkd_dtkd"], rows, notes)


def sweep_loss_weights(config: ExperimentConfig, teacher: MlpParams, alphas: Sequence[float],
                       betas: Sequence[float], data=None, jobs: int = 1) -> Table:
    """DTKD accuracy over an (alpha, beta) grid with gamma = 1; rows are beta."""
    if not alphas or not betas:
        raise DomainError("alpha and beta grids must be non-empty")
    variants = [replace(config, method="dtkd",
                        distill=replace(config.distill, alpha=float(a), beta=float(b), gamma=1.0))
                for b in betas for a in alphas]
    means = _seed_mean(config, variants, teacher, data, jobs)
    na = len(alphas)
    rows = [[float(b), *means[i * na:(i + 1) * na]] for i, b in enumerate(betas)]
    return Table(["beta\\alpha", *(_fmt(float(a)) for a in alphas)], rows)
