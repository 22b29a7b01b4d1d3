"""Post-hoc analyses: difficulty buckets, per-bucket temperatures, confidence."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dtkd import net
from dtkd.data import DatasetSplit
from dtkd.distill import batch_temperatures
from dtkd.harness import Table
from dtkd.net import MlpParams
from dtkd.numkit import DomainError, as_logits, make_rng, softmax_rows

BUCKETS = ("hard", "middle", "easy")


@dataclass(frozen=True)
class DifficultyBuckets:
    easy: np.ndarray
    middle: np.ndarray
    hard: np.ndarray

    def items(self):
        return (("hard", self.hard), ("middle", self.middle), ("easy", self.easy))


def bucket_difficulty(teacher_logits) -> DifficultyBuckets:
    """Split samples into thirds by the teacher's signed max logit.

    The lowest ~33% (least confident) are hard, the highest ~33% easy and the
    middle absorbs the rounding remainder. Equal maxima keep their original
    index order (stable sort).
    """
    z = as_logits(teacher_logits)
    n = z.shape[0]
    if n < 3:
        raise DomainError(f"need at least 3 samples to bucket, got {n}")
    order = np.argsort(z.max(axis=1), kind="stable")
    edge = math.floor(0.33 * n + 0.5)
    return DifficultyBuckets(easy=np.sort(order[n - edge:]),
                             middle=np.sort(order[edge:n - edge]),
                             hard=np.sort(order[:edge]))


def bucket_temperature_report(teacher_logits, student_logits, tau_ref: float,
                              buckets: DifficultyBuckets, epsilon_floor: float = 1e-6) -> Table:
    """Mean dynamic (T_tea, T_stu) per bucket; degenerate rows count at (tau, tau)."""
    temps = batch_temperatures(teacher_logits, student_logits, tau_ref, epsilon_floor)
    rows = []
    for name, idx in buckets.items():
        rows.append([name, len(idx), float(temps.t_teacher[idx].mean()),
                     float(temps.t_student[idx].mean()), int(temps.degenerate[idx].sum())])
    return Table(["bucket", "n", "mean_t_teacher", "mean_t_student", "degenerate"], rows)


def bucket_accuracy_report(params: MlpParams, split: DatasetSplit, buckets: DifficultyBuckets) -> Table:
    pred = np.argmax(net.predict(params, split.features), axis=1)
    hit = pred == split.labels
    return Table(["bucket", "n", "accuracy"],
                 [[name, len(idx), float(hit[idx].mean())] for name, idx in buckets.items()])


def confidence_summary(params: MlpParams, split: DatasetSplit, sample_count: int, seed: int) -> float:
    """Mean max softmax probability over a seeded sample without replacement."""
    if not 1 <= sample_count <= len(split):
        raise DomainError(f"sample_count must be in [1, {len(split)}], got {sample_count}")
    idx = make_rng(seed).choice(len(split), size=sample_count, replace=False)
    probs = softmax_rows(net.predict(params, split.features[idx]))
    return float(probs.max(axis=1).mean())


def report_path(out_dir, experiment_id: str, analysis: str) -> Path:
    return Path(out_dir) / f"{experiment_id}_{analysis}.csv"
