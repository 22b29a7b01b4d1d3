"""Numerically stable primitives shared by every other module.

Row-level functions (``logsumexp``, ``tempered_softmax``, ...) operate on a
single 1-D vector. The ``*_rows`` variants are their batched counterparts and
are what the loss code actually calls; both go through the same max-shift.
All arithmetic is float64.
"""

from __future__ import annotations

import numpy as np


class DomainError(ValueError):
    """Input outside the domain of a numerical operation."""


def make_rng(seed: int | list[int]) -> np.random.Generator:
    """Seeded PCG64 generator. One generator per logical stream."""
    return np.random.Generator(np.random.PCG64(seed))


def _as_row(row) -> np.ndarray:
    z = np.asarray(row, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise DomainError("expected a non-empty 1-D row")
    if not np.all(np.isfinite(z)):
        raise DomainError("row contains non-finite entries")
    return z


def as_logits(values) -> np.ndarray:
    """Validate and return a float64 logit matrix (N >= 1 rows, K >= 2 cols)."""
    z = np.asarray(values, dtype=np.float64)
    if z.ndim != 2:
        raise DomainError(f"logit matrix must be 2-D, got shape {z.shape}")
    if z.shape[0] < 1 or z.shape[1] < 2:
        raise DomainError(f"logit matrix needs N >= 1 and K >= 2, got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise DomainError("logit matrix contains non-finite entries")
    return z


def _check_temperature(T) -> None:
    if np.any(np.asarray(T) <= 0):
        raise DomainError(f"temperature must be positive, got {T}")


# -- batched -----------------------------------------------------------------

def logsumexp_rows(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))[:, 0]


def log_softmax_rows(z: np.ndarray, T=1.0) -> np.ndarray:
    """log softmax(z / T) row-wise; ``T`` is a scalar or an (N, 1) column."""
    s = z / T
    m = s.max(axis=1, keepdims=True)
    shifted = s - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_rows(z: np.ndarray, T=1.0) -> np.ndarray:
    s = z / T
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def kl_rows(log_p: np.ndarray, log_q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p || q) from log-probabilities; 0 * log 0 counts as 0."""
    p = np.exp(log_p)
    terms = np.where(p > 0, p * (log_p - log_q), 0.0)
    return terms.sum(axis=1)


def row_max_rows(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # np.argmax returns the first occurrence on ties
    idx = np.argmax(z, axis=1)
    return z[np.arange(z.shape[0]), idx], idx


# -- single row --------------------------------------------------------------

def logsumexp(row) -> float:
    z = _as_row(row)
    return float(logsumexp_rows(z[None, :])[0])


def tempered_softmax(row, T: float) -> np.ndarray:
    _check_temperature(T)
    z = _as_row(row)
    return softmax_rows(z[None, :], T)[0]


def kl_div(p, q) -> float:
    """KL(p || q) for two probability vectors of equal length."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1 or p.size == 0:
        raise DomainError("p and q must be non-empty vectors of equal length")
    if np.any(p < 0) or np.any(q < 0):
        raise DomainError("probabilities must be non-negative")
    support = p > 0
    if np.any(q[support] == 0):
        raise DomainError("q has zero mass where p is positive")
    ps, qs = p[support], q[support]
    return max(float(np.sum(ps * (np.log(ps) - np.log(qs)))), 0.0)


def cross_entropy(row, label: int) -> float:
    z = _as_row(row)
    if not 0 <= label < z.size:
        raise DomainError(f"label {label} out of range for {z.size} classes")
    return float(-log_softmax_rows(z[None, :])[0, label])


def row_max(row) -> tuple[float, int]:
    z = _as_row(row)
    i = int(np.argmax(z))
    return float(z[i]), i
