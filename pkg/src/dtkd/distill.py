"""Dynamic-temperature distillation losses and their student-logit gradients.

Per sample, the teacher row ``u`` and student row ``v`` get temperatures

    T_tea = 2x / (x + y) * tau,    T_stu = 2y / (x + y) * tau

where ``x`` and ``y`` are the row maxima of ``u`` and ``v``. These make
``x / T_tea == y / T_stu``, so the largest scaled logits coincide, which is
what bounds the logsumexp ("sharpness") gap between the two rows.

Every distillation term here has the shape ``T_a * T_b * D(p, q)`` with
``p = softmax(u / T_a)`` and ``q = softmax(v / T_b)``. The divergence helpers
return ``D`` together with its gradients with respect to the *scaled* logits
``v / T_b`` and ``u / T_a``; the second one is only needed to push gradients
through the temperatures themselves (``temp_grad_mode="flow"``).
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from dtkd.numkit import (
    DomainError,
    as_logits,
    kl_rows,
    log_softmax_rows,
    logsumexp_rows,
    softmax_rows,
)

TEMP_GRAD_MODES = ("flow", "detach")
DKD_MODES = ("off", "fixed_temp", "dtkd_temp")
MAX_MODES = ("signed", "abs")


class DegenerateError(DomainError):
    """Non-target probability mass vanished, so NCKD is undefined."""


@dataclass(frozen=True)
class TemperaturePair:
    t_teacher: float
    t_student: float
    delta: float
    reference: float
    degenerate: bool = False


class Temperatures(Sequence):
    """Per-sample temperature pairs for a batch, stored as arrays.

    Indexing yields :class:`TemperaturePair`. ``teacher_max``/``student_max``
    are the row maxima the pairs were derived from and ``student_argmax`` the
    coordinate that carries the temperature gradient in flow mode.
    """

    def __init__(self, t_teacher, t_student, delta, reference, degenerate,
                 teacher_max, student_max, student_argmax):
        self.t_teacher = t_teacher
        self.t_student = t_student
        self.delta = delta
        self.reference = float(reference)
        self.degenerate = degenerate
        self.teacher_max = teacher_max
        self.student_max = student_max
        self.student_argmax = student_argmax

    def __len__(self):
        return len(self.t_teacher)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        return TemperaturePair(
            float(self.t_teacher[i]),
            float(self.t_student[i]),
            float(self.delta[i]),
            self.reference,
            bool(self.degenerate[i]),
        )

    def __repr__(self):
        return (f"Temperatures(n={len(self)}, reference={self.reference}, "
                f"degenerate={int(self.degenerate.sum())})")


@dataclass(frozen=True)
class DistillConfig:
    tau_ref: float = 4.0
    alpha: float = 3.0
    beta: float = 1.0
    gamma: float = 1.0
    temp_grad_mode: str = "flow"
    dkd_mode: str = "off"
    tckd_enabled: bool = True
    nckd_enabled: bool = True
    epsilon_floor: float = 1e-6
    max_mode: str = "signed"
    # when both are set, the fixed-KL term uses these instead of tau_ref
    kl_t_teacher: float | None = None
    kl_t_student: float | None = None

    def __post_init__(self):
        if not self.tau_ref > 0:
            raise DomainError(f"tau_ref must be positive, got {self.tau_ref}")
        if not self.epsilon_floor > 0:
            raise DomainError("epsilon_floor must be positive")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise DomainError("loss weights must be non-negative")
        if max(self.alpha, self.beta, self.gamma) <= 0:
            raise DomainError("at least one of alpha, beta, gamma must be positive")
        if self.temp_grad_mode not in TEMP_GRAD_MODES:
            raise DomainError(f"temp_grad_mode must be one of {TEMP_GRAD_MODES}")
        if self.dkd_mode not in DKD_MODES:
            raise DomainError(f"dkd_mode must be one of {DKD_MODES}")
        if self.max_mode not in MAX_MODES:
            raise DomainError(f"max_mode must be one of {MAX_MODES}")
        if (self.kl_t_teacher is None) != (self.kl_t_student is None):
            raise DomainError("kl_t_teacher and kl_t_student must be set together")
        if self.kl_t_teacher is not None and min(self.kl_t_teacher, self.kl_t_student) <= 0:
            raise DomainError("fixed KL temperatures must be positive")
        if self.dkd_mode != "off" and not (self.tckd_enabled or self.nckd_enabled):
            raise DomainError("DKD needs at least one of TCKD/NCKD enabled")

    @property
    def kl_temperatures(self) -> tuple[float, float]:
        if self.kl_t_teacher is None:
            return self.tau_ref, self.tau_ref
        return self.kl_t_teacher, self.kl_t_student


@dataclass
class LossBreakdown:
    dtkd_term: float
    fixed_kl_term: float
    ce_term: float
    total: float
    per_sample_temps: Temperatures = field(repr=False)


@dataclass(frozen=True)
class DkdTerms:
    tckd: float
    nckd: float
    teacher_target_prob: float


# -- temperatures --------------------------------------------------------------

def sharpness(logits, T: float) -> np.ndarray:
    """logsumexp(row / T) for every row."""
    if not T > 0:
        raise DomainError(f"temperature must be positive, got {T}")
    z = as_logits(logits)
    return logsumexp_rows(z / T)


def _row_extreme(z: np.ndarray, max_mode: str):
    rows = np.arange(z.shape[0])
    if max_mode == "abs":
        idx = np.argmax(np.abs(z), axis=1)
        return np.abs(z[rows, idx]), idx
    idx = np.argmax(z, axis=1)
    return z[rows, idx], idx


def batch_temperatures(teacher, student, tau_ref: float, epsilon_floor: float = 1e-6,
                       max_mode: str = "signed") -> Temperatures:
    """Dynamic temperature pairs for every row of a teacher/student batch.

    A row is degenerate (and falls back to ``(tau_ref, tau_ref)``) when
    ``x + y <= epsilon_floor`` or when either maximum is non-positive, since
    the closed form would then hand out a non-positive temperature.
    """
    if not tau_ref > 0:
        raise DomainError(f"tau_ref must be positive, got {tau_ref}")
    u = as_logits(teacher)
    v = as_logits(student)
    if u.shape != v.shape:
        raise DomainError(f"shape mismatch: teacher {u.shape} vs student {v.shape}")
    x, _ = _row_extreme(u, max_mode)
    y, y_idx = _row_extreme(v, max_mode)
    s = x + y
    ok = (s > epsilon_floor) & (x > 0) & (y > 0)
    delta = np.zeros_like(s)
    delta[ok] = tau_ref * (x[ok] - y[ok]) / s[ok]
    return Temperatures(
        t_teacher=tau_ref + delta,
        t_student=tau_ref - delta,
        delta=delta,
        reference=tau_ref,
        degenerate=~ok,
        teacher_max=x,
        student_max=y,
        student_argmax=y_idx,
    )


def dynamic_temperatures(teacher_row, student_row, tau_ref: float,
                         epsilon_floor: float = 1e-6, max_mode: str = "signed") -> TemperaturePair:
    u = np.asarray(teacher_row, dtype=np.float64)
    v = np.asarray(student_row, dtype=np.float64)
    if u.ndim != 1 or u.shape != v.shape:
        raise DomainError("teacher and student rows must be 1-D and the same length")
    return batch_temperatures(u[None, :], v[None, :], tau_ref, epsilon_floor, max_mode)[0]


# -- divergences ---------------------------------------------------------------
# Each returns (D, g, h): per-row divergence values, dD/d(v/T_s) and dD/d(u/T_t).

def _kl_divergence(u, v, t_tea, t_stu):
    log_p = log_softmax_rows(u, t_tea)
    log_q = log_softmax_rows(v, t_stu)
    d = kl_rows(log_p, log_q)
    p = np.exp(log_p)
    g = np.exp(log_q) - p
    h = p * (log_p - log_q - d[:, None])
    return d, g, h


def _split_target(z, target):
    n, k = z.shape
    mask = np.ones((n, k), dtype=bool)
    mask[np.arange(n), target] = False
    return z[np.arange(n), target], z[mask].reshape(n, k - 1), mask


def _dkd_parts(u, v, t_tea, t_stu, target):
    """TCKD and NCKD per row, with gradients, evaluated in log space."""
    n, k = u.shape
    su, sv = u / t_tea, v / t_stu
    ut, unt, mask = _split_target(su, target)
    vt, vnt, _ = _split_target(sv, target)
    lse_u, lse_v = logsumexp_rows(su), logsumexp_rows(sv)
    lse_unt, lse_vnt = logsumexp_rows(unt), logsumexp_rows(vnt)

    # binary target / rest split
    lp_t, lp_r = ut - lse_u, lse_unt - lse_u
    lq_t, lq_r = vt - lse_v, lse_vnt - lse_v
    p_t, p_r = np.exp(lp_t), np.exp(lp_r)
    q_t = np.exp(lq_t)
    tckd = p_t * (lp_t - lq_t) + p_r * (lp_r - lq_r)

    # renormalised non-target distributions
    log_ph = unt - lse_unt[:, None]
    log_qh = vnt - lse_vnt[:, None]
    nckd = kl_rows(log_ph, log_qh)
    ph, qh = np.exp(log_ph), np.exp(log_qh)

    rows = np.arange(n)
    g_t = np.zeros((n, k))
    g_t[rows, target] = q_t - p_t
    g_t[mask] = (-(q_t - p_t)[:, None] * qh).ravel()

    p_full = softmax_rows(su)
    r = (lp_t - lq_t) - (lp_r - lq_r)
    h_t = -(r * p_t)[:, None] * p_full
    h_t[rows, target] += r * p_t

    g_n = np.zeros((n, k))
    g_n[mask] = (qh - ph).ravel()
    h_n = np.zeros((n, k))
    h_n[mask] = (ph * (log_ph - log_qh - nckd[:, None])).ravel()
    return (tckd, g_t, h_t), (nckd, g_n, h_n), p_t


def _dkd_divergence(u, v, t_tea, t_stu, target, use_tckd, use_nckd):
    (tc, gt, ht), (nc, gn, hn), _ = _dkd_parts(u, v, t_tea, t_stu, target)
    d = np.zeros(u.shape[0])
    g = np.zeros_like(u)
    h = np.zeros_like(u)
    if use_tckd:
        d, g, h = d + tc, g + gt, h + ht
    if use_nckd:
        d, g, h = d + nc, g + gn, h + hn
    return d, g, h


def _scaled_term(u, v, t_tea, t_stu, divergence):
    """Per-row T_tea*T_stu*D and its direct gradient w.r.t. the student logits."""
    tt = np.broadcast_to(np.asarray(t_tea, dtype=np.float64), (u.shape[0],))[:, None]
    ts = np.broadcast_to(np.asarray(t_stu, dtype=np.float64), (u.shape[0],))[:, None]
    d, g, h = divergence(u, v, tt, ts)
    loss = tt[:, 0] * ts[:, 0] * d
    grad = tt * g
    return loss, grad, (d, g, h, tt[:, 0], ts[:, 0])


def _temperature_flow(u, v, temps: Temperatures, parts, max_mode):
    """Extra student-logit gradient from T_tea(y), T_stu(y), y = max of v."""
    d, g, h, tt, ts = parts
    ok = ~temps.degenerate
    out = np.zeros_like(v)
    if not np.any(ok):
        return out
    x, y, tau = temps.teacher_max, temps.student_max, temps.reference
    dL_dtt = ts * d - ts * np.einsum("ij,ij->i", h, u) / tt
    dL_dts = tt * d - tt * np.einsum("ij,ij->i", g, v) / ts
    c = np.zeros_like(x)
    c[ok] = 2.0 * x[ok] * tau / (x[ok] + y[ok]) ** 2  # dT_stu/dy = -dT_tea/dy
    dL_dy = c * (dL_dts - dL_dtt)
    rows = np.arange(v.shape[0])
    idx = temps.student_argmax
    dy_dv = np.sign(v[rows, idx]) if max_mode == "abs" else 1.0
    out[rows[ok], idx[ok]] = (dL_dy * dy_dv)[ok]
    return out


# -- public losses -------------------------------------------------------------

def _pair(teacher, student):
    u, v = as_logits(teacher), as_logits(student)
    if u.shape != v.shape:
        raise DomainError(f"shape mismatch: teacher {u.shape} vs student {v.shape}")
    return u, v


def dtkd_loss(teacher, student, config: DistillConfig) -> tuple[float, Temperatures]:
    u, v = _pair(teacher, student)
    temps = batch_temperatures(u, v, config.tau_ref, config.epsilon_floor, config.max_mode)
    loss, _, _ = _scaled_term(u, v, temps.t_teacher, temps.t_student, _kl_divergence)
    return float(loss.mean()), temps


def kd_loss_asymmetric(teacher, student, t_teacher: float, t_student: float) -> float:
    if not (t_teacher > 0 and t_student > 0):
        raise DomainError("temperatures must be positive")
    u, v = _pair(teacher, student)
    loss, _, _ = _scaled_term(u, v, t_teacher, t_student, _kl_divergence)
    return float(loss.mean())


def kd_loss_fixed(teacher, student, tau: float) -> float:
    if not tau > 0:
        raise DomainError(f"tau must be positive, got {tau}")
    return kd_loss_asymmetric(teacher, student, tau, tau)


def dkd_terms(teacher_row, student_row, t_teacher: float, t_student: float,
              target: int) -> DkdTerms:
    if not (t_teacher > 0 and t_student > 0):
        raise DomainError("temperatures must be positive")
    u = as_logits(np.asarray(teacher_row, dtype=np.float64)[None, :])
    v = as_logits(np.asarray(student_row, dtype=np.float64)[None, :])
    if u.shape != v.shape:
        raise DomainError("rows must have the same length")
    if not 0 <= target < u.shape[1]:
        raise DomainError(f"target {target} out of range")
    p_t = softmax_rows(u, t_teacher)[0, target]
    q_t = softmax_rows(v, t_student)[0, target]
    if p_t >= 1 - 1e-15 or q_t >= 1 - 1e-15:
        raise DegenerateError("target probability is 1; non-target mass vanished")
    (tc, _, _), (nc, _, _), _ = _dkd_parts(u, v, t_teacher, t_student, np.array([target]))
    return DkdTerms(tckd=max(float(tc[0]), 0.0), nckd=max(float(nc[0]), 0.0),
                    teacher_target_prob=float(p_t))


def _check_labels(labels, n, k):
    y = np.asarray(labels)
    if y.shape != (n,) or not np.issubdtype(y.dtype, np.integer):
        raise DomainError(f"labels must be {n} integer class indices")
    if np.any(y < 0) or np.any(y >= k):
        raise DomainError("label out of range")
    return y


def loss_and_gradient(teacher, student, labels, config: DistillConfig,
                      need_grad: bool = True, temperatures: Temperatures | None = None,
                      ) -> tuple[LossBreakdown, np.ndarray | None]:
    """Combined loss and (optionally) its gradient w.r.t. the student logits.

    ``dtkd_term`` holds the dynamic-temperature distillation term; under
    ``dkd_mode != "off"`` it holds the DKD term instead (at the dynamic or the
    fixed reference temperature). ``per_sample_temps`` always reports the
    dynamic pairs, whichever term uses them.

    Passing ``temperatures`` pins the dynamic pairs instead of deriving them
    from the logits; this is the function that detach-mode gradients
    differentiate.
    """
    u, v = _pair(teacher, student)
    n, k = v.shape
    y = _check_labels(labels, n, k)
    cfg = config
    if temperatures is None:
        temps = batch_temperatures(u, v, cfg.tau_ref, cfg.epsilon_floor, cfg.max_mode)
        can_flow = True
    else:
        temps, can_flow = temperatures, False
    grad = np.zeros_like(v) if need_grad else None

    if cfg.dkd_mode == "off":
        div = _kl_divergence
    else:
        def div(a, b, ta, tb):
            return _dkd_divergence(a, b, ta, tb, y, cfg.tckd_enabled, cfg.nckd_enabled)
    if cfg.dkd_mode == "fixed_temp":
        main, main_grad, _ = _scaled_term(u, v, cfg.tau_ref, cfg.tau_ref, div)
    else:
        main, main_grad, parts = _scaled_term(u, v, temps.t_teacher, temps.t_student, div)
        if need_grad and can_flow and cfg.alpha > 0 and cfg.temp_grad_mode == "flow":
            main_grad = main_grad + _temperature_flow(u, v, temps, parts, cfg.max_mode)

    kt, ks = cfg.kl_temperatures
    kl, kl_grad, _ = _scaled_term(u, v, kt, ks, _kl_divergence)

    log_q1 = log_softmax_rows(v)
    ce = -log_q1[np.arange(n), y]

    dtkd_term, kl_term, ce_term = float(main.mean()), float(kl.mean()), float(ce.mean())
    total = cfg.alpha * dtkd_term + cfg.beta * kl_term + cfg.gamma * ce_term

    if need_grad:
        if cfg.alpha > 0:
            grad += (cfg.alpha / n) * main_grad
        if cfg.beta > 0:
            grad += (cfg.beta / n) * kl_grad
        if cfg.gamma > 0:
            grad += (cfg.gamma / n) * ce_logit_gradient(v, y)

    breakdown = LossBreakdown(dtkd_term, kl_term, ce_term, total, temps)
    return breakdown, grad


def ce_logit_gradient(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-row d CE / d logits = softmax - onehot (not divided by N)."""
    g = softmax_rows(logits)
    g[np.arange(len(labels)), labels] -= 1.0
    return g


def combined_loss(teacher, student, labels, config: DistillConfig,
                  temperatures: Temperatures | None = None) -> LossBreakdown:
    return loss_and_gradient(teacher, student, labels, config, need_grad=False,
                             temperatures=temperatures)[0]


def student_logit_gradient(teacher, student, labels, config: DistillConfig) -> np.ndarray:
    return loss_and_gradient(teacher, student, labels, config)[1]
