"""Error metrics and paired significance testing.

RMSE is computed elementwise in raw (denormalized) units. The paired
t-test carries its own Student-t tail probability via the regularized
incomplete beta function (Lentz's continued fraction), so reports do
not depend on scipy; scipy only appears in tests as an oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError


def rmse(pred, truth):
    """Root mean squared error over all elements, raw units."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DataError(f"rmse shape mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise DataError("rmse of zero elements")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def _betacf(a, b, x):
    """Continued fraction for the incomplete beta (modified Lentz)."""
    max_iter = 300
    eps = 3e-16
    fpmin = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    return h  # converged to float precision long before this in practice


def betainc(a, b, x):
    """Regularized incomplete beta I_x(a, b) for a, b > 0, x in [0, 1]."""
    if a <= 0 or b <= 0:
        raise DataError("betainc needs positive shape parameters")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t_stat, dof):
    """P(|T_dof| >= |t|) for a Student t variable."""
    if dof < 1:
        raise DataError(f"t distribution needs dof >= 1, got {dof}")
    t_stat = float(t_stat)
    if math.isinf(t_stat):
        return 0.0
    return betainc(dof / 2.0, 0.5, dof / (dof + t_stat * t_stat))


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    dof: int
    mean_diff: float
    degenerate: bool = False  # zero-variance differences


def paired_t_test(a, b):
    """Two-sided paired t-test on aligned score arrays.

    ``mean_diff < 0`` means ``a`` scored lower (better, for errors).
    Zero-variance differences cannot support a t statistic; the result
    is flagged ``degenerate`` with p forced to 0 or 1 by the mean.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DataError(f"paired_t_test needs equal 1-D arrays, got {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise DataError("paired_t_test needs at least two pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        return TTestResult(
            t=math.inf if mean != 0 else 0.0,
            p=0.0 if mean != 0 else 1.0,
            dof=n - 1,
            mean_diff=mean,
            degenerate=True,
        )
    t_stat = mean / (sd / math.sqrt(n))
    return TTestResult(
        t=t_stat, p=t_two_sided_p(t_stat, n - 1), dof=n - 1, mean_diff=mean
    )
