"""Numerical checks of the convergence theory on recorded runs."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .linalg import thin_svd

LOSS_FLOOR = 1e-14
AT_SOLUTION = 1e-16


@dataclass(frozen=True)
class RateFit:
    rho: float
    r2: float
    window: tuple[int, int]


@dataclass(frozen=True)
class SpectralProbe:
    sigma_min: float
    sigma_max: float
    kappa: float
    rank: int


def pl_ratio(p, theta) -> float:
    """``||grad f||^2 / (2 f)``; bounded below by the local PL constant."""
    f = p.objective(theta)
    if f <= AT_SOLUTION:
        raise InvalidInputError(f"f(theta) = {f!r} is at the solution; PL ratio undefined")
    g = p.gradient(theta)
    return float(g @ g) / (2.0 * f)


def fit_rate(trace, window=None, key: str = "loss") -> RateFit:
    """Per-step contraction factor from a least-squares line through ``log key``.

    ``window`` is ``(start, end)`` in row indices; by default the second half
    of the trace.  Values below ``1e-14`` are dropped before fitting.
    ``trace`` may also be a plain sequence of numbers.
    """
    values = np.array([getattr(row, key) if hasattr(row, key) else row for row in trace], dtype=float)
    if window is None:
        window = (len(values) // 2, len(values))
    start, end = window
    t = np.arange(start, end)
    y = values[start:end]
    keep = np.isfinite(y) & (y > LOSS_FLOOR)
    t, y = t[keep], np.log(y[keep])
    if t.size < 5:
        raise InvalidInputError(f"need at least 5 usable rows to fit a rate, got {t.size}")
    slope, intercept = np.polyfit(t, y, 1)
    resid = y - (slope * t + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - float(resid @ resid) / ss_tot
    return RateFit(rho=float(np.exp(slope)), r2=r2, window=(start, end))


def aux_sequence(theta, theta_prev, beta1: float) -> np.ndarray:
    """``z_t = theta_t + beta1 / (1 - beta1) * (theta_t - theta_{t-1})``."""
    return theta + beta1 / (1.0 - beta1) * (theta - theta_prev)


def _a_diag(v_hat, lr, eps):
    return lr / np.sqrt(v_hat + eps)


def z_identity_residual(thetas, m_prev, lam, vhats, hyper, lrs=None, t: int = 2) -> float:
    """Gap in ``z_{t+1} - z_t = c (A_{t-1} - A_t) m_{t-1} - A_t lam_t`` with ``c = beta1/(1-beta1)``.

    ``thetas`` is ``(theta_{t-1}, theta_t, theta_{t+1})``, ``vhats`` is
    ``(v_hat_{t-1}, v_hat_t)`` and ``A_s = lr_s / sqrt(v_hat_s + eps)``
    (diagonal).  ``lrs`` defaults to the constant ``hyper.alpha``.
    """
    if t < 2:
        raise InvalidInputError("the general identity holds for t >= 2; use z_identity_first for t = 1")
    th_prev, th, th_next = (np.asarray(x, dtype=float) for x in thetas)
    lr_prev, lr = lrs if lrs is not None else (hyper.alpha, hyper.alpha)
    b1 = hyper.beta1
    lhs = aux_sequence(th_next, th, b1) - aux_sequence(th, th_prev, b1)
    a_prev = _a_diag(vhats[0], lr_prev, hyper.eps)
    a_cur = _a_diag(vhats[1], lr, hyper.eps)
    rhs = b1 / (1.0 - b1) * (a_prev - a_cur) * m_prev - a_cur * lam
    return float(np.linalg.norm(lhs - rhs))


def z_identity_first(theta1, theta2, lam1, v_hat1, hyper, lr=None) -> float:
    """Gap in ``z_2 - z_1 = -A_1 lam_1`` (with the convention ``theta_0 = theta_1``)."""
    theta1 = np.asarray(theta1, dtype=float)
    theta2 = np.asarray(theta2, dtype=float)
    b1 = hyper.beta1
    lhs = aux_sequence(theta2, theta1, b1) - aux_sequence(theta1, theta1, b1)
    rhs = -_a_diag(v_hat1, hyper.alpha if lr is None else lr, hyper.eps) * lam1
    return float(np.linalg.norm(lhs - rhs))


def at_bound(lam_inf_max: float, alpha: float, eps: float) -> float:
    return ((lam_inf_max**2 + eps) / alpha**2) ** 0.25


def at_bound_check(v_hat, hyper, lam_inf_max: float, alpha: float | None = None) -> bool:
    """``||A_t^{-1/2}||_2 <= ((max|lam|^2 + eps) / alpha^2)^(1/4)`` for one step."""
    alpha = hyper.alpha if alpha is None else alpha
    lhs = float(np.max((np.asarray(v_hat) + hyper.eps) ** 0.25)) / math.sqrt(alpha)
    return lhs <= at_bound(lam_inf_max, alpha, hyper.eps) + 1e-12


def milestones(trace, thresholds, key: str = "loss") -> dict:
    """First row index with ``key <= tau`` for each threshold; missing if never reached."""
    values = [getattr(row, key) if hasattr(row, key) else row for row in trace]
    out = {}
    for tau in thresholds:
        if not tau > 0:
            raise InvalidInputError("thresholds must be positive")
        for i, value in enumerate(values):
            if value <= tau:
                out[tau] = i
                break
    return out


def spectral_probe(p, theta, trunc_tol: float | None = None) -> SpectralProbe:
    svd = thin_svd(p.jacobian(theta), trunc_tol)
    if svd.rank == 0:
        return SpectralProbe(0.0, 0.0, math.inf, 0)
    return SpectralProbe(svd.sigma_min, svd.sigma_max, svd.sigma_max / svd.sigma_min, svd.rank)


def growth_exponent(lams) -> float:
    """Empirical ``s`` in ``max_i ||g_{1:T,i}||_2 ~ M T^s`` from a sequence of vectors.

    Diagnostic only: a log-log slope of the cumulative column norm against ``T``.
    """
    lams = np.asarray(lams, dtype=float)
    if lams.ndim != 2 or lams.shape[0] < 5:
        raise InvalidInputError("need a T x m array with T >= 5")
    cum = np.sqrt(np.cumsum(lams**2, axis=0)).max(axis=1)
    t = np.arange(1, lams.shape[0] + 1)
    keep = cum > 0
    return float(np.polyfit(np.log(t[keep]), np.log(cum[keep]), 1)[0])
