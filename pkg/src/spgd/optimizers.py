"""Step rules (GD, SPGD, SPGD-Adam, SPGD-AMSGrad, Adam) and the training loop."""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidConfigError, InvalidInputError, NumericalFailure
from .linalg import thin_svd
from .precond import PrecondSpec, precondition, spgd_direction

METHODS = ("gd", "spgd", "spgd-adam", "spgd-amsgrad", "adam-baseline")


@dataclass(frozen=True)
class StaircaseSchedule:
    """``lr(t) = max(floor, alpha * factor**(t // interval))``."""

    factor: float = 1.0
    interval: int = 1
    floor: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.factor <= 1.0:
            raise InvalidConfigError("schedule factor must lie in (0, 1]")
        if self.interval < 1:
            raise InvalidConfigError("schedule interval must be >= 1")
        if self.floor < 0:
            raise InvalidConfigError("schedule floor must be nonnegative")


def lr_at(schedule: StaircaseSchedule, epoch: int, alpha: float) -> float:
    if epoch < 0:
        raise InvalidInputError("epoch must be nonnegative")
    return max(schedule.floor, alpha * schedule.factor ** (epoch // schedule.interval))


@dataclass(frozen=True)
class HyperParams:
    alpha: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: StaircaseSchedule = field(default_factory=StaircaseSchedule)
    precond: PrecondSpec = field(default_factory=PrecondSpec)

    def __post_init__(self):
        if not self.alpha > 0:
            raise InvalidConfigError("alpha must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise InvalidConfigError("beta1 and beta2 must lie in [0, 1)")
        if not self.eps > 0:
            raise InvalidConfigError("eps must be positive")

    @property
    def momentum_condition(self) -> bool:
        """``beta1 < sqrt(beta2)``, required by the AMSGrad convergence result."""
        return self.beta1 < math.sqrt(self.beta2)

    def lr(self, epoch: int) -> float:
        return lr_at(self.schedule, epoch, self.alpha)


@dataclass(frozen=True)
class OptimizerState:
    """``theta`` is the next iterate; ``m``, ``v``, ``v_hat``, ``lam`` come from step ``t``."""

    theta: np.ndarray
    m: np.ndarray
    v: np.ndarray
    v_hat: np.ndarray
    t: int = 0
    lam: np.ndarray | None = None

    @classmethod
    def initial(cls, theta) -> "OptimizerState":
        theta = np.array(theta, dtype=np.float64)
        z = np.zeros_like(theta)
        return cls(theta, z, z.copy(), z.copy(), 0, None)


@dataclass
class TraceRow:
    t: int
    loss: float
    grad_norm: float
    residual_norm: float
    lr: float
    wall_ms: float
    extras: dict = field(default_factory=dict)


class Trace(list):
    """List of :class:`TraceRow` plus run metadata."""

    def __init__(self, rows=(), *, method="", seed=0, diverged=False, final_state=None):
        super().__init__(rows)
        self.method = method
        self.seed = seed
        self.diverged = diverged
        self.final_state = final_state

    def column(self, name) -> np.ndarray:
        return np.array([getattr(row, name) for row in self])


def _finite_or_raise(arr, what, step, theta):
    if not np.all(np.isfinite(arr)):
        raise NumericalFailure(f"{what} is not finite at step {step}", theta=theta, step=step)


def gd_step(p, theta, lr: float) -> np.ndarray:
    if not lr > 0:
        raise InvalidInputError("learning rate must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    g = p.gradient(theta)
    _finite_or_raise(g, "gradient", None, theta)
    return theta - lr * g


def spgd_step(p, theta, lr: float, trunc_tol: float | None = None) -> np.ndarray:
    """``theta - lr * V U^T F(theta)`` from the thin SVD of the Jacobian."""
    if not lr > 0:
        raise InvalidInputError("learning rate must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    r = p.residual(theta)
    _finite_or_raise(r, "residual", None, theta)
    return theta - lr * spgd_direction(thin_svd(p.jacobian(theta), trunc_tol), r)


def _moment_update(p, state: OptimizerState, hyper: HyperParams):
    step = state.t + 1
    g = p.gradient(state.theta)
    _finite_or_raise(g, "gradient", step, state.theta)
    lam = precondition(p, state.theta, g, hyper.precond)
    _finite_or_raise(lam, "preconditioned gradient", step, state.theta)
    m = hyper.beta1 * state.m + (1.0 - hyper.beta1) * lam
    v = hyper.beta2 * state.v + (1.0 - hyper.beta2) * lam * lam
    return lam, m, v


def spgd_adam_step(p, state: OptimizerState, hyper: HyperParams, lr: float | None = None) -> OptimizerState:
    """One step of SPGD-Adam: moments of the preconditioned gradient, no bias correction.

    The denominator is ``sqrt(v + eps)`` so coordinates with ``v = 0`` stay finite.
    """
    if lr is None:
        lr = hyper.lr(state.t)
    lam, m, v = _moment_update(p, state, hyper)
    theta = state.theta - lr * m / np.sqrt(v + hyper.eps)
    _finite_or_raise(theta, "parameter", state.t + 1, state.theta)
    return OptimizerState(theta, m, v, np.maximum(state.v_hat, v), state.t + 1, lam)


def spgd_amsgrad_step(p, state: OptimizerState, hyper: HyperParams, lr: float | None = None) -> OptimizerState:
    """SPGD-Adam with the running maximum ``v_hat`` in the denominator."""
    if not hyper.momentum_condition:
        raise InvalidConfigError(
            f"AMSGrad variant needs beta1 < sqrt(beta2), got beta1={hyper.beta1}, beta2={hyper.beta2}"
        )
    if lr is None:
        lr = hyper.lr(state.t)
    lam, m, v = _moment_update(p, state, hyper)
    v_hat = np.maximum(state.v_hat, v)
    theta = state.theta - lr * m / np.sqrt(v_hat + hyper.eps)
    _finite_or_raise(theta, "parameter", state.t + 1, state.theta)
    return OptimizerState(theta, m, v, v_hat, state.t + 1, lam)


def adam_step(p, state: OptimizerState, hyper: HyperParams, lr: float | None = None) -> OptimizerState:
    """Plain bias-corrected Adam on the raw gradient (comparison baseline)."""
    if lr is None:
        lr = hyper.lr(state.t)
    step = state.t + 1
    g = p.gradient(state.theta)
    _finite_or_raise(g, "gradient", step, state.theta)
    m = hyper.beta1 * state.m + (1.0 - hyper.beta1) * g
    v = hyper.beta2 * state.v + (1.0 - hyper.beta2) * g * g
    m_hat = m / (1.0 - hyper.beta1**step)
    v_hat = v / (1.0 - hyper.beta2**step)
    theta = state.theta - lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    _finite_or_raise(theta, "parameter", step, state.theta)
    return OptimizerState(theta, m, v, np.maximum(state.v_hat, v), step, g)


def _gd(p, state, hyper, lr):
    return replace(state, theta=gd_step(p, state.theta, lr), t=state.t + 1)


def _spgd(p, state, hyper, lr):
    return replace(state, theta=spgd_step(p, state.theta, lr, hyper.precond.trunc_tol), t=state.t + 1)


STEPS = {
    "gd": _gd,
    "spgd": _spgd,
    "spgd-adam": spgd_adam_step,
    "spgd-amsgrad": spgd_amsgrad_step,
    "adam-baseline": adam_step,
}


def check_method(method: str, hyper: HyperParams) -> None:
    if method not in STEPS:
        raise InvalidConfigError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    if method == "spgd-amsgrad" and not hyper.momentum_condition:
        raise InvalidConfigError("spgd-amsgrad requires beta1 < sqrt(beta2)")
    if method == "spgd-adam" and not hyper.momentum_condition:
        warnings.warn("beta1 >= sqrt(beta2); SPGD-Adam carries no convergence guarantee", stacklevel=2)


def make_rng(seed: int) -> np.random.Generator:
    """The one generator used for initialization and batch sampling (PCG64)."""
    return np.random.Generator(np.random.PCG64(seed))


def run(
    problem,
    method: str,
    hyper: HyperParams,
    epochs: int,
    seed: int = 0,
    callbacks=(),
    theta0=None,
    spectrum: bool = False,
) -> Trace:
    """Train for ``epochs`` steps and return one row per epoch.

    Row ``t`` describes the iterate *before* step ``t`` on the problem's
    evaluation set.  Stochastic problems draw a new batch every epoch.  A
    non-finite loss or a numerical failure ends the run early with
    ``trace.diverged`` set; it does not raise.
    """
    if epochs < 1:
        raise InvalidInputError("epochs must be >= 1")
    check_method(method, hyper)
    step_fn = STEPS[method]
    rng = make_rng(seed)
    theta = problem.initial_point(rng) if theta0 is None else np.array(theta0, dtype=np.float64)
    state = OptimizerState.initial(theta)
    evaluation = problem.evaluation()
    least_squares = getattr(evaluation, "loss_kind", "least_squares") == "least_squares"
    trace = Trace(method=method, seed=seed)
    start = time.perf_counter()

    for epoch in range(epochs):
        lr = hyper.lr(epoch)
        try:
            if least_squares:
                r = evaluation.residual(state.theta)
                residual_norm = float(np.linalg.norm(r))
                loss = 0.5 * residual_norm**2
                grad_norm = float(np.linalg.norm(evaluation.vjp(state.theta, r)))
            else:
                loss = evaluation.objective(state.theta)
                residual_norm = math.sqrt(2.0 * loss)
                grad_norm = float(np.linalg.norm(evaluation.gradient(state.theta)))
        except NumericalFailure:
            trace.diverged = True
            break
        if not (math.isfinite(loss) and math.isfinite(grad_norm)):
            trace.diverged = True
            break
        extras = {}
        if spectrum:
            svd = thin_svd(evaluation.jacobian(state.theta), hyper.precond.trunc_tol)
            extras = {"sigma_min": svd.sigma_min, "sigma_max": svd.sigma_max, "rank": svd.rank}
        row = TraceRow(epoch, loss, grad_norm, residual_norm, lr, (time.perf_counter() - start) * 1e3, extras)
        trace.append(row)
        for callback in callbacks:
            callback(epoch, state, row)
        batch = problem.resample(rng) if problem.stochastic else problem
        try:
            state = step_fn(batch, state, hyper, lr)
        except NumericalFailure:
            trace.diverged = True
            break

    trace.final_state = state
    return trace
