"""Self-check suite: derivative checks, preconditioner oracles and theory checks.

Every check returns a :class:`CheckResult`; :func:`run_checks` collects them.
The problems used for derivative checks can be replaced, which is how a
broken problem (say, a VJP with the wrong sign) is shown to fail.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diagnostics import at_bound_check, fit_rate, spectral_probe, z_identity_first, z_identity_residual
from .linalg import thin_svd
from .optimizers import HyperParams, OptimizerState, StaircaseSchedule, make_rng, run, spgd_amsgrad_step
from .precond import PrecondSpec, damped_apply_dense, damped_apply_lanczos, fisher_block_apply
from .precond import precond_gradient_exact, spgd_direction
from .problems import (
    DiscretePde,
    LinearLsq,
    fd_gradient,
    make_linear_lsq,
    make_mlp_regression,
    make_poisson,
    make_softmax_toy,
)

GRAD_RTOL = 1e-5


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def default_problems() -> list:
    """Small instances of every problem family."""
    return [
        ("linear_lsq", make_linear_lsq(8, 12, 10.0, seed=0)),
        ("discrete_pde", DiscretePde(15, "cubic")),
        ("discrete_pde_sine", DiscretePde(15, "sine")),
        ("mlp_regression", make_mlp_regression(hidden=(8, 8), batch_size=32, test_size=64, seed=0)),
        ("poisson", make_poisson(hidden=(6, 6), n_interior=24, n_boundary=12, test_size=16, seed=0)),
        ("softmax_toy", make_softmax_toy(hidden=(5,), per_class=8, seed=0)),
    ]


def _test_point(problem, rng):
    theta = problem.initial_point(rng)
    return theta + 0.1 * rng.standard_normal(theta.shape)


def check_gradient(name, problem, points: int = 5, seed: int = 0) -> CheckResult:
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(points):
        theta = _test_point(problem, rng)
        g = problem.gradient(theta)
        fd = fd_gradient(problem, theta)
        err = float(np.linalg.norm(g - fd)) / max(float(np.linalg.norm(fd)), 1e-12)
        worst = max(worst, err)
    return CheckResult(f"gradient[{name}]", worst <= GRAD_RTOL, f"max relative error {worst:.2e}")


def check_adjoint(name, problem, seed: int = 0) -> CheckResult:
    rng = make_rng(seed)
    theta = _test_point(problem, rng)
    v = rng.standard_normal(problem.param_dim)
    u = rng.standard_normal(problem.residual_dim)
    lhs = float(problem.jvp(theta, v) @ u)
    rhs = float(v @ problem.vjp(theta, u))
    err = abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)
    return CheckResult(f"adjoint[{name}]", err <= 1e-10, f"relative mismatch {err:.2e}")


def _random_full_rank(rng):
    m = int(rng.integers(2, 33))
    n = int(rng.integers(m, 33))
    a = rng.standard_normal((n, m))
    return LinearLsq(a, rng.standard_normal(n))


def check_precond_identity(cases: int = 50, seed: int = 1) -> CheckResult:
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(cases):
        p = _random_full_rank(rng)
        theta = rng.standard_normal(p.param_dim)
        r = p.residual(theta)
        svd = thin_svd(p.jacobian(theta))
        lhs = spgd_direction(svd, r)
        rhs = precond_gradient_exact(svd, p.gradient(theta))
        worst = max(worst, float(np.linalg.norm(lhs - rhs)) / float(np.linalg.norm(r)))
    return CheckResult("precond identity V U^T F = B grad", worst <= 1e-10, f"max relative gap {worst:.2e}")


def check_lanczos_oracle(cases: int = 20, seed: int = 2) -> CheckResult:
    rng = make_rng(seed)
    worst = 0.0
    for i in range(cases):
        p = _random_full_rank(rng)
        theta = np.zeros(p.param_dim)
        g = rng.standard_normal(p.param_dim)
        spec = PrecondSpec("damped_lanczos", mu=(1e-5, 1e-3)[i % 2], p=(0.5, 1.0)[(i // 2) % 2], k=p.param_dim)
        approx = damped_apply_lanczos(p.jvp, p.vjp, theta, g, spec)
        exact = damped_apply_dense(p.jacobian(theta), g, spec.mu, spec.p)
        worst = max(worst, float(np.linalg.norm(approx - exact) / np.linalg.norm(exact)))
    return CheckResult("Lanczos k=m vs dense oracle", worst <= 1e-8, f"max relative error {worst:.2e}")


def check_fisher_blocks(cases: int = 100, seed: int = 3) -> CheckResult:
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(cases):
        k = int(rng.integers(2, 8))
        p = rng.dirichlet(np.ones(k))
        c = np.diag(p) - np.outer(p, p)
        worst = max(worst, float(np.abs(c - c.T).max()), float(np.abs(c @ np.ones(k)).max()))
        worst = max(worst, max(0.0, -float(np.linalg.eigvalsh(c).min())))
        u = rng.standard_normal(k)
        worst = max(worst, float(np.abs(fisher_block_apply(p, u) - c @ u).max()))
    return CheckResult("Fisher blocks PSD, symmetric, C 1 = 0", worst <= 1e-12, f"max violation {worst:.2e}")


def record_amsgrad(problem, hyper: HyperParams, steps: int, seed: int = 0) -> list:
    """States ``s_0..s_steps``; ``s_t.theta`` is the iterate after step ``t``."""
    rng = make_rng(seed)
    state = OptimizerState.initial(problem.initial_point(rng))
    states = [state]
    for t in range(steps):
        state = spgd_amsgrad_step(problem, state, hyper, hyper.lr(t))
        states.append(state)
    return states


def z_identity_gaps(states, hyper: HyperParams):
    """Scaled auxiliary-sequence gaps ``gap_t / (1 + ||theta_t||)`` for t >= 2 and the t = 1 gap."""
    first = z_identity_first(states[0].theta, states[1].theta, states[1].lam, states[1].v_hat, hyper, hyper.lr(0))
    gaps = []
    for t in range(2, len(states)):
        gap = z_identity_residual(
            (states[t - 2].theta, states[t - 1].theta, states[t].theta),
            states[t - 1].m,
            states[t].lam,
            (states[t - 1].v_hat, states[t].v_hat),
            hyper,
            lrs=(hyper.lr(t - 2), hyper.lr(t - 1)),
            t=t,
        )
        gaps.append(gap / (1.0 + float(np.linalg.norm(states[t - 1].theta))))
    return first, gaps


def _amsgrad_setup():
    problem = make_linear_lsq(10, 14, 20.0, seed=4)
    hyper = HyperParams(
        alpha=1e-2,
        schedule=StaircaseSchedule(0.7, 50, 1e-4),
        precond=PrecondSpec("damped_lanczos", mu=1e-5, k=6),
    )
    return problem, hyper


def check_z_identity(steps: int = 200) -> CheckResult:
    problem, hyper = _amsgrad_setup()
    first, gaps = z_identity_gaps(record_amsgrad(problem, hyper, steps), hyper)
    ok = first <= 1e-12 and max(gaps) <= 1e-10
    return CheckResult("auxiliary-sequence identity", ok, f"t=1 gap {first:.1e}, max scaled gap {max(gaps):.1e}")


def check_amsgrad_invariants(steps: int = 1000) -> CheckResult:
    problem, hyper = _amsgrad_setup()
    states = record_amsgrad(problem, hyper, steps)
    monotone = all(np.all(b.v_hat >= a.v_hat) for a, b in zip(states, states[1:]))
    lam_inf = 0.0
    bounded = True
    for t, s in enumerate(states[1:]):
        lam_inf = max(lam_inf, float(np.abs(s.lam).max()))
        bounded &= at_bound_check(s.v_hat, hyper, lam_inf, alpha=hyper.lr(t))
    return CheckResult("AMSGrad v_hat monotone and A_t^-1/2 bounded", monotone and bounded, f"monotone={monotone} bounded={bounded}")


def check_gd_rate() -> CheckResult:
    p = make_linear_lsq(16, 16, 10.0, seed=5)
    probe = spectral_probe(p, np.zeros(16))
    hyper = HyperParams(alpha=1.0 / probe.sigma_max**2)
    fit = fit_rate(run(p, "gd", hyper, 1000, seed=0))
    bound = 1.0 - (probe.sigma_min / probe.sigma_max) ** 2
    ok = bound - 0.05 <= fit.rho <= bound + 0.01 and fit.r2 >= 0.99
    return CheckResult("GD loss rate vs PL bound", ok, f"rho={fit.rho:.5f} bound={bound:.5f} r2={fit.r2:.4f}")


def check_spgd_rate() -> CheckResult:
    p = make_linear_lsq(16, 16, 10.0, seed=5)
    probe = spectral_probe(p, np.zeros(16))
    alpha = 1.0 / probe.sigma_max
    trace = run(p, "spgd", HyperParams(alpha=alpha), 80, seed=0)
    norms = trace.column("residual_norm")
    keep = norms[:-1] > 1e-12
    worst = float(np.max(norms[1:][keep] / norms[:-1][keep]))
    bound = 1.0 - alpha * probe.sigma_min
    return CheckResult("SPGD linear residual contraction", worst <= bound + 1e-10, f"max ratio {worst:.6f} bound {bound:.6f}")


def check_pl_positive(samples: int = 100) -> CheckResult:
    p = DiscretePde(31, "cubic")
    rng = make_rng(6)
    ratios = []
    for _ in range(samples):
        d = rng.standard_normal(p.param_dim)
        theta = p.theta_star + 0.1 * rng.random() * d / np.linalg.norm(d)
        f = p.objective(theta)
        if f > 1e-16:
            g = p.gradient(theta)
            ratios.append(float(g @ g) / (2.0 * f))
    low = min(ratios)
    return CheckResult("PL ratio positive near a root", low > 0 and math.isfinite(low), f"min ratio {low:.3e}")


def run_checks(problems=None) -> list:
    problems = default_problems() if problems is None else list(problems)
    results = []
    for name, problem in problems:
        results.append(_guard(f"gradient[{name}]", lambda: check_gradient(name, problem)))
        results.append(_guard(f"adjoint[{name}]", lambda: check_adjoint(name, problem)))
    for fn in (
        check_precond_identity,
        check_lanczos_oracle,
        check_fisher_blocks,
        check_z_identity,
        check_amsgrad_invariants,
        check_gd_rate,
        check_spgd_rate,
        check_pl_positive,
    ):
        results.append(_guard(fn.__name__, fn))
    return results


def _guard(name, fn) -> CheckResult:
    try:
        return fn()
    except Exception as exc:  # a crashing check is a failing check
        return CheckResult(name, False, f"raised {type(exc).__name__}: {exc}")
