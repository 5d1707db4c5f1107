import math

import numpy as np
import pytest

from spgd.checks import record_amsgrad, z_identity_gaps
from spgd.diagnostics import (
    at_bound,
    at_bound_check,
    aux_sequence,
    fit_rate,
    growth_exponent,
    milestones,
    pl_ratio,
    spectral_probe,
    z_identity_first,
    z_identity_residual,
)
from spgd.errors import InvalidInputError
from spgd.linalg import thin_svd
from spgd.optimizers import HyperParams, OptimizerState, StaircaseSchedule, run, spgd_amsgrad_step
from spgd.precond import PrecondSpec
from spgd.problems import DiscretePde, LinearLsq, make_linear_lsq


def test_pl_ratio_identity_is_one():
    p = LinearLsq(np.eye(4), np.ones(4))
    rng = np.random.default_rng(0)
    for _ in range(10):
        assert pl_ratio(p, rng.standard_normal(4)) == pytest.approx(1.0, rel=1e-14)


def test_pl_ratio_between_squared_singular_values():
    p = make_linear_lsq(6, 10, 7.0, seed=1)
    svd = thin_svd(p.a)
    rng = np.random.default_rng(2)
    for _ in range(50):
        ratio = pl_ratio(p, rng.standard_normal(6))
        assert svd.sigma_min**2 * (1 - 1e-12) <= ratio <= svd.sigma_max**2 * (1 + 1e-12)


def test_pl_ratio_positive_near_pde_root():
    p = DiscretePde(15, "cubic")
    rng = np.random.default_rng(3)
    ratios = []
    for _ in range(100):
        d = rng.standard_normal(15)
        ratios.append(pl_ratio(p, p.theta_star + 0.1 * rng.random() * d / np.linalg.norm(d)))
    assert min(ratios) > 0


def test_pl_ratio_at_solution_rejected():
    p = LinearLsq(np.eye(2), np.zeros(2))
    with pytest.raises(InvalidInputError):
        pl_ratio(p, np.zeros(2))


def test_fit_rate_geometric():
    fit = fit_rate(3.0 * 0.9 ** np.arange(40), window=(0, 40))
    assert fit.rho == pytest.approx(0.9, abs=1e-10)
    assert fit.r2 == pytest.approx(1.0, abs=1e-12)
    assert fit.window == (0, 40)


def test_fit_rate_constant_and_default_window():
    fit = fit_rate([2.0] * 20)
    assert fit.rho == pytest.approx(1.0, abs=1e-12)
    assert fit.window == (10, 20)


def test_fit_rate_drops_floor_values():
    values = list(0.5 ** np.arange(10)) + [0.0] * 10
    fit = fit_rate(values, window=(0, 20))
    assert fit.rho == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(InvalidInputError):
        fit_rate([1.0, 0.5, 0.25, 0.0, 0.0, 0.0], window=(0, 6))


def test_fit_rate_spgd_loss_on_linear_problem():
    p = make_linear_lsq(8, 12, 5.0, seed=4)
    alpha = 1.0 / 5.0
    trace = run(p, "spgd", HyperParams(alpha=alpha), 60)
    fit = fit_rate(trace)
    assert fit.rho <= (1 - alpha * 1.0) ** 2 + 0.01


def test_aux_sequence_formula():
    z = aux_sequence(np.array([2.0]), np.array([1.0]), 0.75)
    np.testing.assert_allclose(z, [5.0])


def test_z_identity_on_recorded_run():
    hyper = HyperParams(alpha=0.02, beta1=0.9, beta2=0.999, precond=PrecondSpec(k=6),
                        schedule=StaircaseSchedule(0.7, 10, 1e-4))
    states = record_amsgrad(make_linear_lsq(6, 9, 10.0, seed=5), hyper, 50, seed=0)
    first, gaps = z_identity_gaps(states, hyper)
    assert first <= 1e-12
    assert max(gaps) <= 1e-10


def test_z_identity_with_zero_momentum_is_plain_step():
    p = make_linear_lsq(4, 6, 3.0, seed=6)
    hyper = HyperParams(alpha=0.05, beta1=0.0, precond=PrecondSpec(kind="exact_svd"))
    s0 = OptimizerState.initial(np.zeros(4))
    s1 = spgd_amsgrad_step(p, s0, hyper)
    s2 = spgd_amsgrad_step(p, s1, hyper)
    # beta1 = 0: z_t = theta_t and theta_{t+1} - theta_t = -A_t lam_t
    np.testing.assert_array_equal(aux_sequence(s2.theta, s1.theta, 0.0), s2.theta)
    gap = z_identity_residual((s0.theta, s1.theta, s2.theta), s1.m, s2.lam, (s1.v_hat, s2.v_hat), hyper)
    assert gap <= 1e-14
    assert z_identity_first(s0.theta, s1.theta, s1.lam, s1.v_hat, hyper) <= 1e-14


def test_z_identity_rejects_first_step():
    hyper = HyperParams()
    z = np.zeros(2)
    with pytest.raises(InvalidInputError):
        z_identity_residual((z, z, z), z, z, (z, z), hyper, t=1)


def test_at_bound_zero_lambda_is_equality():
    hyper = HyperParams(alpha=0.01, eps=1e-8)
    v_hat = np.zeros(3)
    lhs = (1e-8) ** 0.25 / math.sqrt(0.01)
    assert at_bound(0.0, 0.01, 1e-8) == pytest.approx(lhs, rel=1e-14)
    assert at_bound_check(v_hat, hyper, 0.0)


def test_at_bound_single_step_strict():
    lam = np.array([0.4, -1.5])
    hyper = HyperParams(alpha=0.01)
    v_hat = (1 - hyper.beta2) * lam**2
    lhs = float(np.max((v_hat + hyper.eps) ** 0.25)) / math.sqrt(hyper.alpha)
    assert lhs < at_bound(1.5, hyper.alpha, hyper.eps)
    assert at_bound_check(v_hat, hyper, 1.5)
    assert not at_bound_check(np.array([4.0]), hyper, 1.5)


def test_milestones_examples():
    trace = [1.0, 0.5, 0.05, 0.005]
    assert milestones(trace, [0.01]) == {0.01: 3}
    assert milestones(trace, [2.0]) == {2.0: 0}
    got = milestones(trace, [0.1, 1e-4])
    assert got == {0.1: 2}
    assert 1e-4 not in got
    with pytest.raises(InvalidInputError):
        milestones(trace, [0.0])


def test_milestones_monotone_on_trace_rows():
    trace = run(make_linear_lsq(5, 7, 4.0, seed=7), "gd", HyperParams(alpha=0.05), 200)
    taus = [1.0, 1e-1, 1e-2, 1e-3, 1e-4]
    got = milestones(trace, taus)
    epochs = [got[t] for t in taus if t in got]
    assert epochs == sorted(epochs)


def test_spectral_probe_examples():
    p = make_linear_lsq(8, 8, 100.0, seed=8)
    probe = spectral_probe(p, np.zeros(8))
    assert 99 <= probe.kappa <= 101 and probe.rank == 8
    ident = spectral_probe(LinearLsq(np.eye(3), np.zeros(3)), np.zeros(3))
    assert ident.kappa == pytest.approx(1.0)
    deficient = LinearLsq(np.diag([3.0, 1e-14, 0.5]), np.zeros(3))
    probe = spectral_probe(deficient, np.zeros(3), trunc_tol=1e-10)
    assert probe.rank == 2 and probe.sigma_min == pytest.approx(0.5)


def test_growth_exponent_sqrt_t():
    # constant vectors: cumulative norm grows like T^(1/2)
    assert growth_exponent(np.ones((100, 3))) == pytest.approx(0.5, abs=1e-10)
    with pytest.raises(InvalidInputError):
        growth_exponent(np.ones((3, 2)))
