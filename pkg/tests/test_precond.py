import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spgd.errors import InvalidConfigError, InvalidInputError, NumericalFailure
from spgd.linalg import thin_svd
from spgd.precond import (
    PrecondSpec,
    ce_operator,
    damped_apply_dense,
    damped_apply_lanczos,
    fisher_block_apply,
    precond_gradient_exact,
    precondition,
    spgd_direction,
)
from spgd.problems import LinearLsq, make_linear_lsq, make_softmax_toy


def mat_ops(j):
    return (lambda theta, v: j @ v), (lambda theta, u: j.T @ u)


def dense_power(j, g, mu, p):
    # independent oracle via SVD of J: eigenvalues of J^T J are sigma^2
    _, s, vt = np.linalg.svd(j, full_matrices=True)
    lam = np.zeros(j.shape[1])
    lam[: s.size] = s**2
    return vt.T @ ((lam + mu) ** -p * (vt @ g))


# -- spgd_direction / exact preconditioner ------------------------------------------


def test_direction_identity_factors():
    svd = thin_svd(np.diag([2.0, 1.0]))
    np.testing.assert_allclose(spgd_direction(svd, np.array([4.0, 3.0])), [4.0, 3.0])


def test_direction_filters_residual_outside_range():
    svd = thin_svd(np.array([[1.0, 0.0], [0.0, 0.0]]), trunc_tol=1e-12)
    np.testing.assert_array_equal(spgd_direction(svd, np.array([0.0, 1.0])), [0.0, 0.0])


def test_direction_swap_matrix():
    j = np.array([[0.0, 1.0], [1.0, 0.0]])
    svd = thin_svd(j)
    # singular values are equal, so V U^T = J V S^-1 ... = J here
    np.testing.assert_allclose(svd.v @ svd.u.T, j.T, atol=1e-15)
    np.testing.assert_allclose(spgd_direction(svd, np.array([1.0, 2.0])), [2.0, 1.0], atol=1e-15)


def test_direction_dimension_checks():
    svd = thin_svd(np.ones((3, 2)))
    with pytest.raises(InvalidInputError):
        spgd_direction(svd, np.ones(2))
    with pytest.raises(InvalidInputError):
        precond_gradient_exact(svd, np.ones(3))


def test_exact_preconditioner_hand_example():
    j = np.diag([2.0, 1.0])
    grad = j.T @ np.array([4.0, 3.0])
    np.testing.assert_allclose(grad, [8.0, 3.0])
    np.testing.assert_allclose(precond_gradient_exact(thin_svd(j), grad), [4.0, 3.0])


def test_exact_preconditioner_annihilates_complement():
    svd = thin_svd(np.array([[1.0, 0.0], [0.0, 0.0]]), trunc_tol=1e-12)
    np.testing.assert_array_equal(precond_gradient_exact(svd, np.array([0.0, 5.0])), [0.0, 0.0])


def test_exact_preconditioner_orthogonal_jacobian():
    q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((5, 5)))
    g = np.arange(5.0)
    np.testing.assert_allclose(precond_gradient_exact(thin_svd(q), g), g, atol=1e-13)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 32), st.integers(0, 32), st.integers(0, 2**31 - 1))
def test_direction_equals_preconditioned_gradient(m, extra, seed):
    rng = np.random.default_rng(seed)
    j = rng.standard_normal((m + extra, m))
    f = rng.standard_normal(m + extra)
    svd = thin_svd(j)
    lhs = spgd_direction(svd, f)
    rhs = precond_gradient_exact(svd, j.T @ f)
    assert np.linalg.norm(lhs - rhs) <= 1e-10 * np.linalg.norm(f)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 2**31 - 1))
def test_direction_operator_is_partial_isometry(n, m, seed):
    rng = np.random.default_rng(seed)
    r = min(n, m, 1 + seed % 5)
    j = rng.standard_normal((n, r)) @ rng.standard_normal((r, m))
    svd = thin_svd(j)
    op = svd.v @ svd.u.T
    x = rng.standard_normal(m)
    projector = svd.v @ svd.v.T
    assert np.linalg.norm(op @ op.T @ x - projector @ x) <= 1e-9 * np.linalg.norm(x)


# -- damped preconditioner ----------------------------------------------------------------


def test_damped_dense_matches_exact_without_damping():
    np.testing.assert_allclose(damped_apply_dense(np.diag([2.0, 1.0]), np.array([8.0, 3.0]), 0.0, 0.5), [4.0, 3.0])


def test_damped_dense_gauss_newton_direction():
    rng = np.random.default_rng(1)
    j = rng.standard_normal((6, 6))
    g = rng.standard_normal(6)
    np.testing.assert_allclose(damped_apply_dense(j, g, 0.0, 1.0), np.linalg.solve(j.T @ j, g), rtol=1e-8)


def test_damped_dense_large_damping():
    rng = np.random.default_rng(2)
    j = rng.standard_normal((5, 4))
    g = rng.standard_normal(4)
    mu, p = 1e8, 0.5
    out = damped_apply_dense(j, g, mu, p)
    assert np.linalg.norm(out - g / mu**p) <= 1e-6 * np.linalg.norm(g) / mu**p


def test_damped_dense_rejects_singular_without_damping():
    with pytest.raises(NumericalFailure):
        damped_apply_dense(np.array([[1.0, 0.0], [0.0, 0.0]]), np.ones(2), 0.0, 0.5)


@pytest.mark.parametrize("p", [0.5, 1.0])
@pytest.mark.parametrize("mu", [1e-5, 1e-3, 1e-1])
def test_lanczos_full_depth_matches_dense(p, mu):
    rng = np.random.default_rng(int(10 * p + 1e6 * mu))
    for m in (3, 8, 20, 32):
        j = rng.standard_normal((m + 3, m))
        g = rng.standard_normal(m)
        jvp, vjp = mat_ops(j)
        out = damped_apply_lanczos(jvp, vjp, None, g, PrecondSpec("damped_lanczos", mu=mu, p=p, k=m))
        oracle = dense_power(j, g, mu, p)
        assert np.linalg.norm(out - oracle) <= 1e-8 * np.linalg.norm(oracle)
        np.testing.assert_allclose(damped_apply_dense(j, g, mu, p), oracle, rtol=1e-9)


def test_lanczos_eigenvector_is_exact_at_any_depth():
    rng = np.random.default_rng(3)
    j = rng.standard_normal((9, 6))
    lam, w = np.linalg.eigh(j.T @ j)
    g = w[:, 2]
    jvp, vjp = mat_ops(j)
    for k in (1, 3, 6):
        out = damped_apply_lanczos(jvp, vjp, None, g, PrecondSpec(mu=1e-3, p=0.5, k=k))
        np.testing.assert_allclose(out, (lam[2] + 1e-3) ** -0.5 * g, atol=1e-10)


def test_lanczos_zero_jacobian_returns_g():
    g = np.array([1.0, -2.0, 0.5])
    jvp, vjp = mat_ops(np.zeros((4, 3)))
    out = damped_apply_lanczos(jvp, vjp, None, g, PrecondSpec(mu=1.0, p=0.5, k=3))
    np.testing.assert_allclose(out, g)


def test_lanczos_rejects_zero_gradient():
    jvp, vjp = mat_ops(np.eye(2))
    with pytest.raises(InvalidInputError):
        damped_apply_lanczos(jvp, vjp, None, np.zeros(2), PrecondSpec())


def test_lanczos_undamped_singular_gram_fails():
    jvp, vjp = mat_ops(np.array([[1.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(NumericalFailure):
        damped_apply_lanczos(jvp, vjp, None, np.array([1.0, 1.0]), PrecondSpec(mu=0.0, k=2))


# -- Fisher blocks and the cross-entropy operator ------------------------------------------


def test_fisher_block_examples():
    np.testing.assert_allclose(fisher_block_apply(np.array([0.5, 0.5]), np.array([1.0, 0.0])), [0.25, -0.25])
    np.testing.assert_allclose(fisher_block_apply(np.array([0.5, 0.5]), np.array([1.0, 1.0])), [0.0, 0.0])
    np.testing.assert_allclose(fisher_block_apply(np.array([0.9, 0.1]), np.array([1.0, 0.0])), [0.09, -0.09], atol=1e-16)
    np.testing.assert_array_equal(fisher_block_apply(np.array([0.2, 0.3, 0.5]), np.zeros(3)), 0.0)


def test_fisher_block_degenerate_one_hot():
    p = np.clip(np.array([1.0, 0.0, 0.0]), 1e-12, 1.0)
    p = p / p.sum()
    u = np.random.default_rng(4).standard_normal((50, 3))
    assert np.abs(fisher_block_apply(p, u)).max() <= 2e-12 * np.abs(u).max() * 3


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 10), st.integers(0, 2**31 - 1), st.floats(-100, 100))
def test_fisher_block_properties(k, seed, c):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(k))
    c_mat = np.diag(p) - np.outer(p, p)
    np.testing.assert_array_equal(c_mat, c_mat.T)
    assert np.linalg.eigvalsh(c_mat).min() >= -1e-12
    assert np.abs(fisher_block_apply(p, np.full(k, c))).max() <= 1e-12 * max(1.0, abs(c))
    u = rng.standard_normal(k)
    assert abs(np.sum(fisher_block_apply(p, u))) <= 1e-12 * (1 + np.abs(u).sum())


def test_blockwise_apply_matches_dense_assembly():
    rng = np.random.default_rng(5)
    for b, k in ((2, 2), (4, 3)):
        probs = rng.dirichlet(np.ones(k), size=b)
        dense = np.zeros((b * k, b * k))
        for i in range(b):
            dense[i * k : (i + 1) * k, i * k : (i + 1) * k] = np.diag(probs[i]) - np.outer(probs[i], probs[i])
        u = rng.standard_normal((b, k))
        np.testing.assert_allclose(fisher_block_apply(probs, u).ravel(), dense @ u.ravel(), atol=1e-12)


def test_ce_operator_is_symmetric_and_positive():
    rng = np.random.default_rng(6)
    b, k, m = 5, 3, 7
    j = rng.standard_normal((b * k, m))
    probs = rng.dirichlet(np.ones(k), size=b)
    jvp, vjp = mat_ops(j)
    delta = 1e-4
    op = ce_operator(jvp, vjp, np.zeros(m), probs, delta)
    dense = op.dense()
    np.testing.assert_allclose(dense, dense.T, atol=1e-12)
    c = np.zeros((b * k, b * k))
    for i in range(b):
        c[i * k : (i + 1) * k, i * k : (i + 1) * k] = np.diag(probs[i]) - np.outer(probs[i], probs[i])
    np.testing.assert_allclose(dense, j.T @ c @ j + delta * np.eye(m), atol=1e-12)
    for _ in range(20):
        v = rng.standard_normal(m)
        assert v @ op.apply(v) >= delta * (v @ v) - 1e-9


def test_ce_operator_validates_probabilities():
    jvp, vjp = mat_ops(np.eye(4))
    with pytest.raises(InvalidInputError):
        ce_operator(jvp, vjp, None, np.array([[0.5, 0.6], [0.5, 0.5]]), 1e-4)
    with pytest.raises(InvalidInputError):
        ce_operator(jvp, vjp, None, np.array([0.5, 0.5]), 1e-4)


# -- dispatch ---------------------------------------------------------------------------


def test_precondition_zero_gradient_is_zero_for_every_kind():
    p = make_linear_lsq(4, 6, 3.0, seed=0)
    for kind in ("exact_svd", "damped_dense", "damped_lanczos"):
        out = precondition(p, np.zeros(4), np.zeros(4), PrecondSpec(kind))
        np.testing.assert_array_equal(out, 0.0)


def test_precondition_exact_and_undamped_dense_agree():
    p = make_linear_lsq(6, 9, 20.0, seed=1)
    theta = np.ones(6)
    g = p.gradient(theta)
    a = precondition(p, theta, g, PrecondSpec("exact_svd"))
    b = precondition(p, theta, g, PrecondSpec("damped_dense", mu=0.0, p=0.5))
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(a, spgd_direction(thin_svd(p.a), p.residual(theta)), atol=1e-10)


def test_precondition_ce_lanczos_matches_dense_oracle():
    p = make_softmax_toy(classes=3, dim=2, per_class=4, seed=2)
    theta = p.initial_point(np.random.default_rng(0))
    g = p.gradient(theta)
    spec = PrecondSpec("ce_lanczos", delta=1e-4, p=0.5, k=p.param_dim)
    out = precondition(p, theta, g, spec)
    probs = p.fisher_probs(theta)
    j = p.jacobian(theta)
    c = np.zeros((p.residual_dim, p.residual_dim))
    k = p.classes
    for i in range(p.batch):
        c[i * k : (i + 1) * k, i * k : (i + 1) * k] = np.diag(probs[i]) - np.outer(probs[i], probs[i])
    lam, w = np.linalg.eigh(j.T @ c @ j + 1e-4 * np.eye(p.param_dim))
    oracle = w @ (lam**-0.5 * (w.T @ g))
    assert np.linalg.norm(out - oracle) <= 1e-8 * np.linalg.norm(oracle)


def test_precondition_ce_needs_classifier():
    p = LinearLsq(np.eye(2), np.zeros(2))
    with pytest.raises(InvalidConfigError):
        precondition(p, np.ones(2), np.ones(2), PrecondSpec("ce_lanczos"))


@pytest.mark.parametrize(
    "kwargs",
    [
        {"kind": "nope"},
        {"mu": -1.0},
        {"delta": -1.0},
        {"p": 0.0},
        {"k": 0},
        {"kind": "ce_lanczos", "k": 0},
        {"trunc_tol": -1.0},
    ],
)
def test_spec_validation(kwargs):
    with pytest.raises(InvalidConfigError):
        PrecondSpec(**kwargs)


def test_spec_defaults():
    spec = PrecondSpec()
    assert (spec.kind, spec.mu, spec.p, spec.k, spec.delta) == ("damped_lanczos", 1e-5, 0.5, 10, 1e-4)
    assert PrecondSpec("exact_svd", k=0).kind == "exact_svd"
