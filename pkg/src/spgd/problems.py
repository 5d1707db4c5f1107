"""Residual problems ``F: R^m -> R^n`` and the least-squares objective.

Every problem exposes the residual, Jacobian-vector and vector-Jacobian
products, and (when cheap) a dense Jacobian.  Problems are immutable;
stochastic ones return a fresh instance from :meth:`ResidualProblem.resample`.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import InvalidInputError, NumericalFailure
from .linalg import LinearMap
from .mlp import Mlp

PROB_CLAMP = 1e-12


class ResidualProblem:
    """Base class.  Subclasses implement ``residual``, ``jvp`` and ``vjp``."""

    param_dim: int
    residual_dim: int
    stochastic = False
    has_jacobian = True
    theta_star: np.ndarray | None = None

    def residual(self, theta) -> np.ndarray:
        raise NotImplementedError

    def jvp(self, theta, v) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, theta, u) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, theta) -> np.ndarray:
        """Dense ``n x m`` Jacobian, assembled from products by default."""
        theta = self._check_theta(theta)
        if self.param_dim <= self.residual_dim:
            eye = np.eye(self.param_dim)
            return np.column_stack([self.jvp(theta, eye[:, i]) for i in range(self.param_dim)])
        eye = np.eye(self.residual_dim)
        return np.vstack([self.vjp(theta, eye[:, i]) for i in range(self.residual_dim)])

    def objective(self, theta) -> float:
        theta = self._check_theta(theta)
        r = self.residual(theta)
        if not np.all(np.isfinite(r)):
            raise NumericalFailure("residual is not finite", theta=theta)
        return 0.5 * float(r @ r)

    def gradient(self, theta) -> np.ndarray:
        theta = self._check_theta(theta)
        r = self.residual(theta)
        if not np.all(np.isfinite(r)):
            raise NumericalFailure("residual is not finite", theta=theta)
        return self.vjp(theta, r)

    def linear_map(self, theta) -> LinearMap:
        theta = self._check_theta(theta)
        return LinearMap(
            self.param_dim,
            self.residual_dim,
            lambda v: self.jvp(theta, v),
            lambda u: self.vjp(theta, u),
        )

    def initial_point(self, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal(self.param_dim)

    def resample(self, rng: np.random.Generator) -> "ResidualProblem":
        return self

    def evaluation(self) -> "ResidualProblem":
        """Deterministic problem used for reporting (a held-out set if any)."""
        return self

    def _check_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.param_dim,):
            raise InvalidInputError(
                f"theta has shape {theta.shape}, expected ({self.param_dim},)"
            )
        return theta


def objective(p: ResidualProblem, theta) -> float:
    """``f(theta) = 0.5 * ||F(theta)||^2`` (cross-entropy for classification problems)."""
    return p.objective(theta)


def gradient(p: ResidualProblem, theta) -> np.ndarray:
    return p.gradient(theta)


def fd_gradient(p: ResidualProblem, theta, rel_step: float = 1e-6) -> np.ndarray:
    """Central finite differences with step ``rel_step * (1 + |theta_i|)``."""
    theta = np.asarray(theta, dtype=np.float64)
    out = np.empty_like(theta)
    for i in range(theta.size):
        h = rel_step * (1.0 + abs(theta[i]))
        tp = theta.copy()
        tm = theta.copy()
        tp[i] += h
        tm[i] -= h
        out[i] = (p.objective(tp) - p.objective(tm)) / (2.0 * h)
    return out


# -- linear least squares ----------------------------------------------------


class LinearLsq(ResidualProblem):
    """``F(theta) = A theta - b``."""

    def __init__(self, a, b, theta_star=None):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.ndim != 2 or b.shape != (a.shape[0],):
            raise InvalidInputError(f"incompatible shapes A{a.shape}, b{b.shape}")
        self.a = a
        self.b = b
        self.residual_dim, self.param_dim = a.shape
        self.theta_star = None if theta_star is None else np.asarray(theta_star, dtype=np.float64)

    def residual(self, theta):
        return self.a @ self._check_theta(theta) - self.b

    def jvp(self, theta, v):
        return self.a @ v

    def vjp(self, theta, u):
        return self.a.T @ u

    def jacobian(self, theta):
        return self.a.copy()


def make_linear_lsq(m: int, n: int, kappa: float, seed: int) -> LinearLsq:
    """Consistent system with singular values ``geomspace(kappa, 1, m)``."""
    if not (n >= m >= 2):
        raise InvalidInputError("need n >= m >= 2")
    if kappa < 1:
        raise InvalidInputError("kappa must be >= 1")
    rng = np.random.default_rng(seed)
    u0, _ = np.linalg.qr(rng.standard_normal((n, m)))
    v0, _ = np.linalg.qr(rng.standard_normal((m, m)))
    a = (u0 * np.geomspace(kappa, 1.0, m)) @ v0.T
    theta_star = rng.standard_normal(m)
    return LinearLsq(a, a @ theta_star, theta_star=theta_star)


# -- discretized semilinear PDE ------------------------------------------------

NONLINEARITIES = {
    "zero": (lambda u: np.zeros_like(u), lambda u: np.zeros_like(u)),
    "cubic": (lambda u: u**3, lambda u: 3.0 * u**2),
    "sine": (np.sin, np.cos),
}


class DiscretePde(ResidualProblem):
    """``F(theta) = Lap_h theta + g(theta)`` on ``N`` interior nodes of (0, 1).

    ``Lap_h`` is the 3-point second difference with zero Dirichlet data.
    """

    def __init__(self, n: int, nonlinearity: str = "cubic", theta_star=None, init_radius: float = 0.1):
        if n < 1:
            raise InvalidInputError("grid size must be >= 1")
        if nonlinearity not in NONLINEARITIES:
            raise InvalidInputError(f"unknown nonlinearity {nonlinearity!r}")
        self.n = n
        self.h = 1.0 / (n + 1)
        self.nonlinearity = nonlinearity
        self.g, self.dg = NONLINEARITIES[nonlinearity]
        self.param_dim = self.residual_dim = n
        self.init_radius = init_radius
        # g(0) = 0 for every built-in nonlinearity, so 0 is always a root
        self.theta_star = np.zeros(n) if theta_star is None else np.asarray(theta_star, dtype=np.float64)

    def _lap(self, v):
        out = -2.0 * v
        out[1:] += v[:-1]
        out[:-1] += v[1:]
        return out / self.h**2

    def residual(self, theta):
        theta = self._check_theta(theta)
        return self._lap(theta) + self.g(theta)

    def jvp(self, theta, v):
        return self._lap(np.asarray(v, dtype=np.float64)) + self.dg(theta) * v

    vjp = jvp  # the Jacobian is symmetric

    def jacobian(self, theta):
        theta = self._check_theta(theta)
        n = self.n
        j = np.diag(np.full(n, -2.0)) + np.diag(np.ones(n - 1), 1) + np.diag(np.ones(n - 1), -1)
        return j / self.h**2 + np.diag(self.dg(theta))

    def initial_point(self, rng):
        direction = rng.standard_normal(self.n)
        return self.theta_star + self.init_radius * direction / np.linalg.norm(direction)

    def with_root(self, theta_star) -> "DiscretePde":
        return DiscretePde(self.n, self.nonlinearity, theta_star, self.init_radius)


def newton_root(p: ResidualProblem, theta0, tol: float = 1e-10, max_iter: int = 50) -> np.ndarray:
    """Newton iteration on a square system; raises unless ``||F|| <= tol``."""
    theta = np.asarray(theta0, dtype=np.float64).copy()
    for _ in range(max_iter):
        r = p.residual(theta)
        if np.linalg.norm(r) <= tol:
            return theta
        theta -= np.linalg.lstsq(p.jacobian(theta), r, rcond=None)[0]
    if np.linalg.norm(p.residual(theta)) <= tol:
        return theta
    raise NumericalFailure("Newton iteration did not reach the requested residual", theta=theta)


# -- neural-network problems -----------------------------------------------------


class _LinearizationCache:
    """Forward passes at the most recently seen ``theta``, one per input set.

    Lanczos calls ``jvp``/``vjp`` many times at a fixed ``theta``; this avoids
    repeating the forward pass for each product.
    """

    def __init__(self):
        self._entry = (None, {})

    def get(self, net: Mlp, theta, x, tag: str, laplacian: bool = False):
        key = theta.tobytes()
        entry = self._entry
        if entry[0] != key:
            # swap in a fresh slot as one tuple so concurrent callers never
            # store into a slot that belongs to another theta
            entry = (key, {})
            self._entry = entry
        lins = entry[1]
        lin = lins.get(tag)
        if lin is None:
            lin = lins[tag] = net.linearize(theta, x, laplacian)
        return lin


def sine_target(x, frequency):
    return np.sin(frequency * np.pi * x.sum(axis=1))


class MlpRegression(ResidualProblem):
    """Fit ``sin(n pi sum x_i)`` on ``[0, 1]^d`` with a tanh network.

    ``F_i = sqrt(2 / B) (u(x_i) - y_i)``, so ``f`` is the mean squared error
    over the current batch.
    """

    stochastic = True

    def __init__(self, net: Mlp, x, frequency: float, x_test=None):
        self.net = net
        self.x = np.asarray(x, dtype=np.float64)
        self.frequency = frequency
        self.y = sine_target(self.x, frequency)
        self.x_test = x_test
        self.param_dim = net.n_params
        self.residual_dim = self.x.shape[0]
        self._scale = np.sqrt(2.0 / self.residual_dim)
        self._cache = _LinearizationCache()

    def _lin(self, theta):
        return self._cache.get(self.net, self._check_theta(theta), self.x, "x")

    def residual(self, theta):
        return self._scale * (self._lin(theta).u[:, 0] - self.y)

    def jvp(self, theta, v):
        return self._scale * self._lin(theta).jvp(v)[:, 0]

    def vjp(self, theta, u):
        return self._lin(theta).vjp(self._scale * np.asarray(u)[:, None])

    def jacobian(self, theta):
        return self._scale * self._lin(theta).per_sample_grads()

    def initial_point(self, rng):
        return self.net.init_xavier(rng)

    def resample(self, rng):
        x = rng.random((self.residual_dim, self.net.in_dim))
        return MlpRegression(self.net, x, self.frequency, self.x_test)

    def evaluation(self):
        if self.x_test is None:
            return self
        return MlpRegression(self.net, self.x_test, self.frequency)


def make_mlp_regression(
    dim: int = 1,
    frequency: float = 3.0,
    hidden=(16, 16),
    batch_size: int = 256,
    test_size: int = 4096,
    seed: int = 0,
    activation: str = "tanh",
) -> MlpRegression:
    """The fixed test set and the first batch are drawn from ``seed``."""
    net = Mlp((dim, *hidden, 1), activation)
    rng = np.random.default_rng(seed)
    x_test = rng.random((test_size, dim))
    x = rng.random((batch_size, dim))
    return MlpRegression(net, x, frequency, x_test)


def sample_ball(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    """Uniform points in the unit ball: Gaussian direction, radius ``u**(1/d)``."""
    directions = sample_sphere(rng, count, dim)
    return directions * rng.random(count)[:, None] ** (1.0 / dim)


def sample_sphere(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    g = rng.standard_normal((count, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


class PoissonCollocation(ResidualProblem):
    """Collocation residual for ``-Lap u = -2d`` in the unit ball, ``u = 1`` on its boundary.

    ``0.5 * ||F||^2`` equals the mean interior residual squared plus
    ``lambda_bc`` times the mean boundary residual squared.  Exact solution
    ``u*(x) = ||x||^2``.
    """

    stochastic = True

    def __init__(self, net: Mlp, x_int, x_bd, lambda_bc: float = 1000.0, test=None):
        self.net = net
        self.dim = net.in_dim
        self.x_int = np.asarray(x_int, dtype=np.float64)
        self.x_bd = np.asarray(x_bd, dtype=np.float64)
        self.lambda_bc = lambda_bc
        self.test = test
        self.n_int = self.x_int.shape[0]
        self.n_bd = self.x_bd.shape[0]
        self.param_dim = net.n_params
        self.residual_dim = self.n_int + self.n_bd
        self._c_int = np.sqrt(2.0 / self.n_int)
        self._c_bd = np.sqrt(2.0 * lambda_bc / self.n_bd)
        self._cache = _LinearizationCache()

    def _lins(self, theta):
        theta = self._check_theta(theta)
        return (
            self._cache.get(self.net, theta, self.x_int, "int", laplacian=True),
            self._cache.get(self.net, theta, self.x_bd, "bd"),
        )

    @staticmethod
    def exact(x):
        return np.sum(np.asarray(x) ** 2, axis=1)

    def residual(self, theta):
        lin_int, lin_bd = self._lins(theta)
        return np.concatenate(
            [self._c_int * (lin_int.lu[:, 0] - 2.0 * self.dim), self._c_bd * (lin_bd.u[:, 0] - 1.0)]
        )

    def jvp(self, theta, v):
        lin_int, lin_bd = self._lins(theta)
        _, tl = lin_int.jvp(v)
        tu = lin_bd.jvp(v)
        return np.concatenate([self._c_int * tl[:, 0], self._c_bd * tu[:, 0]])

    def vjp(self, theta, u):
        lin_int, lin_bd = self._lins(theta)
        u = np.asarray(u, dtype=np.float64)
        ui = self._c_int * u[: self.n_int, None]
        ub = self._c_bd * u[self.n_int :, None]
        return lin_int.vjp(np.zeros_like(ui), ui) + lin_bd.vjp(ub)

    def jacobian(self, theta):
        lin_int, lin_bd = self._lins(theta)
        return np.vstack(
            [self._c_int * lin_int.per_sample_grads(), self._c_bd * lin_bd.per_sample_grads()]
        )

    def initial_point(self, rng):
        return self.net.init_xavier(rng)

    def resample(self, rng):
        x_int = sample_ball(rng, self.n_int, self.dim)
        x_bd = sample_sphere(rng, self.n_bd, self.dim)
        return PoissonCollocation(self.net, x_int, x_bd, self.lambda_bc, self.test)

    def evaluation(self):
        if self.test is None:
            return self
        return PoissonCollocation(self.net, *self.test, self.lambda_bc)

    def relative_l2_error(self, theta, x=None) -> float:
        """``||u - u*|| / ||u*||`` over ``x`` (default: the interior test points)."""
        if x is None:
            x = self.test[0] if self.test is not None else self.x_int
        u = self.net.forward(theta, x)[:, 0]
        exact = self.exact(x)
        return float(np.linalg.norm(u - exact) / np.linalg.norm(exact))


def make_poisson(
    dim: int = 2,
    hidden=(16, 16),
    n_interior: int = 256,
    n_boundary: int = 128,
    lambda_bc: float = 1000.0,
    test_size: int = 4096,
    seed: int = 0,
    activation: str = "tanh",
) -> PoissonCollocation:
    net = Mlp((dim, *hidden, 1), activation)
    rng = np.random.default_rng(seed)
    test = (sample_ball(rng, test_size, dim), sample_sphere(rng, max(test_size // 4, 1), dim))
    return PoissonCollocation(
        net, sample_ball(rng, n_interior, dim), sample_sphere(rng, n_boundary, dim), lambda_bc, test
    )


class SoftmaxToy(ResidualProblem):
    """Softmax classifier; the residual is the flattened ``B x K`` logit array.

    The objective is the mean cross-entropy, not ``0.5 * ||F||^2``; the
    gradient is ``J^T (P - Y) / B``.
    """

    loss_kind = "cross_entropy"

    def __init__(self, net: Mlp, features, labels):
        self.net = net
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.classes = net.out_dim
        self.batch = self.features.shape[0]
        if self.labels.shape != (self.batch,):
            raise InvalidInputError("one label per sample required")
        self.param_dim = net.n_params
        self.residual_dim = self.batch * self.classes
        self._onehot = np.eye(self.classes)[self.labels]
        self._cache = _LinearizationCache()

    def _lin(self, theta):
        return self._cache.get(self.net, self._check_theta(theta), self.features, "x")

    def logits(self, theta):
        return self._lin(theta).u

    def residual(self, theta):
        return self.logits(theta).ravel()

    def jvp(self, theta, v):
        return self._lin(theta).jvp(v).ravel()

    def vjp(self, theta, u):
        return self._lin(theta).vjp(np.asarray(u).reshape(self.batch, self.classes))

    def probs(self, theta) -> np.ndarray:
        return softmax(self.logits(theta), axis=1)

    def fisher_probs(self, theta) -> np.ndarray:
        """Softmax rows clamped to ``[1e-12, 1]`` and renormalized."""
        p = np.clip(self.probs(theta), PROB_CLAMP, 1.0)
        return p / p.sum(axis=1, keepdims=True)

    def objective(self, theta):
        z = self.logits(theta)
        if not np.all(np.isfinite(z)):
            raise NumericalFailure("logits are not finite", theta=theta)
        logp = z - logsumexp(z, axis=1, keepdims=True)
        return float(-np.mean(logp[np.arange(self.batch), self.labels]))

    def gradient(self, theta):
        theta = self._check_theta(theta)
        return self.vjp(theta, (self.probs(theta) - self._onehot).ravel() / self.batch)

    def initial_point(self, rng):
        return self.net.init_xavier(rng)


def make_softmax_toy(
    classes: int = 3,
    dim: int = 2,
    per_class: int = 20,
    hidden=(),
    seed: int = 0,
) -> SoftmaxToy:
    """Gaussian blobs, one per class, around random centers."""
    rng = np.random.default_rng(seed)
    centers = 2.0 * rng.standard_normal((classes, dim))
    labels = np.repeat(np.arange(classes), per_class)
    features = centers[labels] + rng.standard_normal((labels.size, dim))
    return SoftmaxToy(Mlp((dim, *hidden, classes)), features, labels)
