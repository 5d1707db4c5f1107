"""SVD-based preconditioners and their damped / Krylov approximations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfigError, InvalidInputError, NumericalFailure
from .linalg import BREAKDOWN_TOL, LinearMap, SvdFactors, lanczos, thin_svd, tridiag_func_apply

KINDS = ("exact_svd", "damped_dense", "damped_lanczos", "ce_lanczos")


@dataclass(frozen=True)
class PrecondSpec:
    """Which preconditioner to apply and its parameters.

    ``mu`` and ``p`` define ``(J^T J + mu I)^(-p)``; ``delta`` is the damping
    inside the cross-entropy operator; ``k`` is the Lanczos depth.
    ``exact_svd`` ignores everything except ``trunc_tol``.
    """

    kind: str = "damped_lanczos"
    mu: float = 1e-5
    p: float = 0.5
    k: int = 10
    delta: float = 1e-4
    trunc_tol: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidConfigError(f"unknown preconditioner kind {self.kind!r}")
        if self.mu < 0 or self.delta < 0:
            raise InvalidConfigError("damping parameters must be nonnegative")
        if self.p <= 0:
            raise InvalidConfigError("exponent p must be positive")
        if self.kind in ("damped_lanczos", "ce_lanczos") and self.k < 1:
            raise InvalidConfigError("Lanczos depth k must be >= 1")
        if self.trunc_tol is not None and self.trunc_tol < 0:
            raise InvalidConfigError("trunc_tol must be nonnegative")


def spgd_direction(svd: SvdFactors, residual) -> np.ndarray:
    """``V U^T F`` over the retained singular triplets."""
    residual = np.asarray(residual, dtype=np.float64)
    if residual.shape != (svd.u.shape[0],):
        raise InvalidInputError(
            f"residual has shape {residual.shape}, Jacobian has {svd.u.shape[0]} rows"
        )
    return svd.v @ (svd.u.T @ residual)


def precond_gradient_exact(svd: SvdFactors, grad) -> np.ndarray:
    """``[(J^T J)^+]^(1/2) grad = V diag(1/sigma) V^T grad``."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (svd.v.shape[0],):
        raise InvalidInputError(
            f"gradient has shape {grad.shape}, Jacobian has {svd.v.shape[0]} columns"
        )
    return svd.v @ ((svd.v.T @ grad) / svd.sigma)


def damped_apply_dense(j, g, mu: float, p: float) -> np.ndarray:
    """``(J^T J + mu I)^(-p) g`` through a dense eigendecomposition of ``J^T J``."""
    j = np.asarray(j, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    gram = j.T @ j
    lam, w = np.linalg.eigh(0.5 * (gram + gram.T))
    shifted = lam + mu
    if np.any(shifted <= 0):
        bad = lam[shifted <= 0][0]
        raise NumericalFailure(f"J^T J + mu I is not positive definite (eigenvalue {bad!r}, mu={mu})")
    return w @ (shifted**-p * (w.T @ g))


def lanczos_apply(op, g, f, k: int) -> np.ndarray:
    """Lanczos estimate of ``f(A) g`` for a symmetric operator ``A``."""
    g = np.asarray(g, dtype=np.float64)
    basis = lanczos(op, g, k)
    return tridiag_func_apply(basis, float(np.linalg.norm(g)), f)


def damped_apply_lanczos(jvp, vjp, theta, g, spec: PrecondSpec) -> np.ndarray:
    """Lanczos estimate of ``(J^T J + mu I)^(-p) g`` using only J- and J^T-products.

    The Krylov space is built for the unshifted ``J^T J``; the damping enters
    through the scalar function ``(lambda + mu)^(-p)`` on the Ritz values.
    """
    g = np.asarray(g, dtype=np.float64)
    if not np.any(g):
        raise InvalidInputError("cannot precondition a zero vector with Lanczos")
    mu, p = spec.mu, spec.p

    def gram(v):
        return vjp(theta, jvp(theta, v))

    def f(lam):
        # Ritz values at roundoff level are zeros of the PSD Gram matrix
        lam = np.where(np.abs(lam) <= BREAKDOWN_TOL * np.abs(lam).max(), 0.0, lam)
        return (lam + mu) ** -p

    return lanczos_apply(gram, g, f, spec.k)


def fisher_block_apply(p, u) -> np.ndarray:
    """``(diag(p) - p p^T) u``; also works row-wise on ``B x K`` arrays."""
    p = np.asarray(p, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    return p * u - p * np.sum(p * u, axis=-1, keepdims=True)


def ce_operator(jvp, vjp, theta, probs, delta: float) -> LinearMap:
    """``v -> J^T C J v + delta v`` with ``C`` block-diagonal Fisher blocks, never formed."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise InvalidInputError("probabilities must be a B x K array")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-9):
        raise InvalidInputError("each probability vector must sum to 1 within 1e-9")
    shape = probs.shape

    def apply(v):
        ju = np.asarray(jvp(theta, v)).reshape(shape)
        return vjp(theta, fisher_block_apply(probs, ju).ravel()) + delta * v

    dim = int(np.asarray(theta).size)
    return LinearMap(dim, dim, apply, apply)


def precondition(problem, theta, g, spec: PrecondSpec) -> np.ndarray:
    """Preconditioned gradient for one optimizer step.

    A zero gradient maps to the zero direction for every kind.
    """
    g = np.asarray(g, dtype=np.float64)
    if not np.any(g):
        return np.zeros_like(g)
    if spec.kind == "exact_svd":
        return precond_gradient_exact(thin_svd(problem.jacobian(theta), spec.trunc_tol), g)
    if spec.kind == "damped_dense":
        return damped_apply_dense(problem.jacobian(theta), g, spec.mu, spec.p)
    if spec.kind == "damped_lanczos":
        return damped_apply_lanczos(problem.jvp, problem.vjp, theta, g, spec)
    if not hasattr(problem, "fisher_probs"):
        raise InvalidConfigError("ce_lanczos needs a classification problem with softmax outputs")
    op = ce_operator(problem.jvp, problem.vjp, theta, problem.fisher_probs(theta), spec.delta)
    p = spec.p
    return lanczos_apply(op, g, lambda lam: lam**-p, spec.k)
