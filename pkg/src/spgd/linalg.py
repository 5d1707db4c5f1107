"""Dense and Krylov linear algebra used by the preconditioners.

Matrices are plain 2-D ``float64`` numpy arrays.  The dense factorizations
delegate to LAPACK through numpy/scipy; the Lanczos process and the
matrix-function application on top of it are implemented here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from .errors import InvalidInputError, NumericalFailure

# relative size of a Lanczos residual below which the Krylov space is invariant
BREAKDOWN_TOL = 1e-12


def _as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidInputError(f"expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("matrix contains non-finite entries")
    return a


@dataclass(frozen=True)
class SvdFactors:
    """Rank-truncated thin SVD ``a = u @ diag(sigma) @ v.T``.

    ``u`` is ``n x r``, ``v`` is ``m x r`` and ``sigma`` is descending.
    """

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray
    rank: int
    trunc_tol: float

    @property
    def sigma_max(self) -> float:
        return float(self.sigma[0]) if self.rank else 0.0

    @property
    def sigma_min(self) -> float:
        """Smallest retained singular value."""
        return float(self.sigma[-1]) if self.rank else 0.0

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


def default_trunc_tol(shape) -> float:
    return max(shape) * np.finfo(np.float64).eps


def thin_svd(a, trunc_tol: float | None = None) -> SvdFactors:
    """Economy SVD of ``a`` with singular values ``<= trunc_tol * sigma_max`` dropped.

    ``trunc_tol`` defaults to ``max(n, m) * eps``.
    """
    a = _as_matrix(a)
    if trunc_tol is None:
        trunc_tol = default_trunc_tol(a.shape)
    if trunc_tol < 0:
        raise InvalidInputError("trunc_tol must be nonnegative")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"SVD did not converge: {exc}") from exc
    if s.size == 0 or s[0] == 0.0:
        n, m = a.shape
        return SvdFactors(np.zeros((n, 0)), np.zeros(0), np.zeros((m, 0)), 0, trunc_tol)
    r = int(np.count_nonzero(s > trunc_tol * s[0]))
    return SvdFactors(u[:, :r], s[:r].copy(), vt[:r].T.copy(), r, trunc_tol)


@dataclass(frozen=True)
class Tridiagonal:
    """Symmetric tridiagonal matrix given by its diagonal and off-diagonal."""

    alphas: np.ndarray
    betas: np.ndarray

    def __post_init__(self):
        if len(self.alphas) < 1 or len(self.betas) != len(self.alphas) - 1:
            raise InvalidInputError(
                f"need k >= 1 diagonal and k-1 off-diagonal entries, "
                f"got {len(self.alphas)} and {len(self.betas)}"
            )

    @property
    def k(self) -> int:
        return len(self.alphas)

    def dense(self) -> np.ndarray:
        t = np.diag(np.asarray(self.alphas, dtype=np.float64))
        if self.k > 1:
            t += np.diag(self.betas, 1) + np.diag(self.betas, -1)
        return t


@dataclass(frozen=True)
class SymEig:
    values: np.ndarray
    vectors: np.ndarray


def sym_eig(t: Tridiagonal) -> SymEig:
    """Eigendecomposition of a symmetric tridiagonal matrix, ascending eigenvalues."""
    d = np.asarray(t.alphas, dtype=np.float64)
    e = np.asarray(t.betas, dtype=np.float64)
    if not (np.all(np.isfinite(d)) and np.all(np.isfinite(e))):
        raise InvalidInputError("tridiagonal entries must be finite")
    if t.k == 1:
        return SymEig(d.copy(), np.ones((1, 1)))
    try:
        values, vectors = scipy.linalg.eigh_tridiagonal(d, e)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalFailure(f"tridiagonal eigensolver failed: {exc}") from exc
    return SymEig(values, vectors)


@dataclass(frozen=True)
class LinearMap:
    """Matrix-free operator ``v -> A v`` together with its adjoint."""

    in_dim: int
    out_dim: int
    apply: Callable[[np.ndarray], np.ndarray]
    apply_adjoint: Callable[[np.ndarray], np.ndarray]

    @classmethod
    def from_matrix(cls, a) -> "LinearMap":
        a = _as_matrix(a)
        return cls(a.shape[1], a.shape[0], lambda v: a @ v, lambda u: a.T @ u)

    def __matmul__(self, v):
        return self.apply(v)

    def dense(self) -> np.ndarray:
        """Materialize the operator column by column (testing aid)."""
        eye = np.eye(self.in_dim)
        return np.column_stack([self.apply(eye[:, i]) for i in range(self.in_dim)])


def adjoint_mismatch(op: LinearMap, rng: np.random.Generator, probes: int = 10) -> float:
    """Largest relative gap between ``<Av, u>`` and ``<v, A^T u>`` over random probes."""
    worst = 0.0
    for _ in range(probes):
        v = rng.standard_normal(op.in_dim)
        u = rng.standard_normal(op.out_dim)
        av = op.apply(v)
        atu = op.apply_adjoint(u)
        lhs = float(av @ u)
        rhs = float(v @ atu)
        scale = np.linalg.norm(av) * np.linalg.norm(u) + np.linalg.norm(v) * np.linalg.norm(atu)
        if scale > 0:
            worst = max(worst, abs(lhs - rhs) / scale)
    return worst


@dataclass(frozen=True)
class LanczosBasis:
    q: np.ndarray
    tri: Tridiagonal
    k_eff: int
    breakdown: bool


def lanczos(op, g, k: int) -> LanczosBasis:
    """Lanczos tridiagonalization of a symmetric operator started at ``g``.

    ``op`` is a :class:`LinearMap` or a plain callable ``v -> A v``.  Every new
    basis vector is reorthogonalized (twice) against all previous ones.  The
    process stops early, with ``breakdown=True``, once the new residual is
    below ``BREAKDOWN_TOL`` times the largest recurrence coefficient seen;
    the Krylov space is then invariant and any matrix function applied
    through it is exact.
    """
    matvec = op.apply if isinstance(op, LinearMap) else op
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 1:
        raise InvalidInputError("starting vector must be 1-D")
    if k < 1:
        raise InvalidInputError("Lanczos depth k must be >= 1")
    g_norm = np.linalg.norm(g)
    if not np.isfinite(g_norm):
        raise InvalidInputError("starting vector has non-finite entries")
    if g_norm == 0.0:
        raise InvalidInputError("starting vector must be nonzero")

    m = g.size
    k = min(k, m)
    q = np.zeros((m, k))
    q[:, 0] = g / g_norm
    alphas: list[float] = []
    betas: list[float] = []
    scale = 0.0
    breakdown = False
    for j in range(k):
        w = np.asarray(matvec(q[:, j]), dtype=np.float64)
        if not np.all(np.isfinite(w)):
            raise NumericalFailure(f"operator produced non-finite values at Lanczos step {j}")
        a = float(q[:, j] @ w)
        alphas.append(a)
        w = w - a * q[:, j]
        if j > 0:
            w -= betas[-1] * q[:, j - 1]
        basis = q[:, : j + 1]
        for _ in range(2):
            w -= basis @ (basis.T @ w)
        b = float(np.linalg.norm(w))
        scale = max(scale, abs(a), betas[-1] if betas else 0.0)
        if b <= BREAKDOWN_TOL * scale:
            breakdown = True
            break
        if j == k - 1:
            break
        betas.append(b)
        q[:, j + 1] = w / b

    k_eff = len(alphas)
    return LanczosBasis(
        q=q[:, :k_eff],
        tri=Tridiagonal(np.array(alphas), np.array(betas)),
        k_eff=k_eff,
        breakdown=breakdown,
    )


def tridiag_func_apply(basis: LanczosBasis, g_norm: float, f) -> np.ndarray:
    """Return ``g_norm * Q f(T) e_1``, the Lanczos estimate of ``f(A) g``."""
    eig = sym_eig(basis.tri)
    with np.errstate(all="ignore"):
        fvals = np.asarray(f(eig.values), dtype=np.float64)
    if fvals.shape != eig.values.shape:
        fvals = np.broadcast_to(fvals, eig.values.shape)
    bad = ~np.isfinite(fvals)
    if bad.any():
        lam = eig.values[bad][0]
        raise NumericalFailure(f"matrix function is not finite at eigenvalue {lam!r}")
    coeffs = eig.vectors @ (fvals * eig.vectors[0, :])
    return g_norm * (basis.q @ coeffs)
