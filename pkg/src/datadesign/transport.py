"""Optimal transport between Gaussian and equal-weight empirical measures."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .errors import (
    DimensionMismatch,
    InvalidMatrix,
    NoConvergence,
    UnsupportedConfiguration,
)
from .measures import EmpiricalMeasure, GaussianMeasure, MetaTestEnsemble


@dataclass(frozen=True, eq=False)
class AffineMap:
    """``u -> offset + linear @ u``."""

    offset: np.ndarray
    linear: np.ndarray

    def __post_init__(self):
        if self.linear.shape != (self.offset.size, self.offset.size):
            raise DimensionMismatch("offset and linear part disagree in dimension")

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        return u @ self.linear.T + self.offset


def _check_same_dim(a, b):
    if a.dim != b.dim:
        raise DimensionMismatch(f"dimensions differ: {a.dim} vs {b.dim}")


def _symmetric_eig(M, tol=1e-10):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise InvalidMatrix(f"expected square matrix, got {M.shape}")
    if np.max(np.abs(M - M.T), initial=0.0) > tol * max(1.0, np.max(np.abs(M), initial=0.0)):
        raise InvalidMatrix("matrix is not symmetric")
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    return np.clip(w, 0.0, None), V


def psd_sqrt(M) -> np.ndarray:
    """Symmetric PSD square root; negative round-off eigenvalues are clamped to 0."""
    w, V = _symmetric_eig(M)
    R = (V * np.sqrt(w)) @ V.T
    return 0.5 * (R + R.T)


def _psd_inv_sqrt(M) -> np.ndarray:
    w, V = _symmetric_eig(M)
    return (V / np.sqrt(w)) @ V.T


def w2_gaussian_squared(a: GaussianMeasure, b: GaussianMeasure) -> float:
    _check_same_dim(a, b)
    Ca, Cb = a.cov, b.cov
    Ra = psd_sqrt(Ca)
    cross = psd_sqrt(Ra @ Cb @ Ra)
    dm = a.mean - b.mean
    return float(dm @ dm + max(np.trace(Ca + Cb - 2.0 * cross), 0.0))


def w2_gaussian(a: GaussianMeasure, b: GaussianMeasure) -> float:
    """Closed-form 2-Wasserstein distance between two Gaussians."""
    return float(np.sqrt(w2_gaussian_squared(a, b)))


def gaussian_ot_linear(a: GaussianMeasure, b: GaussianMeasure) -> np.ndarray:
    """``A = Ca^{-1/2} (Ca^{1/2} Cb Ca^{1/2})^{1/2} Ca^{-1/2}``."""
    _check_same_dim(a, b)
    Ca = a.cov
    Ra = psd_sqrt(Ca)
    Ra_inv = _psd_inv_sqrt(Ca)
    A = Ra_inv @ psd_sqrt(Ra @ b.cov @ Ra) @ Ra_inv
    return 0.5 * (A + A.T)


def gaussian_ot_map(a: GaussianMeasure, b: GaussianMeasure) -> AffineMap:
    """Brenier map ``T(u) = m_b + A (u - m_a)`` pushing ``a`` onto ``b``."""
    A = gaussian_ot_linear(a, b)
    return AffineMap(offset=b.mean - A @ a.mean, linear=A)


def kantorovich_potential(a: GaussianMeasure, b: GaussianMeasure, u) -> np.ndarray | float:
    """``phi(u) = |u|^2/2 - <u, A u>/2 - <u, m_b - A m_a>`` (additive constant fixed to 0).

    Its gradient is ``u - T(u)``.
    """
    T = gaussian_ot_map(a, b)
    u = np.asarray(u, dtype=float)
    U = np.atleast_2d(u)
    val = 0.5 * np.sum(U * U, axis=1) - 0.5 * np.sum(U * (U @ T.linear.T), axis=1) - U @ T.offset
    return float(val[0]) if u.ndim == 1 else val


def w2_empirical(a: EmpiricalMeasure, b: EmpiricalMeasure, return_assignment: bool = False):
    """Exact W2 between equal-size uniform point clouds via optimal assignment.

    With ``return_assignment=True`` also returns ``perm`` such that point ``i``
    of ``a`` is transported onto point ``perm[i]`` of ``b``.
    """
    _check_same_dim(a, b)
    if a.size != b.size:
        raise UnsupportedConfiguration(
            f"w2_empirical needs equal particle counts, got {a.size} and {b.size}"
        )
    cost = cdist(a.points, b.points, "sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(a.size, dtype=int)
    perm[rows] = cols
    w2 = float(np.sqrt(max(cost[rows, cols].sum() / a.size, 0.0)))
    if return_assignment:
        return w2, perm
    return w2


def barycenter_residual(cov, Q: MetaTestEnsemble) -> float:
    """Frobenius norm of ``C - sum_k w_k (C^{1/2} C_k C^{1/2})^{1/2}``."""
    R = psd_sqrt(cov)
    S = sum(w * psd_sqrt(R @ a.cov @ R) for w, a in zip(Q.weights, Q.atoms))
    return float(np.linalg.norm(cov - S))


def gaussian_barycenter(Q: MetaTestEnsemble, tol: float = 1e-10, max_iter: int = 1000) -> GaussianMeasure:
    """W2 barycenter of Gaussian atoms by fixed-point iteration on the covariance.

    Starts from the weighted covariance average. A plain Picard step is used
    until the residual stops decreasing, after which the update is damped by 0.5.
    """
    if not Q.is_gaussian:
        raise UnsupportedConfiguration("gaussian_barycenter requires Gaussian atoms")
    if tol <= 0:
        raise ValueError("tol must be positive")
    w = Q.weights
    mean = sum(wk * a.mean for wk, a in zip(w, Q.atoms))
    covs = [a.cov for a in Q.atoms]
    C = sum(wk * Ck for wk, Ck in zip(w, covs))
    damping = 1.0
    residual = barycenter_residual(C, Q)
    for _ in range(max_iter):
        if residual < tol:
            return GaussianMeasure.from_covariance(mean, C)
        R = psd_sqrt(C)
        R_inv = _psd_inv_sqrt(C)
        S = sum(wk * psd_sqrt(R @ Ck @ R) for wk, Ck in zip(w, covs))
        C_next = R_inv @ S @ S @ R_inv
        C_next = 0.5 * (C_next + C_next.T)
        C_new = (1.0 - damping) * C + damping * C_next
        new_residual = barycenter_residual(C_new, Q)
        if new_residual > residual and damping == 1.0:
            damping = 0.5
            continue
        C, residual = C_new, new_residual
    if residual < tol:
        return GaussianMeasure.from_covariance(mean, C)
    raise NoConvergence(
        f"barycenter residual {residual:.3e} above tol after {max_iter} iterations",
        last_iterate=GaussianMeasure.from_covariance(mean, C),
        residual=residual,
    )


def _sample_atom(atom, n, rng):
    if isinstance(atom, GaussianMeasure):
        return atom.sample(n, rng)
    return atom.points[rng.integers(0, atom.size, size=n)]


def sample_mixture(Q: MetaTestEnsemble, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` draws from the mixture ``sum_k w_k atom_k``."""
    counts = rng.multinomial(n, Q.weights)
    parts = [_sample_atom(a, c, rng) for a, c in zip(Q.atoms, counts) if c > 0]
    return np.concatenate(parts, axis=0)


def _atom_w2_squared(a, b):
    if isinstance(a, GaussianMeasure) and isinstance(b, GaussianMeasure):
        return w2_gaussian_squared(a, b)
    if isinstance(a, EmpiricalMeasure) and isinstance(b, EmpiricalMeasure):
        return w2_empirical(a, b) ** 2
    raise UnsupportedConfiguration("atom pairs must both be Gaussian or both empirical")


def ensemble_w2(Q1: MetaTestEnsemble, Q2: MetaTestEnsemble) -> float:
    """W2 between two uniform K-atom meta distributions (atom-level assignment)."""
    if len(Q1) != len(Q2):
        raise UnsupportedConfiguration("ensembles must have the same number of atoms")
    if not (np.allclose(Q1.weights, 1.0 / len(Q1)) and np.allclose(Q2.weights, 1.0 / len(Q2))):
        raise UnsupportedConfiguration("ensemble_w2 supports uniform atom weights only")
    _check_same_dim(Q1, Q2)
    cost = np.array([[_atom_w2_squared(a, b) for b in Q2.atoms] for a in Q1.atoms])
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def mixture_w2_stability_check(Q1: MetaTestEnsemble, Q2: MetaTestEnsemble, n: int, rng):
    """Sampled W2 between the two mixtures (lhs) and the ensemble W2 bounding it (rhs)."""
    x = sample_mixture(Q1, n, rng)
    y = sample_mixture(Q2, n, rng)
    lhs = w2_empirical(EmpiricalMeasure(x), EmpiricalMeasure(y))
    return lhs, ensemble_w2(Q1, Q2)
