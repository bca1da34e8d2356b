"""Probability measures on R^d used as training and test distributions.

Gaussians are stored through a lower-triangular Cholesky factor ``L`` of the
covariance ``C = L L^T``; this factor is the optimization variable of both
training-distribution optimizers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, InvalidDegreesOfFreedom, InvalidMatrix

DIAG_FLOOR = 1e-7


def make_rng(seed) -> np.random.Generator:
    """Counter-based seeded stream (Philox). Accepts an int or a SeedSequence."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Independent child streams; the parent stream is advanced deterministically."""
    return rng.spawn(n)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def project_cholesky(L, floor: float = DIAG_FLOOR) -> np.ndarray:
    """Replace diagonal entries below ``floor`` by ``floor``; off-diagonals untouched."""
    L = np.array(L, dtype=float, copy=True)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise InvalidMatrix(f"expected a square matrix, got shape {L.shape}")
    idx = np.diag_indices_from(L)
    L[idx] = np.maximum(L[idx], floor)
    return L


@dataclass(frozen=True, eq=False)
class GaussianMeasure:
    """N(mean, L L^T) on R^d."""

    mean: np.ndarray
    cov_factor: np.ndarray
    diag_floor: float = field(default=DIAG_FLOOR, repr=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        L = np.atleast_2d(np.asarray(self.cov_factor, dtype=float))
        if mean.ndim != 1:
            raise DimensionMismatch("mean must be a vector")
        if L.shape != (mean.size, mean.size):
            raise DimensionMismatch(
                f"cov_factor shape {L.shape} does not match mean dimension {mean.size}"
            )
        if np.any(np.triu(L, 1) != 0.0):
            raise InvalidMatrix("cov_factor must be lower triangular")
        if np.any(np.diag(L) < self.diag_floor):
            raise InvalidMatrix(
                f"cov_factor diagonal must be >= {self.diag_floor}; use project_cholesky"
            )
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "cov_factor", _frozen(L))

    @classmethod
    def from_covariance(cls, mean, cov) -> "GaussianMeasure":
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        return cls(mean, np.linalg.cholesky(cov))

    @classmethod
    def standard(cls, d: int) -> "GaussianMeasure":
        return cls(np.zeros(d), np.eye(d))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def cov(self) -> np.ndarray:
        L = self.cov_factor
        return L @ L.T

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Array of shape (n, d): ``m + L z`` with ``z ~ N(0, I)``."""
        z = rng.standard_normal((n, self.dim))
        return self.mean + z @ self.cov_factor.T

    def whiten(self, u) -> np.ndarray:
        """``L^{-1}(u - m)`` row-wise."""
        x = np.atleast_2d(u) - self.mean
        return solve_triangular(self.cov_factor, x.T, lower=True).T

    def precision_residual(self, u) -> np.ndarray:
        """``C^{-1}(u - m)`` row-wise, via two triangular solves."""
        w = self.whiten(u)
        return solve_triangular(self.cov_factor.T, w.T, lower=False).T

    def log_density(self, u) -> np.ndarray:
        w = self.whiten(u)
        logdet = 2.0 * np.sum(np.log(np.diag(self.cov_factor)))
        return -0.5 * np.sum(w**2, axis=1) - 0.5 * logdet - 0.5 * self.dim * np.log(2 * np.pi)


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Equal-weight particle set; ``points`` has shape (N, d)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise DimensionMismatch("points must be a non-empty (N, d) array")
        object.__setattr__(self, "points", _frozen(pts))

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def __len__(self):
        return self.size


Measure = Union[GaussianMeasure, EmpiricalMeasure]


@dataclass(frozen=True, eq=False)
class MetaTestEnsemble:
    """Finite meta distribution ``sum_k w_k delta_{atom_k}``.

    ``labels`` optionally holds target values for the points of empirical atoms.
    """

    atoms: tuple
    weights: np.ndarray = None
    labels: tuple = None

    def __post_init__(self):
        atoms = tuple(self.atoms)
        if len(atoms) < 1:
            raise ValueError("ensemble needs at least one atom")
        dims = {a.dim for a in atoms}
        if len(dims) != 1:
            raise DimensionMismatch(f"atoms have mixed dimensions {sorted(dims)}")
        K = len(atoms)
        w = np.full(K, 1.0 / K) if self.weights is None else np.asarray(self.weights, float)
        if w.shape != (K,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative, one per atom, summing to 1")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", _frozen(w))
        if self.labels is not None:
            labels = tuple(np.asarray(y, dtype=float) for y in self.labels)
            if len(labels) != K:
                raise DimensionMismatch("one label vector per atom required")
            for a, y in zip(atoms, labels):
                if not isinstance(a, EmpiricalMeasure) or y.shape != (a.size,):
                    raise DimensionMismatch("labels must match empirical atom sizes")
            object.__setattr__(self, "labels", labels)

    @property
    def dim(self) -> int:
        return self.atoms[0].dim

    def __len__(self):
        return len(self.atoms)

    @property
    def is_gaussian(self) -> bool:
        return all(isinstance(a, GaussianMeasure) for a in self.atoms)

    @property
    def is_empirical(self) -> bool:
        return all(isinstance(a, EmpiricalMeasure) for a in self.atoms)

    def with_labels(self, target) -> "MetaTestEnsemble":
        """Label every empirical atom with ``target`` (callable on (n, d) arrays)."""
        labels = [np.asarray(target(a.points), dtype=float) for a in self.atoms]
        return MetaTestEnsemble(self.atoms, self.weights, labels)

    def subset(self, index_per_atom: Sequence) -> "MetaTestEnsemble":
        """Restrict each empirical atom (and its labels) to the given point indices."""
        atoms = [EmpiricalMeasure(a.points[idx]) for a, idx in zip(self.atoms, index_per_atom)]
        labels = None
        if self.labels is not None:
            labels = [y[idx] for y, idx in zip(self.labels, index_per_atom)]
        return MetaTestEnsemble(atoms, self.weights, labels)


def sample_gaussian(g: GaussianMeasure, n: int, rng: np.random.Generator) -> EmpiricalMeasure:
    if n < 1:
        raise ValueError("n must be >= 1")
    return EmpiricalMeasure(g.sample(n, rng))


def second_moment(m: Measure) -> float:
    """Uncentered second moment E|u|^2 (exact for both measure types)."""
    if isinstance(m, GaussianMeasure):
        return float(m.mean @ m.mean + np.sum(m.cov_factor**2))
    return float(np.mean(np.sum(m.points**2, axis=1)))


def score_mean(g: GaussianMeasure, u) -> np.ndarray:
    """Gradient of ``log p(u)`` in the mean: ``C^{-1}(u - m)``.

    Accepts a single point (returns shape (d,)) or a batch (n, d).
    """
    u = np.asarray(u, dtype=float)
    r = g.precision_residual(u)
    return r[0] if u.ndim == 1 else r


def score_cholesky(g: GaussianMeasure, u) -> np.ndarray:
    """Gradient of ``log p(u)`` in the free entries of the Cholesky factor.

    With ``r = C^{-1}(u - m)`` this is ``tril(r r^T L - L^{-T})``. Only the
    lower triangle is populated. Batches give shape (n, d, d).
    """
    u = np.asarray(u, dtype=float)
    L = g.cov_factor
    r = g.precision_residual(u)
    out = r[:, :, None] * (r @ L)[:, None, :]
    # L^{-T} is upper triangular; its lower part is the diagonal 1/L_ii.
    out = np.tril(out)
    idx = np.arange(g.dim)
    out[:, idx, idx] -= 1.0 / np.diag(L)
    return out[0] if u.ndim == 1 else out


def sample_wishart(d: int, dof: int, rng: np.random.Generator) -> np.ndarray:
    """One draw from Wishart(I_d, dof) by the Bartlett decomposition."""
    if dof < d:
        raise InvalidDegreesOfFreedom(f"dof={dof} must be >= d={d}")
    A = np.zeros((d, d))
    A[np.diag_indices(d)] = np.sqrt(rng.chisquare(dof - np.arange(d)))
    rows, cols = np.tril_indices(d, -1)
    A[rows, cols] = rng.standard_normal(rows.size)
    W = A @ A.T
    return 0.5 * (W + W.T)
