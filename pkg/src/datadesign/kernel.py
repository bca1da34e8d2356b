"""Squared-exponential kernel ridge regression and its adjoint solve."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.spatial.distance import cdist

from .errors import DegeneratePair, DimensionMismatch, SingularKernelMatrix
from .measures import MetaTestEnsemble


def kernel_matrix(X, Y, lengthscale: float) -> np.ndarray:
    """``exp(-|x - y|^2 / l^2)`` for all pairs of rows of X and Y."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[1] != Y.shape[1]:
        raise DimensionMismatch(f"dimensions differ: {X.shape[1]} vs {Y.shape[1]}")
    return np.exp(-cdist(X, Y, "sqeuclidean") / lengthscale**2)


def kernel_eval(x, y, lengthscale: float) -> float:
    return float(kernel_matrix(np.atleast_1d(x)[None, :], np.atleast_1d(y)[None, :], lengthscale)[0, 0])


@dataclass(frozen=True, eq=False)
class KernelModel:
    """Kernel expansion ``x -> sum_n coefficients[n] * k(x, centers[n])``.

    ``nugget`` is the ridge strength sigma^2; the fitted system is
    ``(K + N sigma^2 I) beta = y``. The Cholesky factor of that matrix is kept
    so adjoint solves on the same centers can reuse it.
    """

    centers: np.ndarray
    coefficients: np.ndarray
    lengthscale: float
    nugget: float = 0.0
    _factor: tuple = field(default=None, repr=False)

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.centers, dtype=float))
        b = np.atleast_1d(np.asarray(self.coefficients, dtype=float))
        if c.shape[0] < 1 or b.shape != (c.shape[0],):
            raise DimensionMismatch("need one coefficient per center and at least one center")
        if not self.lengthscale > 0:
            raise ValueError("lengthscale must be positive")
        if self.nugget < 0:
            raise ValueError("nugget must be nonnegative")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "coefficients", b)

    @classmethod
    def zero(cls, d: int, lengthscale: float = 1.0) -> "KernelModel":
        return cls(np.zeros((1, d)), np.zeros(1), lengthscale)

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def __call__(self, X) -> np.ndarray:
        return predict(self, X)


def _regularized_factor(X, lengthscale, nugget):
    N = X.shape[0]
    A = kernel_matrix(X, X, lengthscale)
    A[np.diag_indices(N)] += N * nugget
    try:
        factor = cho_factor(A, lower=True, check_finite=True)
    except LinAlgError as exc:
        raise SingularKernelMatrix(
            "regularized kernel matrix is not numerically positive definite"
        ) from exc
    diag = np.diag(factor[0])
    if nugget == 0.0 and diag.min() < 1e-7 * diag.max():
        raise SingularKernelMatrix("kernel matrix is numerically singular at zero nugget")
    return factor


def fit_krr(X, y, lengthscale: float, nugget: float) -> KernelModel:
    """Kernel ridge regression: ``beta = (K(X, X) + N nugget I)^{-1} y``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    if y.shape != (X.shape[0],):
        raise DimensionMismatch("one label per training point required")
    if nugget < 0:
        raise ValueError("nugget must be nonnegative")
    factor = _regularized_factor(X, lengthscale, nugget)
    beta = cho_solve(factor, y)
    return KernelModel(X, beta, lengthscale, nugget, _factor=factor)


def predict(model: KernelModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, model.dim)
    return kernel_matrix(X, model.centers, model.lengthscale) @ model.coefficients


def predict_gradient(model: KernelModel, x) -> np.ndarray:
    """Spatial gradient of the kernel expansion; batch input gives shape (n, d)."""
    x = np.asarray(x, dtype=float)
    X = np.atleast_2d(x)
    Kx = kernel_matrix(X, model.centers, model.lengthscale) * model.coefficients
    # d/dx exp(-|x - c|^2 / l^2) = -2 (x - c) / l^2 * k
    grad = -2.0 / model.lengthscale**2 * (Kx.sum(axis=1)[:, None] * X - Kx @ model.centers)
    return grad[0] if x.ndim == 1 else grad


def solve_adjoint(model: KernelModel, U, Qhat: MetaTestEnsemble, target_values_on_Q=None,
                  nugget: float | None = None) -> np.ndarray:
    """Adjoint state at the training points.

    Solves ``(K(U, U) + N s I) lam = N sum_j w_j / M_j K(U, V_j) (y_j - model(V_j))``
    where ``s`` is the nugget (defaults to the model's). Uniform weights
    ``w_j = 1/J`` give the usual average over test atoms.
    """
    U = np.atleast_2d(np.asarray(U, dtype=float))
    N = U.shape[0]
    nugget = model.nugget if nugget is None else nugget
    if target_values_on_Q is None:
        target_values_on_Q = Qhat.labels
    if target_values_on_Q is None:
        raise ValueError("target values on the ensemble are required")
    if Qhat.dim != U.shape[1]:
        raise DimensionMismatch("ensemble and training points differ in dimension")
    rhs = np.zeros(N)
    for w, atom, y in zip(Qhat.weights, Qhat.atoms, target_values_on_Q):
        V = atom.points
        resid = np.asarray(y, dtype=float) - predict(model, V)
        rhs += (w / V.shape[0]) * (kernel_matrix(U, V, model.lengthscale) @ resid)
    rhs *= N
    factor = model._factor
    reuse = (
        factor is not None
        and nugget == model.nugget
        and model.centers.shape == U.shape
        and np.array_equal(model.centers, U)
    )
    if not reuse:
        factor = _regularized_factor(U, model.lengthscale, nugget)
    return cho_solve(factor, rhs)


def lipschitz_estimate(evaluator, pairs) -> float:
    """Largest ``|f(x) - f(y)| / |x - y|`` over the supplied pairs.

    ``evaluator`` maps an (n, d) array to n outputs (scalars or vectors);
    ``pairs`` is an array-like of shape (P, 2, d). The result is a lower bound
    on the Lipschitz constant.
    """
    pairs = np.asarray(pairs, dtype=float)
    if pairs.ndim == 2:
        pairs = pairs[:, :, None]
    if pairs.shape[0] == 0:
        raise ValueError("pairs must be nonempty")
    X, Y = pairs[:, 0, :], pairs[:, 1, :]
    dx = np.linalg.norm(X - Y, axis=1)
    if np.any(dx == 0.0):
        raise DegeneratePair("pair with identical inputs")
    fx = np.asarray(evaluator(X), dtype=float).reshape(X.shape[0], -1)
    fy = np.asarray(evaluator(Y), dtype=float).reshape(Y.shape[0], -1)
    return float(np.max(np.linalg.norm(fx - fy, axis=1) / dx))
