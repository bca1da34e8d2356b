"""Function-approximation test bed: targets, test ensembles, the Err metric and baselines."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DegenerateTarget, DimensionMismatch, ExhaustedPool, UnsupportedConfiguration
from .kernel import fit_krr, kernel_matrix
from .measures import (
    EmpiricalMeasure,
    GaussianMeasure,
    MetaTestEnsemble,
    make_rng,
    sample_wishart,
)
from .transport import gaussian_barycenter

TARGET_IDS = ("g1", "g2", "g3", "g4")
# |x|^2, a smooth toy target for algorithm checks
TOY_IDS = ("quadratic",)
MIN_DIM = {"g1": 1, "g2": 5, "g3": 4, "g4": 1, "quadratic": 1}
LENGTHSCALES = {"g1": 1.0, "g2": 3.0, "g3": 2.0 / 1.1, "g4": 5.0, "quadratic": 1.0}
G3_DENOM_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class TargetFunction:
    """One of the benchmark maps ``R^d -> R``; called on (n, d) arrays.

    ``g4`` is a fixed random kernel expansion; its coefficients and centers
    are drawn once by :func:`make_target`.
    """

    identifier: str
    dim: int
    coefficients: np.ndarray = None
    centers: np.ndarray = None
    kernel_lengthscale: float = 5.0

    def __post_init__(self):
        if self.identifier not in _TARGETS:
            raise UnsupportedConfiguration(f"unknown target id {self.identifier!r}")
        if self.dim < MIN_DIM[self.identifier]:
            raise DimensionMismatch(
                f"{self.identifier} needs d >= {MIN_DIM[self.identifier]}, got {self.dim}"
            )
        if self.identifier == "g4" and (self.coefficients is None or self.centers is None):
            raise ValueError("g4 needs coefficients and centers; use make_target")

    @property
    def default_lengthscale(self) -> float:
        return LENGTHSCALES[self.identifier]

    @property
    def default_initial_mean(self) -> np.ndarray:
        if self.identifier in ("g1", "quadratic"):
            return np.zeros(self.dim)
        return np.full(self.dim, 0.5)

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.dim:
            raise DimensionMismatch(f"expected points of dimension {self.dim}, got {X.shape[1]}")
        out = _TARGETS[self.identifier](self, X)
        return float(out[0]) if single else out

    def gradient(self, X):
        """Analytic gradient, shape (n, d); None when the target has no closed form one."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.identifier == "quadratic":
            return 2.0 * X
        if self.identifier == "g4":
            K = kernel_matrix(X, self.centers, self.kernel_lengthscale) * self.coefficients
            return -2.0 / self.kernel_lengthscale**2 * (K.sum(axis=1)[:, None] * X - K @ self.centers)
        return None


def _g1(t, X):
    j = np.arange(1, X.shape[1] + 1)
    a = (j - 2) / 2.0
    return np.prod((np.abs(4.0 * X - 2.0) + a) / (1.0 + a), axis=1)


def _g2(t, X):
    x1, x2, x3, x4, x5 = X[:, :5].T
    return 10 * np.sin(np.pi * x1 * x2) + 20 * (x3 - 0.5) ** 2 + 10 * x4 + 5 * x5


def _g3(t, X):
    x1, x2, x3, x4 = X[:, :4].T
    freq = 520 * np.pi * x2 + 40 * np.pi
    denom = freq * (10 * x4 + 1)
    denom = np.where(np.abs(denom) < G3_DENOM_FLOOR,
                     np.where(denom < 0, -G3_DENOM_FLOOR, G3_DENOM_FLOOR), denom)
    return np.sqrt((100 * x1) ** 2 + (x3 * freq - 1.0 / denom) ** 2)


def _g4(t, X):
    return kernel_matrix(X, t.centers, t.kernel_lengthscale) @ t.coefficients


def _quadratic(t, X):
    return np.sum(X * X, axis=1)


_TARGETS = {"g1": _g1, "g2": _g2, "g3": _g3, "g4": _g4, "quadratic": _quadratic}


def make_target(identifier: str, d: int, rng=None, n_terms: int = 1000) -> TargetFunction:
    """Build a benchmark target; ``g4`` draws ``c_l ~ U[-1,1]``, ``x_l ~ U[-4,4]^d``."""
    if identifier != "g4":
        return TargetFunction(identifier, d)
    rng = make_rng(0 if rng is None else rng)
    c = rng.uniform(-1.0, 1.0, size=n_terms)
    x = rng.uniform(-4.0, 4.0, size=(n_terms, d))
    return TargetFunction("g4", d, coefficients=c, centers=x)


def eval_target(t: TargetFunction, x):
    return t(x)


class MetaEnsembleDraw(NamedTuple):
    gaussian: MetaTestEnsemble
    empirical: MetaTestEnsemble
    validation_index: np.ndarray
    test_index: np.ndarray

    def labeled(self, target) -> MetaTestEnsemble:
        return self.empirical.with_labels(target)

    def validation(self, target=None) -> MetaTestEnsemble:
        Q = self.empirical if target is None else self.labeled(target)
        return Q.subset([self.validation_index] * len(Q))

    def test(self, target=None) -> MetaTestEnsemble:
        Q = self.empirical if target is None else self.labeled(target)
        return Q.subset([self.test_index] * len(Q))


def validation_size(M: int) -> int:
    """500 of every 5000 samples per atom, scaled proportionally (at least 1)."""
    return max(1, min(M, int(round(M * 500 / 5000))))


def make_meta_ensemble(K: int, d: int, M: int, rng) -> MetaEnsembleDraw:
    """Draw K Gaussian test atoms (N(0, I) means, Wishart(I, d+1) covariances) and M samples each.

    The first ``validation_size(M)`` samples of each atom form the validation
    split; the rest are held out for testing.
    """
    if K < 1 or M < 1:
        raise ValueError("K and M must be >= 1")
    rng = make_rng(rng)
    gaussians, empiricals = [], []
    for _ in range(K):
        mean = rng.standard_normal(d)
        cov = sample_wishart(d, d + 1, rng)
        g = GaussianMeasure.from_covariance(mean, cov)
        gaussians.append(g)
        empiricals.append(EmpiricalMeasure(g.sample(M, rng)))
    n_val = validation_size(M)
    idx = np.arange(M)
    return MetaEnsembleDraw(
        MetaTestEnsemble(gaussians), MetaTestEnsemble(empiricals), idx[:n_val], idx[n_val:]
    )


def err_metric(model, Qhat_test: MetaTestEnsemble) -> float:
    """Root relative average OOD squared error of ``model`` on labeled test atoms."""
    if Qhat_test.labels is None:
        raise ValueError("test ensemble must carry labels")
    num = den = 0.0
    for w, atom, y in zip(Qhat_test.weights, Qhat_test.atoms, Qhat_test.labels):
        pred = np.asarray(model(atom.points), dtype=float)
        num += w * np.mean((y - pred) ** 2)
        den += w * np.mean(y**2)
    if den == 0.0:
        raise DegenerateTarget("target vanishes on every test point")
    return float(np.sqrt(num / den))


# --- baseline training distributions ---------------------------------------------------


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    components: tuple
    weights: np.ndarray

    def sample(self, n, rng):
        counts = rng.multinomial(n, self.weights)
        parts = [c.sample(k, rng) for c, k in zip(self.components, counts) if k > 0]
        X = np.concatenate(parts, axis=0)
        return X[rng.permutation(n)]


@dataclass(frozen=True)
class UniformBox:
    dim: int
    low: float = 0.0
    high: float = 1.0

    def sample(self, n, rng):
        return rng.uniform(self.low, self.high, size=(n, self.dim))


def fitted_gaussians(Q: MetaTestEnsemble) -> list[GaussianMeasure]:
    """Gaussian atoms as-is; empirical atoms replaced by their empirical mean/covariance fit."""
    out = []
    for a in Q.atoms:
        if isinstance(a, GaussianMeasure):
            out.append(a)
        else:
            cov = np.atleast_2d(np.cov(a.points, rowvar=False))
            out.append(GaussianMeasure.from_covariance(a.points.mean(axis=0), cov))
    return out


def baseline_distribution(kind: str, d: int = None, ensemble: MetaTestEnsemble = None,
                          initial_mean=None):
    """Sampler (object with ``sample(n, rng)``) for a nonadaptive baseline.

    ``kind`` is one of ``normal``, ``barycenter``, ``mixture``, ``uniform``.
    """
    kind = kind.lower()
    if d is None and ensemble is not None:
        d = ensemble.dim
    if kind == "normal":
        m0 = np.zeros(d) if initial_mean is None else np.asarray(initial_mean, float)
        return GaussianMeasure(m0, np.eye(m0.size))
    if kind == "uniform":
        return UniformBox(d)
    if ensemble is None:
        raise UnsupportedConfiguration(f"{kind} baseline needs the test ensemble")
    comps = fitted_gaussians(ensemble)
    if kind == "barycenter":
        if len(comps) == 1:
            return comps[0]
        return gaussian_barycenter(MetaTestEnsemble(comps, ensemble.weights))
    if kind == "mixture":
        return GaussianMixture(tuple(comps), ensemble.weights)
    raise UnsupportedConfiguration(f"unknown baseline {kind!r}")


# --- greedy coresets -----------------------------------------------------------------


def rkhs_distance(A, B, lengthscale: float) -> np.ndarray:
    """``|k(., a) - k(., b)|_H = sqrt(2 (1 - k(a, b)))`` for the squared-exponential kernel."""
    return np.sqrt(np.clip(2.0 * (1.0 - kernel_matrix(A, B, lengthscale)), 0.0, None))


def _distance_fn(metric, lengthscale):
    if callable(metric):
        return metric
    if metric == "euclidean":
        return lambda A, B: cdist(A, B)
    if metric == "rkhs":
        return lambda A, B: rkhs_distance(A, B, lengthscale)
    raise UnsupportedConfiguration(f"unknown metric {metric!r}")


def coreset_select(pool, k: int, init, metric="euclidean", lengthscale: float = 1.0) -> np.ndarray:
    """Greedy k-center (maxmin) selection until ``k`` indices are chosen.

    ``init`` indices are always kept and listed first. Each step adds the pool
    point farthest from the current selection; ties go to the lowest index.
    """
    pool = np.asarray(pool, dtype=float)
    if pool.ndim == 1:
        pool = pool[:, None]
    n = pool.shape[0]
    init = [int(i) for i in init]
    if not init:
        raise ValueError("init must be nonempty")
    if k > n:
        raise ExhaustedPool(f"cannot select {k} points from a pool of {n}")
    dist = _distance_fn(metric, lengthscale)
    selected = list(dict.fromkeys(init))
    mind = dist(pool, pool[selected]).min(axis=1)
    mind[selected] = -np.inf
    while len(selected) < k:
        i = int(np.argmax(mind))
        selected.append(i)
        mind = np.minimum(mind, dist(pool, pool[i:i + 1])[:, 0])
        mind[selected] = -np.inf
    return np.array(selected, dtype=int)


def ncoreset_indices(pool, n: int, lengthscale: float, rng, initial: int = 1) -> np.ndarray:
    """Nonadaptive coreset on kernel sections with RKHS distance."""
    init = rng.choice(len(pool), size=initial, replace=False)
    return coreset_select(pool, n, init, metric="rkhs", lengthscale=lengthscale)


SKETCH_THRESHOLD = 256
SKETCH_DIM = 32


def gaussian_sketch(features, dim: int, rng) -> np.ndarray:
    """Project rows onto ``dim`` Gaussian directions and normalize them to unit length."""
    G = rng.standard_normal((dim, features.shape[1]))
    S = features @ G.T / np.sqrt(dim)
    norms = np.linalg.norm(S, axis=1, keepdims=True)
    return S / np.where(norms > 0, norms, 1.0)


def acoreset_indices(pool, labels, n: int, lengthscale: float, nugget_fn, rng,
                     initial: int = 6, batch: int = 10) -> np.ndarray:
    """Adaptive coreset; features of pool point v are ``(c_j k(u_j, v))_j``.

    The kernel model is refit on the current selection before every batch.
    ``nugget_fn(N)`` gives the ridge strength for N training points.
    """
    pool = np.asarray(pool, dtype=float)
    selected = list(rng.choice(len(pool), size=min(initial, n), replace=False))
    while len(selected) < n:
        idx = np.array(selected)
        model = fit_krr(pool[idx], labels[idx], lengthscale, nugget_fn(len(idx)))
        feats = kernel_matrix(pool, pool[idx], lengthscale) * model.coefficients
        if feats.shape[1] > SKETCH_THRESHOLD:
            feats = gaussian_sketch(feats, SKETCH_DIM, rng)
        k = min(len(selected) + batch, n)
        selected = list(coreset_select(feats, k, selected, metric="euclidean"))
    return np.array(selected, dtype=int)
