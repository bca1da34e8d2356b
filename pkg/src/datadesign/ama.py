"""Alternating model fitting and training-distribution updates on a Wasserstein bound.

The objective of a training distribution ``nu`` given a fitted model ``G`` is

    E_{u ~ nu} (target(u) - G(u))^2  +  sqrt(E_Q c^2) * sqrt(E_Q W2^2(nu, nu'))

where the distribution-shift factor ``c`` depends on Lipschitz constants,
values at the origin and second moments of ``nu`` and of each test atom.
Expanding ``E_Q c^2`` gives ``weight * sqrt(shift + m2(nu))`` for the prefactor,
which is how the bound is carried around here (:class:`BoundCoefficients`).
The Gaussian update differentiates this in (mean, Cholesky factor); the
particle update moves points along its Wasserstein gradient.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DimensionMismatch, NonFiniteValue, UnsupportedConfiguration
from .kernel import fit_krr, lipschitz_estimate, predict, predict_gradient
from .measures import (
    EmpiricalMeasure,
    GaussianMeasure,
    MetaTestEnsemble,
    make_rng,
    project_cholesky,
    score_cholesky,
    score_mean,
    second_moment,
)
from .trace import IterationRecord, OptimizationTrace, gaussian_params, param_names
from .transport import (
    gaussian_barycenter,
    gaussian_ot_linear,
    w2_empirical,
    w2_gaussian_squared,
)

EPS = 1e-12
LIP_SQ_FLOOR = 1e-200


# --- bound constants ----------------------------------------------------------------


@dataclass(frozen=True)
class BoundFactors:
    """Inputs of the distribution-shift factor ``c``.

    ``lip_model_cap`` (R) stands in for the Lipschitz constant of the fitted model.
    """

    lip_target: float = 0.0
    lip_model_cap: float = 0.0
    offset_target: float = 0.0
    offset_model: float = 0.0
    moment_train: float = 0.0
    moment_test: float = 0.0

    def __post_init__(self):
        for name in ("lip_target", "lip_model_cap", "offset_target", "offset_model",
                     "moment_train", "moment_test"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def lip_sum(self) -> float:
        return self.lip_target + self.lip_model_cap


def c_factor(b: BoundFactors) -> float:
    """``L sqrt(4 L^2 (m2 + m2') + 16 (o*^2 + o^2))`` with ``L = Lip(target) + R``."""
    L = b.lip_sum
    return float(L * math.sqrt(4.0 * L**2 * (b.moment_train + b.moment_test)
                               + 16.0 * (b.offset_target**2 + b.offset_model**2)))


@dataclass(frozen=True)
class BoundCoefficients:
    """``sqrt(E_Q c^2) = weight * sqrt(shift + m2(nu))``."""

    weight: float
    shift: float

    @classmethod
    def surrogate(cls) -> "BoundCoefficients":
        """Unit constants: ``sqrt(1 + m2(nu))``."""
        return cls(1.0, 1.0)

    @classmethod
    def from_factors(cls, b: BoundFactors, atom_moments: Sequence[float],
                     atom_weights: Sequence[float] | None = None) -> "BoundCoefficients":
        """Average ``c^2`` over atoms with second moments ``atom_moments``.

        ``E c^2 = 4 L^4 (m2 + E m2') + 16 L^2 (o*^2 + o^2)``, so the weight is
        ``2 L^2`` and the shift ``E m2' + 4 (o*^2 + o^2) / L^2``.
        """
        m = np.asarray(atom_moments, dtype=float)
        w = np.full(m.size, 1.0 / m.size) if atom_weights is None else np.asarray(atom_weights, float)
        L = b.lip_sum
        # below this the prefactor is under 1e-90 and the shift would overflow
        if L**2 < LIP_SQ_FLOOR:
            return cls(0.0, 0.0)
        return cls(2.0 * L**2, float(w @ m) + 4.0 * (b.offset_target**2 + b.offset_model**2) / L**2)

    def prefactor(self, m2: float) -> float:
        return self.weight * math.sqrt(self.shift + m2)


# --- objective ----------------------------------------------------------------------


class ObjectiveParts(NamedTuple):
    misfit: float
    misfit_se: float
    w2_squared: float
    prefactor: float
    moment: float

    @property
    def total(self) -> float:
        return self.misfit + self.prefactor * math.sqrt(self.w2_squared)


def misfit_values(model, target, U) -> np.ndarray:
    """``(target(u) - model(u))^2`` row-wise."""
    return (np.asarray(target(U), dtype=float) - predict(model, U)) ** 2


def _atom_moment(atom) -> float:
    return second_moment(atom)


def _atom_points(atom, n, rng):
    if isinstance(atom, GaussianMeasure):
        return atom.sample(n, rng)
    if atom.size == n:
        return atom.points
    idx = rng.choice(atom.size, size=n, replace=atom.size < n)
    return atom.points[idx]


def expected_w2_squared(nu, Qhat: MetaTestEnsemble, n_samples: int = 500, rng=None) -> float:
    """``sum_k w_k W2^2(nu, atom_k)``.

    Closed form when ``nu`` and the atom are Gaussian; otherwise an exact
    assignment between equal-size samples (all particles of an empirical ``nu``,
    ``n_samples`` draws of a Gaussian one).
    """
    if nu.dim != Qhat.dim:
        raise DimensionMismatch("training distribution and ensemble differ in dimension")
    rng = make_rng(0 if rng is None else rng)
    total = 0.0
    X = None
    for w, atom in zip(Qhat.weights, Qhat.atoms):
        if isinstance(nu, GaussianMeasure) and isinstance(atom, GaussianMeasure):
            total += w * w2_gaussian_squared(nu, atom)
            continue
        if isinstance(nu, GaussianMeasure):
            if X is None:
                X = nu.sample(n_samples, rng)
        else:
            X = nu.points
        Y = _atom_points(atom, X.shape[0], rng)
        total += w * w2_empirical(EmpiricalMeasure(X), EmpiricalMeasure(Y)) ** 2
    return float(total)


def bound_coefficients(b: BoundFactors | BoundCoefficients | None, Qhat: MetaTestEnsemble) -> BoundCoefficients:
    if b is None:
        return BoundCoefficients.surrogate()
    if isinstance(b, BoundCoefficients):
        return b
    return BoundCoefficients.from_factors(b, [_atom_moment(a) for a in Qhat.atoms], Qhat.weights)


def ama_objective_parts(nu, model, target, Qhat: MetaTestEnsemble, b, rng=None,
                        samples_for_misfit: int = 1000, w2_mc_samples: int = 500,
                        misfit_points=None) -> ObjectiveParts:
    """Misfit, its standard error and the W2 term of the bound objective.

    ``misfit_points`` overrides the Monte Carlo draw for a Gaussian ``nu``
    (used for common random numbers across candidates).
    """
    rng = make_rng(0 if rng is None else rng)
    if misfit_points is not None:
        U = misfit_points
    elif isinstance(nu, GaussianMeasure):
        U = nu.sample(samples_for_misfit, rng)
    else:
        U = nu.points
    f = misfit_values(model, target, U)
    se = float(f.std(ddof=1) / math.sqrt(f.size)) if f.size > 1 else 0.0
    m2 = second_moment(nu)
    coef = bound_coefficients(b, Qhat)
    w2sq = expected_w2_squared(nu, Qhat, w2_mc_samples, rng) if coef.weight > 0 else 0.0
    return ObjectiveParts(float(f.mean()), se, w2sq, coef.prefactor(m2), m2)


def ama_objective(nu, model, target, Qhat: MetaTestEnsemble, b, rng=None, **kwargs) -> float:
    """Bound objective ``E f + sqrt(E c^2) sqrt(E W2^2)`` for training distribution ``nu``."""
    return ama_objective_parts(nu, model, target, Qhat, b, rng, **kwargs).total


# --- gradients ----------------------------------------------------------------------


def _ratios(w2sq, shift, m2):
    a = math.sqrt((w2sq + EPS) / (shift + m2))
    return a, 1.0 / a


class GaussianGradient(NamedTuple):
    mean: np.ndarray
    cov_factor: np.ndarray

    @property
    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.mean**2) + np.sum(self.cov_factor**2)))


def misfit_score_gradient(nu: GaussianMeasure, model, target, n_samples: int, rng) -> GaussianGradient:
    """Score-function estimate of the gradient of ``E_nu f``.

    Antithetic pairs ``m +- L z`` and the sample mean of ``f`` as a baseline.
    """
    half = max(n_samples // 2, 1)
    z = rng.standard_normal((half, nu.dim))
    U = np.concatenate([nu.mean + z @ nu.cov_factor.T, nu.mean - z @ nu.cov_factor.T])
    f = misfit_values(model, target, U)
    f = f - f.mean()
    g_m = f @ score_mean(nu, U) / U.shape[0]
    g_L = np.tensordot(f, score_cholesky(nu, U), axes=1) / U.shape[0]
    return GaussianGradient(g_m, np.tril(g_L))


def w2_term_gradient(nu: GaussianMeasure, Qhat: MetaTestEnsemble, coef: BoundCoefficients) -> GaussianGradient:
    """Gradient of ``weight sqrt(shift + m2) sqrt(E W2^2)`` over Gaussian atoms.

    The first variation ``w (a |u|^2 / 2 + b sum_k w_k phi_k(u))`` is quadratic in
    ``u``, so integrating it against the score is done exactly:
    ``grad_m = B m + c`` and ``grad_L = tril(B L)`` for the quadratic form
    ``u^T B u / 2 + c^T u``.
    """
    if not Qhat.is_gaussian:
        raise UnsupportedConfiguration("closed-form W2 gradient requires Gaussian atoms")
    d = nu.dim
    if coef.weight == 0.0:
        return GaussianGradient(np.zeros(d), np.zeros((d, d)))
    w2sq = sum(w * w2_gaussian_squared(nu, a) for w, a in zip(Qhat.weights, Qhat.atoms))
    a, b = _ratios(w2sq, coef.shift, second_moment(nu))
    A_bar = sum(w * gaussian_ot_linear(nu, at) for w, at in zip(Qhat.weights, Qhat.atoms))
    m_bar = sum(w * at.mean for w, at in zip(Qhat.weights, Qhat.atoms))
    B = coef.weight * (a * np.eye(d) + b * (np.eye(d) - A_bar))
    c = -coef.weight * b * (m_bar - A_bar @ nu.mean)
    return GaussianGradient(B @ nu.mean + c, np.tril(B @ nu.cov_factor))


def gaussian_param_update(nu: GaussianMeasure, model, target, Qhat: MetaTestEnsemble, b, rng,
                          n_samples: int = 1000, mean_only: bool = False) -> GaussianGradient:
    """Gradient of the bound objective in (mean, Cholesky factor).

    The misfit part is a Monte Carlo score-function estimate; the W2 part is
    integrated exactly. With ``mean_only`` the Cholesky block is zeroed.
    """
    if not Qhat.is_gaussian:
        raise UnsupportedConfiguration(
            "gaussian_param_update needs Gaussian atoms; use the particle update for samples"
        )
    rng = make_rng(rng)
    coef = bound_coefficients(b, Qhat)
    g_f = misfit_score_gradient(nu, model, target, n_samples, rng)
    g_w = w2_term_gradient(nu, Qhat, coef)
    g_L = g_f.cov_factor + g_w.cov_factor
    if mean_only:
        g_L = np.zeros_like(g_L)
    return GaussianGradient(g_f.mean + g_w.mean, g_L)


def target_gradient(target, U, step: float = 1e-4) -> np.ndarray:
    """``target.gradient`` when available, else central differences with step ``h (1 + |u|)``."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    grad = getattr(target, "gradient", None)
    if callable(grad):
        g = grad(U)
        if g is not None:
            return np.asarray(g, dtype=float).reshape(U.shape)
    h = step * (1.0 + np.linalg.norm(U, axis=1))
    out = np.empty_like(U)
    for i in range(U.shape[1]):
        E = np.zeros_like(U)
        E[:, i] = h
        out[:, i] = (np.asarray(target(U + E), float) - np.asarray(target(U - E), float)) / (2.0 * h)
    return out


def wasserstein_gradient(particles: EmpiricalMeasure, model, target, Qhat: MetaTestEnsemble,
                         b) -> np.ndarray:
    """Wasserstein gradient of the bound objective at each particle, shape (N, d).

    ``grad f + w (a u + b (u - E_Q T(u)))`` where ``T`` is the optimal
    assignment onto each atom and ``a = sqrt((E W2^2 + eps) / (shift + m2))``,
    ``b = 1 / a``.
    """
    U = particles.points
    n = U.shape[0]
    for atom in Qhat.atoms:
        if not isinstance(atom, EmpiricalMeasure) or atom.size != n:
            raise UnsupportedConfiguration("every atom must hold as many points as there are particles")
    resid = predict(model, U) - np.asarray(target(U), float)
    grad = 2.0 * resid[:, None] * (predict_gradient(model, U).reshape(U.shape) - target_gradient(target, U))
    coef = bound_coefficients(b, Qhat)
    if coef.weight == 0.0:
        return grad
    w2sq = 0.0
    TU = np.zeros_like(U)
    for w, atom in zip(Qhat.weights, Qhat.atoms):
        dist, perm = w2_empirical(particles, atom, return_assignment=True)
        w2sq += w * dist**2
        TU += w * atom.points[perm]
    a, bb = _ratios(w2sq, coef.shift, second_moment(particles))
    return grad + coef.weight * (a * U + bb * (U - TU))


def particle_update(particles: EmpiricalMeasure, model, target, Qhat: MetaTestEnsemble, b,
                    eta: float) -> EmpiricalMeasure:
    """One explicit step ``u <- u - eta * grad`` of the discretized Wasserstein gradient flow."""
    if eta == 0:
        return EmpiricalMeasure(particles.points.copy())
    g = wasserstein_gradient(particles, model, target, Qhat, b)
    return EmpiricalMeasure(particles.points - eta * g)


# --- Lipschitz constants ------------------------------------------------------------


def estimate_R(model_family_probe: Sequence, pairs) -> float:
    """Largest pairwise slope over all probe models (a lower bound on their Lipschitz cap)."""
    if len(model_family_probe) == 0:
        raise ValueError("need at least one probe model")
    return max(lipschitz_estimate(lambda X, m=m: predict(m, X), pairs) for m in model_family_probe)


def _gaussian_geodesic(a: GaussianMeasure, b: GaussianMeasure, t: float) -> GaussianMeasure:
    """Point at time t on the W2 geodesic from a to b."""
    A = gaussian_ot_linear(a, b)
    M = (1.0 - t) * np.eye(a.dim) + t * A
    return GaussianMeasure.from_covariance((1.0 - t) * a.mean + t * b.mean, M @ a.cov @ M)


def probe_distributions(nu0, Qhat: MetaTestEnsemble, count: int = 11) -> list[GaussianMeasure]:
    """``count`` Gaussians on the geodesic from ``nu0`` to the barycenter of the (fitted) atoms."""
    from .benchmarks import fitted_gaussians

    start = nu0 if isinstance(nu0, GaussianMeasure) else fitted_gaussians(
        MetaTestEnsemble([nu0]))[0]
    comps = fitted_gaussians(Qhat)
    end = comps[0] if len(comps) == 1 else gaussian_barycenter(MetaTestEnsemble(comps, Qhat.weights))
    return [_gaussian_geodesic(start, end, t) for t in np.linspace(0.0, 1.0, count)]


def estimate_lipschitz_constants(target, nu0, Qhat: MetaTestEnsemble, lengthscale: float,
                                 n_fit: int, nugget: float, rng, count: int = 11,
                                 n_pairs: int = 250) -> tuple[float, float]:
    """(Lip(target), R) from models fit on probe distributions and ``n_pairs`` pairs each."""
    rng = make_rng(rng)
    models, pairs = [], []
    for g in probe_distributions(nu0, Qhat, count):
        X = g.sample(n_fit, rng)
        models.append(fit_krr(X, np.asarray(target(X), float), lengthscale, nugget))
        P = np.stack([g.sample(n_pairs, rng), g.sample(n_pairs, rng)], axis=1)
        pairs.append(P[np.linalg.norm(P[:, 0] - P[:, 1], axis=1) > 0])
    pairs = np.concatenate(pairs)
    return lipschitz_estimate(target, pairs), estimate_R(models, pairs)


# --- alternating loop ---------------------------------------------------------------


@dataclass
class AmaConfig:
    """Settings for :func:`ama_loop`.

    ``R`` and ``lip_target`` default to probe estimates; ``bound="surrogate"``
    uses unit constants instead of the full distribution-shift factor.
    ``step_size`` defaults to 1e-2 for Gaussians and 1e-6 for particles.
    ``nugget`` is sigma^2 for the model fit and defaults to ``1e-3 / fit_samples``.
    """

    R: float | None = None
    lip_target: float | None = None
    outer_iterations: int = 50
    samples_for_misfit: int = 1000
    w2_mc_samples: int = 500
    step_size: float | None = None
    step_halving: bool = True
    tol_step: float = 1e-6
    seed: int = 0
    fit_samples: int = 250
    lengthscale: float = 1.0
    nugget: float | None = None
    bound: str = "full"
    max_halvings: int = 40
    probe_count: int = 11
    probe_pairs: int = 250
    record_wall_time: bool = False

    def __post_init__(self):
        if self.R is not None and self.R < 0:
            raise ValueError("R must be nonnegative")
        for name in ("outer_iterations", "samples_for_misfit", "w2_mc_samples", "fit_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.bound not in ("full", "surrogate"):
            raise ValueError("bound must be 'full' or 'surrogate'")
        if self.nugget is None:
            self.nugget = 1e-3 / self.fit_samples


@dataclass(frozen=True)
class GaussianFamily:
    mean_only: bool = False
    default_step: float = 1e-2


@dataclass(frozen=True)
class ParticleFamily:
    default_step: float = 1e-6


class _Evaluator:
    """Objective with frozen random numbers so candidate distributions are compared fairly."""

    def __init__(self, config, family, target, Qhat, d, rng):
        self.config, self.family, self.target, self.Qhat = config, family, target, Qhat
        self.z = rng.standard_normal((config.samples_for_misfit, d))
        self.w2_rng_state = rng.integers(0, 2**63)

    def misfit_points(self, nu):
        if isinstance(nu, GaussianMeasure):
            return nu.mean + self.z @ nu.cov_factor.T
        return nu.points

    def __call__(self, nu, model, b) -> ObjectiveParts:
        return ama_objective_parts(
            nu, model, self.target, self.Qhat, b, make_rng(int(self.w2_rng_state)),
            w2_mc_samples=self.config.w2_mc_samples, misfit_points=self.misfit_points(nu),
        )


def _fit(nu, target, config, rng):
    X = nu.sample(config.fit_samples, rng) if isinstance(nu, GaussianMeasure) else nu.points
    return fit_krr(X, np.asarray(target(X), float), config.lengthscale, config.nugget)


def _model_offset(model) -> float:
    return float(abs(predict(model, np.zeros((1, model.dim)))[0]))


def _coefficients(config, factors, model, target, Qhat):
    if config.bound == "surrogate":
        return BoundCoefficients.surrogate()
    b = replace(factors, offset_model=_model_offset(model))
    return bound_coefficients(b, Qhat)


def _params(nu):
    if isinstance(nu, GaussianMeasure):
        return gaussian_params(nu)
    return nu.points.mean(axis=0)


def _step(nu, family, model, target, Qhat_grad, coef, eta, config, rng):
    """Candidate after a step of size ``eta`` and the parameter displacement norm."""
    if isinstance(family, ParticleFamily):
        new = particle_update(nu, model, target, Qhat_grad, coef, eta)
        return new, float(np.linalg.norm(new.points - nu.points))
    g = gaussian_param_update(nu, model, target, Qhat_grad, coef, rng,
                              n_samples=config.samples_for_misfit, mean_only=family.mean_only)
    new = GaussianMeasure(nu.mean - eta * g.mean, project_cholesky(np.tril(nu.cov_factor - eta * g.cov_factor)))
    return new, float(np.sqrt(np.sum((new.mean - nu.mean) ** 2) + np.sum((new.cov_factor - nu.cov_factor) ** 2)))


def ama_loop(config: AmaConfig, family, target, Qhat: MetaTestEnsemble, nu0,
             Qhat_seen: MetaTestEnsemble | None = None,
             Qhat_unseen: MetaTestEnsemble | None = None) -> OptimizationTrace:
    """Alternate model fits and distribution updates on the bound objective.

    Row 0 holds the initial distribution with its first model. Each later row
    is one outer iteration: refit the model (kept only if it does not raise the
    objective), then one distribution step. A step that raises the objective is
    retried with half the step size, and the smaller step carries over. The
    loop stops at the iteration budget, when the accepted displacement falls
    below ``tol_step`` or when the objective reaches 0.

    For a Gaussian family with sampled atoms, the gradient uses Gaussians fitted
    to the atoms while the objective keeps the sampled W2.
    """
    from .benchmarks import err_metric, fitted_gaussians

    rng = make_rng(config.seed)
    fit_rng, grad_rng, eval_rng, probe_rng = rng.spawn(4)
    gaussian = isinstance(family, GaussianFamily)
    if gaussian and not isinstance(nu0, GaussianMeasure):
        raise UnsupportedConfiguration("Gaussian family needs a Gaussian initial distribution")
    if not gaussian and not isinstance(nu0, EmpiricalMeasure):
        raise UnsupportedConfiguration("particle family needs an empirical initial distribution")
    if nu0.dim != Qhat.dim:
        raise DimensionMismatch("initial distribution and ensemble differ in dimension")
    Qhat_grad = Qhat
    if gaussian and not Qhat.is_gaussian:
        Qhat_grad = MetaTestEnsemble(fitted_gaussians(Qhat), Qhat.weights)

    factors = None
    if config.bound == "full":
        lip, R = config.lip_target, config.R
        if lip is None or R is None:
            est_lip, est_R = estimate_lipschitz_constants(
                target, nu0, Qhat, config.lengthscale, config.fit_samples, config.nugget,
                probe_rng, config.probe_count, config.probe_pairs)
            lip = est_lip if lip is None else lip
            R = est_R if R is None else R
        factors = BoundFactors(lip_target=lip, lip_model_cap=R,
                               offset_target=float(abs(np.asarray(target(np.zeros((1, nu0.dim))), float)[0])))

    evaluate = _Evaluator(config, family, target, Qhat, nu0.dim, eval_rng)
    eta = config.step_size if config.step_size is not None else family.default_step
    d = nu0.dim
    columns = param_names(d) if gaussian else [f"m{i}" for i in range(d)]
    trace = OptimizationTrace(param_columns=columns, meta={"seed": config.seed})
    if factors is not None:
        trace.meta.update(lip_target=factors.lip_target, R=factors.lip_model_cap)

    def record(k, nu, model, parts, gnorm, t0, **extra):
        rec = IterationRecord(
            iter=k, objective=parts.total,
            err_seen=err_metric(model, Qhat_seen) if Qhat_seen is not None else float("nan"),
            err_unseen=err_metric(model, Qhat_unseen) if Qhat_unseen is not None else float("nan"),
            grad_norm=gnorm, params=_params(nu),
            extra={"misfit": parts.misfit, "misfit_se": parts.misfit_se,
                   "w2_squared": parts.w2_squared, "step_size": eta, **extra},
        )
        if config.record_wall_time:
            rec.wall_ms = 1e3 * (time.perf_counter() - t0)
        if not math.isfinite(parts.total):
            trace.append(rec)
            raise NonFiniteValue(f"non-finite objective at iteration {k}", rec)
        trace.append(rec)
        return rec

    t0 = time.perf_counter()
    nu = nu0
    model = _fit(nu, target, config, fit_rng)
    coef = _coefficients(config, factors, model, target, Qhat)
    parts = evaluate(nu, model, coef)
    record(0, nu, model, parts, float("nan"), t0)

    for k in range(1, config.outer_iterations + 1):
        if parts.total == 0.0:
            break
        t0 = time.perf_counter()
        # model half-step
        cand_model = _fit(nu, target, config, fit_rng)
        cand_coef = _coefficients(config, factors, cand_model, target, Qhat)
        cand_parts = evaluate(nu, cand_model, cand_coef)
        refit_kept = cand_parts.total <= parts.total
        if refit_kept:
            model, coef, parts = cand_model, cand_coef, cand_parts
        after_fit = parts.total
        # distribution half-step
        accepted, disp = False, 0.0
        for _ in range(config.max_halvings + 1):
            cand, disp = _step(nu, family, model, target, Qhat_grad, coef, eta, config, grad_rng)
            cand_parts = evaluate(cand, model, coef)
            if cand_parts.total <= parts.total:
                accepted = True
                break
            if not config.step_halving:
                break
            eta *= 0.5
        if accepted:
            nu, parts = cand, cand_parts
        else:
            disp = 0.0
        record(k, nu, model, parts, disp / eta if eta > 0 else float("nan"), t0,
               objective_after_fit=after_fit, refit_kept=refit_kept, accepted=accepted,
               displacement=disp)
        if disp < config.tol_step:
            break

    trace.final = nu
    trace.summary = {"model": model, "step_size": eta}
    return trace
