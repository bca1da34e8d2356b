"""Gradient descent on the bilevel OOD objective over Gaussian training distributions.

Each iteration samples and labels fresh training points from the current
Gaussian, fits kernel ridge regression, solves the adjoint system against the
validation part of the test ensemble and moves the mean and Cholesky factor
along the score-function gradient estimate.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .benchmarks import err_metric
from .errors import DegenerateTarget, NonFiniteValue
from .kernel import KernelModel, fit_krr, predict, solve_adjoint
from .measures import GaussianMeasure, MetaTestEnsemble, make_rng, project_cholesky, score_cholesky, score_mean
from .trace import IterationRecord, OptimizationTrace, gaussian_params, param_names


@dataclass(frozen=True)
class CosineSchedule:
    """``final + (initial - final) (1 + cos(pi k / horizon)) / 2``, held at ``final`` after ``horizon``."""

    initial: float
    final: float
    horizon: int

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    def __call__(self, k: int) -> float:
        k = min(max(k, 0), self.horizon)
        return self.final + 0.5 * (self.initial - self.final) * (1.0 + math.cos(math.pi * k / self.horizon))


@dataclass
class BilevelConfig:
    """Settings for :func:`run_bilevel`.

    ``nugget_schedule`` yields the nugget sigma^2 (the ridge term in the kernel
    system is ``N sigma^2``); with ``schedule_gives_sigma`` its values are
    squared first. ``eval_every`` controls how often the (more expensive)
    held-out Err is evaluated.
    """

    iterations: int = 1000
    lr_schedule: CosineSchedule = None
    nugget_schedule: CosineSchedule = None
    samples_per_step: int = 250
    lengthscale: float = 1.0
    seed: int = 0
    gradient_normalization: bool = False
    eval_every: int = 1
    record_wall_time: bool = False
    schedule_gives_sigma: bool = False

    def nugget(self, k: int) -> float:
        v = self.nugget_schedule(k)
        return v * v if self.schedule_gives_sigma else v

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.samples_per_step < 2:
            raise ValueError("samples_per_step must be >= 2")
        horizon = max(self.iterations, 1)
        if self.lr_schedule is None:
            self.lr_schedule = CosineSchedule(1e-2, 0.0, horizon)
        if self.nugget_schedule is None:
            self.nugget_schedule = CosineSchedule(1e-3, 1e-7, horizon)


def project_psd(L) -> np.ndarray:
    """Lower-triangular factor with every diagonal entry raised to at least 1e-7."""
    return project_cholesky(np.tril(L))


class BilevelGradient(NamedTuple):
    mean: np.ndarray
    cov_factor: np.ndarray
    model: KernelModel
    objective: float
    train_points: np.ndarray
    residual: np.ndarray
    adjoint: np.ndarray

    @property
    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.mean**2) + np.sum(self.cov_factor**2)))


def validation_objective(model, Q: MetaTestEnsemble) -> float:
    """``1/2 sum_j w_j mean_m (y - model(v))^2`` over labeled atoms."""
    return 0.5 * sum(
        w * np.mean((y - predict(model, a.points)) ** 2)
        for w, a, y in zip(Q.weights, Q.atoms, Q.labels)
    )


def bilevel_gradient(theta: GaussianMeasure, target, Qhat_validation: MetaTestEnsemble, N: int,
                     nugget: float, lengthscale: float, rng) -> BilevelGradient:
    """Approximate gradient of the bilevel objective in (mean, Cholesky factor).

    ``nugget`` is sigma^2. The estimate averages ``(model - target) * adjoint * score``
    over the N training points used to fit the model.
    """
    if N < 2:
        raise ValueError("N must be >= 2")
    rng = make_rng(rng)
    U = theta.sample(N, rng)
    y = np.asarray(target(U), dtype=float)
    if not np.all(np.isfinite(y)):
        raise NonFiniteValue("target returned non-finite labels")
    model = fit_krr(U, y, lengthscale, nugget)
    lam = solve_adjoint(model, U, Qhat_validation)
    resid = predict(model, U) - y
    weight = resid * lam
    g_mean = weight @ score_mean(theta, U) / N
    g_L = np.tensordot(weight, score_cholesky(theta, U), axes=1) / N
    return BilevelGradient(
        g_mean, g_L, model, validation_objective(model, Qhat_validation), U, resid, lam
    )


def _err_or_nan(model, Q) -> float:
    """Err, or NaN when the target vanishes on every point of ``Q``."""
    try:
        return err_metric(model, Q)
    except DegenerateTarget:
        return float("nan")


def run_bilevel(config: BilevelConfig, target, Qhat_validation: MetaTestEnsemble,
                Qhat_test: MetaTestEnsemble, theta0: GaussianMeasure) -> OptimizationTrace:
    """Projected gradient descent on (mean, Cholesky factor); rows 0..iterations in the trace.

    Row ``k`` evaluates the iterate after ``k`` steps: objective and ``err_seen``
    on the validation split, ``err_unseen`` on the test split (every
    ``eval_every`` rows and always on the last), and the gradient norm.
    """
    if Qhat_validation.labels is None:
        Qhat_validation = Qhat_validation.with_labels(target)
    if Qhat_test.labels is None:
        Qhat_test = Qhat_test.with_labels(target)
    rng = make_rng(config.seed)
    d = theta0.dim
    trace = OptimizationTrace(param_columns=param_names(d), meta={"seed": config.seed})
    theta = theta0
    for k in range(config.iterations + 1):
        t0 = time.perf_counter()
        try:
            grad = bilevel_gradient(theta, target, Qhat_validation, config.samples_per_step,
                                    config.nugget(k), config.lengthscale, rng)
        except NonFiniteValue as exc:
            record = IterationRecord(iter=k, objective=float("nan"), params=gaussian_params(theta))
            trace.append(record)
            raise NonFiniteValue(f"{exc} at iteration {k}", record) from exc
        gnorm = grad.norm
        last = k == config.iterations
        err_unseen = float("nan")
        if last or k % max(config.eval_every, 1) == 0:
            err_unseen = _err_or_nan(grad.model, Qhat_test)
        record = IterationRecord(
            iter=k,
            objective=grad.objective,
            err_seen=_err_or_nan(grad.model, Qhat_validation),
            err_unseen=err_unseen,
            grad_norm=gnorm,
            params=gaussian_params(theta),
        )
        if not (np.isfinite(gnorm) and np.isfinite(grad.objective)):
            trace.append(record)
            raise NonFiniteValue(f"non-finite gradient at iteration {k}", record)
        if not last:
            step_mean, step_L = grad.mean, grad.cov_factor
            if config.gradient_normalization and gnorm > 0:
                step_mean, step_L = step_mean / gnorm, step_L / gnorm
            lr = config.lr_schedule(k)
            theta = GaussianMeasure(theta.mean - lr * step_mean,
                                    project_psd(theta.cov_factor - lr * step_L))
        if config.record_wall_time:
            record.wall_ms = 1e3 * (time.perf_counter() - t0)
        trace.append(record)
    trace.final = theta
    return trace
