"""Gaussian optimal transport: closed-form distance, the optimal map and a barycenter.

Run with ``python3 demos/transport_basics.py``.
"""

import numpy as np

from datadesign.measures import EmpiricalMeasure, GaussianMeasure, MetaTestEnsemble, make_rng
from datadesign.transport import (
    barycenter_residual,
    gaussian_barycenter,
    gaussian_ot_map,
    w2_empirical,
    w2_gaussian,
)

rng = make_rng(0)
a = GaussianMeasure(np.zeros(2), np.eye(2))
b = GaussianMeasure(np.array([1.0, -0.5]), np.array([[2.0, 0.0], [0.5, 0.7]]))

# closed form against an exact assignment between samples
print(f"W2 closed form        {w2_gaussian(a, b):.4f}")
emp = w2_empirical(EmpiricalMeasure(a.sample(2000, rng)), EmpiricalMeasure(b.sample(2000, rng)))
print(f"W2 from 2000 samples  {emp:.4f}")

# pushing samples of a through the optimal map reproduces b
T = gaussian_ot_map(a, b)
Y = T(a.sample(20000, rng))
print("pushed mean", np.round(Y.mean(axis=0), 3), "target", b.mean)
print("pushed cov\n", np.round(np.cov(Y.T), 3), "\ntarget cov\n", np.round(b.cov, 3))

# barycenter of five random Gaussians
atoms = []
for _ in range(5):
    L = np.tril(0.3 * rng.standard_normal((3, 3)), -1) + np.diag(rng.uniform(0.5, 1.5, 3))
    atoms.append(GaussianMeasure(rng.standard_normal(3), L))
Q = MetaTestEnsemble(atoms)
bar = gaussian_barycenter(Q)
print(f"barycenter fixed-point residual {barycenter_residual(bar.cov, Q):.2e}")
