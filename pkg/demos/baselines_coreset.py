"""Nonadaptive baselines and greedy coresets on the g2 benchmark in d=5.

Run with ``python3 demos/baselines_coreset.py``.
"""

import numpy as np

from datadesign.benchmarks import (
    baseline_distribution,
    coreset_select,
    err_metric,
    make_meta_ensemble,
    make_target,
)
from datadesign.kernel import fit_krr
from datadesign.measures import make_rng

d, n = 5, 512
target = make_target("g2", d)
draw = make_meta_ensemble(K=10, d=d, M=2000, rng=0)
Q_test = draw.test(target)
rng = make_rng(1)

for kind in ("normal", "uniform", "barycenter", "mixture"):
    dist = baseline_distribution(kind, d, ensemble=draw.validation(target))
    X = dist.sample(n, rng)
    print(f"{kind:10s} Err {err_metric(fit_krr(X, target(X), 1.0, 1e-3 / n), Q_test):.4f}")

# maxmin coreset drawn from the pooled validation points
pool = np.vstack([atom.points for atom in draw.validation().atoms])
X = pool[coreset_select(pool, n, [0])]
print(f"{'coreset':10s} Err {err_metric(fit_krr(X, target(X), 1.0, 1e-3 / n), Q_test):.4f}")
