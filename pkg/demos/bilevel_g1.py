"""Bilevel design of a Gaussian training distribution for the g1 benchmark in d=2.

A reduced version of the full protocol (fewer iterations and samples) so it
finishes in well under a minute. Run with ``python3 demos/bilevel_g1.py``.
"""

import numpy as np

from datadesign.benchmarks import baseline_distribution, err_metric, make_meta_ensemble, make_target
from datadesign.bilevel import BilevelConfig, CosineSchedule, run_bilevel
from datadesign.kernel import fit_krr
from datadesign.measures import GaussianMeasure, make_rng

d, iterations = 2, 200
target = make_target("g1", d)
draw = make_meta_ensemble(K=10, d=d, M=2000, rng=0)
Q_val, Q_test = draw.validation(target), draw.test(target)

config = BilevelConfig(
    iterations=iterations,
    lr_schedule=CosineSchedule(1e-2, 0.0, iterations),
    nugget_schedule=CosineSchedule(1e-3, 1e-7, iterations),
    samples_per_step=250,
    eval_every=50,
    seed=1,
)
trace = run_bilevel(config, target, Q_val, Q_test, GaussianMeasure(np.zeros(d), np.eye(d)))
for row in trace.records[::50]:
    print(f"iter {row.iter:4d}  objective {row.objective:.4e}  Err unseen {row.err_unseen:.4f}")
final = trace.records[-1]
print(f"final mean {np.round(final.params[:d], 3)}")

# compare against the standard normal at the same training size
rng = make_rng(2)
normal = baseline_distribution("normal", d)
X = normal.sample(1024, rng)
model = fit_krr(X, target(X), 1.0, 1e-3 / 1024)
print(f"Normal baseline Err {err_metric(model, Q_test):.4f}")
