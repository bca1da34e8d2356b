"""Alternating minimization on the shift bound for a one-dimensional quadratic target.

The test distribution is a single Gaussian atom to the right of the origin; the
training Gaussian starts at N(0, 1) and drifts toward it. Run with
``python3 demos/ama_toy.py``.
"""

import numpy as np

from datadesign.ama import AmaConfig, GaussianFamily, ama_loop
from datadesign.benchmarks import make_target
from datadesign.measures import EmpiricalMeasure, GaussianMeasure, MetaTestEnsemble, make_rng

target = make_target("quadratic", 1)
atom = EmpiricalMeasure(make_rng(0).normal(2.0, 0.5, size=(2000, 1)))
Q = MetaTestEnsemble([atom]).with_labels(target)

config = AmaConfig(outer_iterations=30, samples_for_misfit=1000, seed=3)
trace = ama_loop(config, GaussianFamily(), target, Q, GaussianMeasure(np.zeros(1), np.eye(1)))
for row in trace.records[::5]:
    print(f"iter {row.iter:3d}  bound {row.objective:.4e}  mean {row.params[0]:+.3f}  std {row.params[1]:.3f}")
last = trace.records[-1]
print(f"stopped after {last.iter} iterations: bound {last.objective:.4e}  mean {last.params[0]:+.3f}  std {last.params[1]:.3f}")
