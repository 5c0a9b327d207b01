"""Search dataset weights so that the weighted score ranks models the way
the individual datasets do.

A synthetic matrix is used: 20 models, four datasets that agree with each
other and one that ranks models in reverse.

    python demos/02_weight_search.py
"""
import numpy as np

from lrbench.weights import (
    GammaMatrix, Objective, WeightVector, dataset_correlations, evaluate_objective, optimize_weights,
)

rng = np.random.default_rng(7)
quality = rng.random(20)
values = quality[:, None] + 0.15 * rng.standard_normal((20, 5))
values[:, 4] = 1 - quality + 0.05 * rng.standard_normal(20)
gm = GammaMatrix([f"model{i:02d}" for i in range(20)], ["a", "b", "c", "d", "dissent"],
                 np.clip(values, 0, 1.5))
obj = Objective.parse("a:0.95,b:0.95,c:0.95,d:1,dissent:1")

uniform = WeightVector.uniform(gm.datasets)
best, trace = optimize_weights(gm, obj, budget=2000, seed=0)
print(f"objective with uniform weights: {evaluate_objective(gm, uniform, obj):.4f}")
print(f"objective after search:         {trace[-1][2]:.4f} ({len(trace)} evaluations)")
print("weights:", {d: round(w, 3) for d, w in best.weights.items()})
print("rank correlation of WAR with each dataset:")
for d, rho in dataset_correlations(gm, best).items():
    print(f"  {d:8s} {rho:+.3f}")

# how quickly the incumbent improved
for it in (0, 10, 100, 500, 1999):
    print(f"  after {it + 1:5d} evaluations: {trace[it][2]:.4f}")
