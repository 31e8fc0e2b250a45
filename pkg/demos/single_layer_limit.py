"""
What a single attention layer converges to
==========================================

As the context grows, one linear self-attention layer predicts with a vector
that is a quadratic polynomial in the label scale ``zeta``. The Bayes vector
``zeta m / (1 + |m|^2)`` divides by a task-dependent factor, which no fixed
set of weights can reproduce once ``|m|`` varies continuously.
"""

import numpy as np

from mmicl import optim, theory
from mmicl.datagen import DataConfig, MDistribution, sample_batch, sample_task

rng = np.random.default_rng(0)

# Fit the layer on 2000 prompts by alternating least squares.
batch = sample_batch(DataConfig(), 2000, 100, rng)
params, history = optim.fit_single_lsa(batch)
print(f"training loss {history[0]:.4f} -> {history[-1]:.4f} in {len(history) - 1} sweeps")

# Scan many tasks for how far the limiting vector is from the Bayes vector.
blocks = theory.LsaBlocks.from_params(params)
report = theory.theorem1_scan(blocks, 5000, rng)
print(report.summary())

# Spot-check the limiting formula against long simulated contexts.
task = sample_task(DataConfig(), rng)
x_q = rng.standard_normal(task.d)
mean, se = theory.simulate_lsa_prediction(blocks, task, x_q, 100_000, 20, rng)
print(f"simulated prediction {mean:.4f} +- {se:.4f}, formula {theory.lsa_limiting_weights(blocks, task) @ x_q:.4f}")

# When |m| is fixed, so that Z = 2 for every task, the weights u = 0, v = 1,
# b = 0, A = I / 2 match the Bayes vector exactly.
point = DataConfig(m_dist=MDistribution.point(1.0))
exact = theory.theorem1_scan(theory.degenerate_counterexample(10, 2.0), 1000, rng, point)
print(f"\nfixed |m| = 1: fraction matched {exact.fraction_below:g}, worst mismatch {exact.quantiles[1.0]:.1e}")
