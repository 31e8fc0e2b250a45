"""
How the best skip weight moves with depth
=========================================

A tied-weight linear cross-attention stack with skip weight ``alpha`` and value
weight ``-alpha`` applies ``I - alpha Lambda`` once per layer. Deeper stacks
favour the ``alpha`` that contracts every spike eigenvalue equally fast, which
for eigenvalues in ``[1, 5]`` is ``2 / (1 + 5) = 1/3``.
"""

import numpy as np

from mmicl import losses, optim, theory

# Population losses average over the law of |m| with a fixed quadrature rule.
zm = losses.ZMoments()
print(f"Z ranges over [{zm.Z_lower:g}, {zm.Z_upper:g}]; limit alpha = {losses.alpha_star_limit(zm):.6f}")

# Golden-section search on the one-parameter loss at increasing depth.
print("\n   T    alpha*_T    gap to 1/3")
for T, a, gap in theory.alpha_star_sequence([1, 2, 5, 10, 20, 50, 100, 200], zm):
    print(f"{T:4d}  {a:.6f}  {gap:+.2e}")

# The loss itself falls geometrically; its per-layer rate approaches the
# worst-case contraction factor phi(1/3) = 2/3.
print("\n   T    loss at alpha*_T    loss^(1/2T)")
for T in (10, 50, 100):
    a, f = optim.minimize_1d(lambda x: losses.pop_loss_one_param(x, T, zm), (0.0, 1.0))
    print(f"{T:4d}  {f:.3e}          {f ** (1 / (2 * T)):.4f}")
print(f"phi(1/3) = {losses.phi(1 / 3, zm):.4f}")

# With separate skip and value weights, descent started inside the window
# beta in (-2/Z_upper, 0) ends near (1/3, -1/3). alpha is kept at its exact
# minimiser for the current beta, so only beta is descended.
T = 100
init = optim.theorem_init(T, zm)
cfg = optim.OptimConfig(step_size=1.0, objective="log", max_steps=20_000)
tr = optim.train("population", "lca_two_param", T, init, cfg, zm=zm, profile_alpha=True)
print(f"\nT = {T}: start {np.round(init, 4)}, end {np.round(tr.final_params, 5)} after {tr.n_steps} steps ({tr.stop_reason})")
print(f"beta stayed in [{tr.param_min[1]:.4f}, {tr.param_max[1]:.4f}]")
