"""
The two-parameter loss surface
==============================

At depth 10 the population loss over (skip weight alpha, value weight beta)
has a narrow valley along which alpha tracks its best value for each beta.
The valley bottoms out close to the anti-diagonal point (1/3, -1/3).
"""

import numpy as np

from mmicl import experiments, losses
from mmicl.experiments import ExperimentConfig, LandscapeGrid

cfg = ExperimentConfig(experiment="landscape", grid=LandscapeGrid(resolution=41))
surface = experiments.run(cfg)

# A coarse character map of log10(loss): darker is lower.
shades = " .:-=+*#%@"[::-1]
logs = np.clip(surface.log_values, -6, 1)
levels = ((logs + 6) / 7 * (len(shades) - 1)).round().astype(int)
print("beta\\alpha 0 ... 1")
for j in range(len(surface.betas) - 1, -1, -4):
    print(f"{surface.betas[j]:6.2f}  " + "".join(shades[k] for k in levels[j]))

a, b = surface.grid_argmin()
print(f"\ngrid minimum at alpha = {a:.3f}, beta = {b:.3f}")

# Along the valley, alpha is the least-squares optimum for each beta.
zm = losses.ZMoments()
print("\n  beta    alpha*(beta)   profiled loss")
for beta, alpha, F in surface.profiled[::8]:
    print(f"{beta:6.3f}   {alpha:10.4f}    {F:.3e}")

# On the anti-diagonal the two-parameter loss is the one-parameter loss. The
# loss reaches 1e12 at alpha = 1, so the comparison is relative.
diff = max(
    abs(losses.pop_loss_two_param(x, -x, cfg.T, zm) / losses.pop_loss_one_param(x, cfg.T, zm) - 1.0) for x in surface.alphas
)
print(f"\nmax relative gap between two-param(alpha, -alpha) and one-param(alpha): {diff:.1e}")
