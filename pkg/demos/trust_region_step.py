"""
Closed-form trust-region step vs a dense grid
=============================================

The update direction under a diagonal Fisher trust region has a closed
form: delta = -eta * g / I with eta chosen so the quadratic spends the
whole budget. This script checks it against brute force on a small
instance.
"""

import numpy as np

from ttalab.optim import trust_region_step

rng = np.random.default_rng(0)

g = rng.normal(size=3)
fisher = rng.uniform(0.3, 2.0, size=3)
eps = 0.05

out = trust_region_step(g, fisher, eps)
print("gradient        ", np.round(g, 4))
print("fisher diagonal ", np.round(fisher, 4))
print("step            ", np.round(out.delta, 4))
print("eta             ", round(out.eta, 6))

quad = 0.5 * float(out.delta @ (fisher * out.delta))
print("budget spent     %.12f of %.12f" % (quad, eps))

# brute force: every grid point inside the ellipsoid, step 0.01
axes = [np.arange(-60, 61) * 0.01] * 3
mesh = np.stack(np.meshgrid(*axes, indexing="ij")).reshape(3, -1)
feasible = 0.5 * np.einsum("i,ij->j", fisher, mesh ** 2) <= eps
grid_best = float(np.min(g @ mesh[:, feasible]))
closed = float(g @ out.delta)
print("grid best g.delta   %.8f over %d feasible points"
      % (grid_best, int(feasible.sum())))
print("closed form g.delta %.8f" % closed)
assert closed <= grid_best + 1e-12
print("closed form beats every feasible grid point")
