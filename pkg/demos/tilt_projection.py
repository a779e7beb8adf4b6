"""
Exponential tilting to a bias budget
====================================

Given next-token probabilities and per-token bias values, the closest
distribution (in KL) whose expected bias is at most tau lies on the
exponential-tilt family q_beta ~ p * exp(-beta * b). solve_beta finds the
multiplier, and the certificate samples random feasible alternatives to
confirm none beats the projection.
"""

import numpy as np

from ttalab.oracle import expected_bias, kl_projection_certificate, solve_beta, tilt

p = np.array([0.25, 0.25, 0.25, 0.125, 0.125])
b = np.array([0.9, 0.7, 0.5, 0.3, 0.1])
print("base distribution ", p)
print("bias values       ", b)
print("base expected bias %.4f" % float(p @ b))

for tau in (0.5, 0.4, 0.3):
    beta = solve_beta(p, b, tau)
    q = tilt(p, b, beta)
    print("tau %.2f  beta %.4f  q" % (tau, beta), np.round(q, 4),
          " E_q[b] %.10f" % expected_bias(p, b, beta))

# above the base mean no tilt is needed
print("tau above base mean: beta =", solve_beta(p, b, 0.7))

rep = kl_projection_certificate(p, b, tau=0.4, trials=10_000, seed=0)
print("certificate: %d feasible alternatives, min KL margin %.3e"
      % (rep.n_trials, rep.min_margin))
print("projection KL %.6f at beta* %.4f" % (rep.kl_star, rep.beta_star))
