"""Numerical Carleman check on a sourced trajectory.

Scans the large parameter tau, finds the smallest tau from which the weighted
inequality holds with an admissible constant, and fits the growth exponent of
the Q(sigma) coefficient.
"""

import numpy as np

from sail.forward import PolynomialProfile, SeparableSource, SourceSpec, simulate_coupled
from sail.geometry import build_reference_domain, eval_weight, select_time_params
from sail.verify import carleman_scan

T = 4.6
g = build_reference_domain(33, 33)
X, Y = g.mesh
p = select_time_params(eval_weight(g, (-1.0, 0.0)), T)
src = SourceSpec(np.exp(-10 * ((X - 0.5) ** 2 + (Y - 0.5) ** 2)),
                 SeparableSource(np.ones(g.shape), PolynomialProfile((1.0, 1.0), T / 2)), 1.0, 1.0)
traj = simulate_coupled(g, None, src, None, T, 1 / 128, "two_sided", 0.0)
rep = carleman_scan(traj, src.load, None, p)

print(f"inequality holds from tau* = {rep.tau_star} (C1 = {rep.C1_T:.3g}, beta = {rep.beta:.3g})")
print(f"fitted growth exponent of the Q(sigma) coefficient: {rep.slope:.3f} (R^2 = {rep.r2:.4f})")
print("expected near 3; the discrete boundary contribution scales closer to tau^4 here")
