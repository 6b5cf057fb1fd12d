"""Reference geometry, convex weight and the time-window parameters.

Builds the unit square with the clamped beam on three sides, evaluates the
weight d = |x - x0|^2 from an exterior anchor, and prints the quantities that
the Carleman machinery depends on.
"""

import numpy as np

from sail.geometry import (build_reference_domain, eval_weight, locate_sigma_window,
                           min_observation_time, select_time_params, verify_assumptions)

T = 4.6

g = build_reference_domain(33, 33)
w = eval_weight(g, (-1.0, 0.0))
rep = verify_assumptions(g, w)
print(f"grid {g.shape}, h = {g.hx:.5f}, beam arclength {g.arc_weights.sum():.3f}")
print(f"rho = {rep.rho}, s = {rep.s}, max d = {rep.max_d}, max |h.nu| on the observed edge = "
      f"{rep.max_hnu_gamma1:.1e}")
print(f"minimal observation time {min_observation_time(w):.6f} (2 sqrt 5 = {2 * np.sqrt(5):.6f})")

p = select_time_params(w, T)
print(f"T = {p.T}, c = {p.c:.4f}, delta = {p.delta:.4f}, sigma = {p.sigma}, "
      f"window [t0, t1] = [{p.t0:.3f}, {p.t1:.3f}]")

times = np.linspace(0, T, 185)
_, _, mask = locate_sigma_window(p, p.sigma, g, times)
print(f"Q(sigma) occupies {mask.mask.mean():.1%} of space-time; sandwich holds: "
      f"{mask.sandwich_holds(T)}")
