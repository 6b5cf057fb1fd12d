"""Recover a small potential bump q by Gauss-Newton from edge observations,
and show the divergence guard tripping for a large one."""

import warnings

import numpy as np

from sail.errors import DivergenceError
from sail.geometry import build_reference_domain
from sail.inverse import observe_coupled, recover_q, smooth_bump
from sail.operators import CoupledState

T, dt = 4.6, 1 / 128
g = build_reference_domain(17, 17)
X, Y = g.mesh
nb = g.beam_nodes - 2
init = CoupledState(1 + 0.2 * np.cos(np.pi * X) * np.cos(np.pi * Y), np.ones(g.shape),
                    np.zeros(nb), np.zeros(nb))
p0 = np.zeros(g.shape)

q_true = smooth_bump(0.5, 0.5, 0.3, 0.1)(X, Y)
_, obs = observe_coupled(g, q_true, init, T, dt)
res = recover_q(obs, g, p0, init, T, dt, iterations=10, s0=0.5, s1=0.5, q_true=q_true)
for h in res.history:
    print("  ".join(f"{k}={v:.3g}" for k, v in h.items()))
print(f"converged={res.converged} after {len(res.history) - 1} steps")

_, obs_big = observe_coupled(g, smooth_bump(0.5, 0.5, 0.3, 10.0)(X, Y), init, T, dt)
try:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        recover_q(obs_big, g, p0, init, T, dt, iterations=10, s0=0.5, s1=0.5)
except DivergenceError as exc:
    print(f"large bump: {exc}")
