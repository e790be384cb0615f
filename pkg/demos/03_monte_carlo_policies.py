"""Monte Carlo check of the Holmstrom-Milgrom benchmark.

With lam = 1 (pure exponential utility, gamma_A = 0.5, gamma_P = 1) the
optimal contract slope is constant, Z* = 0.8, and the Principal's value at
(t, x) = (0, 0) is -exp(-0.3).  Simulating the reduced dynamics under
constant policies shows Z* on top, within Monte Carlo error.
"""

import math

import numpy as np

from deeppaac.diagnostics import RolloutConfig, rollout_mc
from deeppaac.problems import get_problem

prob = get_problem("hm_mixture", lam=1.0)
print(f"closed form: Z* = {prob.optimal_Z():.4f}, V(0,0) = {-math.exp(-0.3):.5f}")

for z in (0.2, 0.5, 0.8, 0.9, 1.0):
    est, se = rollout_mc(prob, lambda t, x, z=z: np.full((len(t), 1), z), RolloutConfig(n_paths=40_000, n_steps=200, seed=1))
    print(f"Z = {z:.1f}: {est:.5f} +- {se:.5f}")
