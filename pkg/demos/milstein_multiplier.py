"""
The Euler-Milstein multiplier
=============================

For linear noise the EMi step multiplies each nodal value by
``1 + a G + a^2 (G^2 - 1) / 2`` with ``a = lambda sqrt(dt) e(x)``.
Completing the square gives ``((1 + a G)^2 + 1 - a^2) / 2``, so the
multiplier is nonnegative for every Gaussian draw exactly when ``|a| <= 1``.
"""

import numpy as np

from posspde.schemes import milstein_multiplier

G = np.linspace(-6, 6, 100001)
print(f"{'a':>6} {'min over G':>12} {'(1 - a^2)/2':>12}")
for a in (0.25, 0.5, 0.9, 1.0, 1.1, 1.5, 2.0):
    lowest = milstein_multiplier(a, G).min()
    print(f"{a:>6.2f} {lowest:>12.6f} {(1 - a * a) / 2:>12.6f}")

# the minimum sits at G = -1/a; Euler-Maruyama's 1 + a G has no such floor
rng = np.random.default_rng(0)
g = rng.standard_normal(10**6)
for a in (0.5, 1.0):
    print(f"a = {a}: P(EMa factor < 0) = {(1 + a * g < 0).mean():.4f}, "
          f"P(EMi factor < 0) = {(milstein_multiplier(a, g) < 0).mean():.4f}")
