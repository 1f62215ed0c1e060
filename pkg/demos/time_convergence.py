"""
Strong convergence in time
==========================

A small version of the temporal study: h = 1/16, 20 paths, reference step
2^-10.  The metric is the mean-square error (sup in time of the L2 part plus
the time-integrated gradient part), so the slopes are squared strong orders:
about 1 for Euler-Maruyama and 2 for Milstein and the splitting scheme.
"""

import numpy as np

from posspde.experiments import convergence_study

dts = [2.0**-k for k in range(3, 8)]
reports = convergence_study("time", ["ema", "emi", "split2"], dts, ref_dt=2.0**-10, ref_n=16,
                            paths=20, lam=3.0, T=0.5, seed=0)

print("dt       " + "".join(f"{r.scheme.value:>12}" for r in reports))
for i, dt in enumerate(dts):
    print(f"2^-{int(-np.log2(dt)):<6d}" + "".join(f"{r.metrics[i]:>12.3e}" for r in reports))
print("slope    " + "".join(f"{r.slope:>12.2f}" for r in reports))

# at this resolution the EMa error still carries a visible dt^2 part, so its
# slope sits above 1; refining the grid walks it down
