"""Yule process at rate 1: the martingale limit is Exp(1) and the rescaled
fluctuations around it are a variance mixture of centred Gaussians.

Run:  python3 demos/yule_martingale.py
"""

import numpy as np
from scipy import stats

from branching_clt import fluctuations as fl
from branching_clt.models import make_yule
from branching_clt.semigroup import solve_eigentriplet
from branching_clt.simulator import simulate_ensemble

model = make_yule(1.0)
triplet = solve_eigentriplet(model)
print(f"lambda = {triplet.lam}, h = 1, gamma = delta_0")

# observe at t = 2, 4, 6 and keep the population up to T = 12 for W
ens = simulate_ensemble(model, 0, [2.0, 4.0, 6.0], 6.0, 1000, 1, triplet=triplet)
w = fl.estimate_W(ens, triplet, 6.0).w
print(f"W: mean {w.mean():.3f}, var {w.var():.3f}, KS vs Exp(1) p = "
      f"{stats.kstest(w, 'expon').pvalue:.3f}")

# e^{lam t} E[(W - W_t)^2] should sit near 1
trace = fl.martingale_l2_speed(ens, triplet)
for t, v, s in zip(trace.t, trace.value, trace.se):
    print(f"  t={t:g}  L2 trace {v:.3f} +- {s:.3f}")

for t in ens.grid:
    sample = fl.fluctuation_samples(ens, triplet, "martingale", "h", t)
    rep = fl.distance_d(sample, 1.0, n_boot=50)
    print(f"  t={t:g}  d = {rep.d:.4f} +- {rep.se:.4f}   KS p = {rep.ks_pvalue:.3f}")

# Y / sqrt(W) is standard normal and independent of W
sample = fl.fluctuation_samples(ens, triplet, "martingale", "h", 6.0)
pooled, per_bin = fl.mixture_normality(sample, 1.0)
r, se = fl.independence_check(sample, 1.0)
print(f"normality of Y/sqrt(W): pooled p = {pooled:.3f}; corr with W = {r:.3f} +- {se:.3f}")
