"""Two types with branching rates 0.5 and 1 and symmetric switching at rate
0.5.  Compare the Monte Carlo variance of the fluctuations of Z_t(1{type 0})
with the value from the second-moment ODE.

Run:  python3 demos/two_type_variance.py
"""

import math

import numpy as np

from branching_clt import fluctuations as fl
from branching_clt.models import make_finite_type, mutation_channel
from branching_clt.semigroup import classify_regime, limit_variances, solve_eigentriplet
from branching_clt.simulator import simulate_ensemble

switch = mutation_channel([0.5, 0.5], [[0, 1], [1, 0]])
model = make_finite_type([0.5, 1.0], [[0, 0, 1], [0, 0, 1]], extra_mechanisms=(switch,))
tr = solve_eigentriplet(model)
print(f"lambda = {tr.lam:.6f}, gap = {tr.raw_gap:.6f}, regime {classify_regime(tr)}")
print("h =", tr.h_values([0, 1]), " gamma =", tr.gamma_weights)


def f(x):
    return (np.asarray(x) == 0).astype(float)


oracle = limit_variances(model, tr, f, 0)
print(f"oracle sigma^2 = {oracle['sigma2']:.5f}  (gamma(f) = {oracle['gamma_f']:.4f})")

ext = math.ceil(2 * fl.min_extension(tr.lam)) / 2
ens = simulate_ensemble(model, 0, [2.0, 3.0, 4.0, 5.0, 6.0], ext, 2000, 7, triplet=tr,
                        test_functions={"f": "piecewise(1, 0.5, 0)"})
est = fl.estimate_sigma2(ens, tr, "small", "f", ens.grid)
for t, v, s in zip(est.t, est.trace, est.trace_se):
    print(f"  t={t:g}  sigma^2 estimate {v:.4f} +- {s:.4f}")
print("stabilized:", est.stabilized)

# the first moment of the centred functional decays like exp((lam - gap) t)
rep = fl.moment_growth_check("oracle", tr, 1, f, np.linspace(2, 8, 7), "small", model=model, x0=0)
print(f"first-moment exponent {rep.slope:.4f}, expected {rep.expected:.4f}")
