"""House-of-cards models on [0, 1]: how the shape of alpha near the fittest
trait decides between small, critical and large branching.

Run:  python3 demos/house_of_cards_regimes.py
"""

from branching_clt.dsl import Expr
from branching_clt.models import HouseOfCardsParams, ModelError, make_house_of_cards
from branching_clt.semigroup import classify_regime, solve_eigentriplet

cases = ["x", "x - 0.2", "x - 1/(e - 1)", "x - 0.8", "min(20*x, 1) - 0.95", "4*sqrt(x)"]

for src in cases:
    try:
        model = make_house_of_cards(HouseOfCardsParams(Expr(src)))
    except ModelError as exc:
        print(f"{src:>22}: rejected ({exc})")
        continue
    tr = solve_eigentriplet(model)
    reg = classify_regime(tr)
    I = reg.hoc_integrals["int_inv_alpha_minus_2alpha0"]
    print(f"{src:>22}: lambda {tr.lam:.6f}  rho {tr.rho:.6f}  2rho/lambda {2 * tr.rho / tr.lam:.4f}"
          f"  int 1/(alpha - 2alpha(0)) {I:.4f}  -> {reg.kind}")
