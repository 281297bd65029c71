"""How often AIC picks each polynomial order of lambda, for cubic and linear truths.

    python scripts/selection_sweep.py --seeds 100
"""
import argparse
from collections import Counter

from dosetrial.design import ModelSpec
from dosetrial.mixed import compare_fixed_specs
from dosetrial.simulate import end_of_study_truth, simulate_trial

FORMULA = ("value ~ poly(lambda,3) + personalised + domain + poly(lambda,3):personalised"
           " + poly(lambda,3):domain")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=100)
    ap.add_argument("--participants", type=int, default=2000)
    args = ap.parse_args()
    for shape in ("linear", "cubic"):
        picks = Counter()
        for s in range(args.seeds):
            tr = end_of_study_truth(shape, n_participants=args.participants, seed=s)
            base = ModelSpec.from_formula(FORMULA, tr.outcome)
            c = compare_fixed_specs([base.with_poly_order(k) for k in (1, 2, 3)],
                                    simulate_trial(tr))
            picks[int(c.table.loc[c.selected, "poly_order"])] += 1
        print(f"{shape:9s} " + "  ".join(f"order {k}: {picks[k]:3d}" for k in (1, 2, 3)))


if __name__ == "__main__":
    main()
