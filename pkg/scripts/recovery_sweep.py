"""Per-coefficient Wald coverage of the repeated-measures model over seeds.

    python scripts/recovery_sweep.py --seeds 100 --participants 500
"""
import argparse

import numpy as np
import pandas as pd

from dosetrial.design import ModelSpec
from dosetrial.mixed import fit_lmm
from dosetrial.simulate import recovery_truth, simulate_trial, true_coefficients

FORMULA = ("value ~ poly(lambda,3) + personalised + domain + time + lambda:personalised"
           " + lambda:domain + lambda:time + personalised:time + domain:time"
           " + (1 + time | participant)")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=100)
    ap.add_argument("--participants", type=int, default=500)
    ap.add_argument("--times", type=int, default=10)
    args = ap.parse_args()
    est, se, truth = [], [], None
    for s in range(args.seeds):
        tr = recovery_truth(n_participants=args.participants, n_times=args.times, seed=s)
        m = fit_lmm(ModelSpec.from_formula(FORMULA, tr.outcome), simulate_trial(tr))
        truth = true_coefficients(tr, m.labels)
        est.append(m.coef)
        se.append(m.se)
    est, se = np.array(est), np.array(se)
    z = (est - truth) / se
    out = pd.DataFrame({"truth": truth, "mean_est": est.mean(0),
                        "bias_over_se": (est.mean(0) - truth) / se.mean(0),
                        "sd_over_se": est.std(0, ddof=1) / se.mean(0),
                        "coverage": (np.abs(z) <= 1.959964).mean(0)}, index=m.labels)
    print(out.to_string(float_format=lambda v: f"{v:.4f}"))


if __name__ == "__main__":
    main()
