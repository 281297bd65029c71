"""Coverage of the trend in the crossed model x prompt panel, Wald z against a
t reference with n_models - 2 degrees of freedom.

    python scripts/crossed_coverage.py --models 20 --prompts 20 --seeds 300
"""
import argparse

from scipy import stats

from dosetrial.design import ModelSpec
from dosetrial.mixed import fit_crossed_lmm
from dosetrial.simulate import simulate_frontier_panel

TREND = 0.95


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--models", type=int, default=20)
    ap.add_argument("--prompts", type=int, default=20)
    ap.add_argument("--seeds", type=int, default=100)
    args = ap.parse_args()
    spec = ModelSpec.from_formula("value ~ years + (1 | participant) + (1 | item)",
                                  "frontier_score")
    zq = stats.norm.ppf(0.975)
    tq = stats.t.ppf(0.975, args.models - 2)
    hit_z = hit_t = 0
    for s in range(args.seeds):
        m = fit_crossed_lmm(spec, simulate_frontier_panel(args.models, args.prompts,
                                                          trend_per_year=TREND, seed=s))
        j = m.labels.index("years")
        err = abs(m.coef[j] - TREND) / m.se[j]
        hit_z += err <= zq
        hit_t += err <= tq
    n = args.seeds
    print(f"z coverage {hit_z}/{n} ({hit_z / n:.3f}), t{args.models - 2} coverage "
          f"{hit_t}/{n} ({hit_t / n:.3f})")


if __name__ == "__main__":
    main()
