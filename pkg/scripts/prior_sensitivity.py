"""Fit one simulated reference season under the three prior presets and print
the posterior medians side by side.

    python3 scripts/prior_sensitivity.py --passes 1000
"""

import argparse
import warnings

from ballnet import fixtures
from ballnet.inference import PRESETS, MCMCConfig, PriorSpec, build_dataset, posterior_summary, run_mcmc
from ballnet.inference.study import StudyConfig, simulate_season_log


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--passes", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=9)
    ap.add_argument("--chains", type=int, default=4)
    ap.add_argument("--warmup", type=int, default=2000)
    ap.add_argument("--iters", type=int, default=5000)
    args = ap.parse_args()
    warnings.simplefilter("ignore", RuntimeWarning)

    cov = fixtures.study_covariates()
    season = simulate_season_log(0, StudyConfig(passes=args.passes, seed=args.seed), fixtures.true_params(cov), cov)
    ds = build_dataset([season], cov, model_failure_receiver=False, attach=False)
    cfg = MCMCConfig(chains=args.chains, warmup=args.warmup, iters=args.iters, seed=args.seed)
    medians = {}
    for preset in sorted(PRESETS):
        chains = run_mcmc(ds.data, ds.layout, PriorSpec.preset(preset), cfg)
        medians[preset] = {r.name: r.median for r in posterior_summary(chains).rows}
        print(f"{preset} (sd {PRESETS[preset]:g}) done")

    presets = sorted(medians)
    print(f"\n{'parameter':26s}" + "".join(f"{p:>9s}" for p in presets) + f"{'spread':>9s}")
    worst = 0.0
    for name in medians[presets[0]]:
        vals = [medians[p][name] for p in presets]
        spread = max(vals) - min(vals)
        worst = max(worst, spread)
        print(f"{name:26s}" + "".join(f"{v:9.3f}" for v in vals) + f"{spread:9.4f}")
    print(f"\nlargest spread of a posterior median across presets: {worst:.4f}")


if __name__ == "__main__":
    main()
