"""Calibration of the posterior predictive check on model-simulated data:
how often the observed statistics fall inside their 95% predictive bands.

    python3 scripts/ppc_calibration.py --reps 50 --mode conditional
"""

import argparse
import warnings
from collections import defaultdict

import numpy as np

from ballnet import fixtures
from ballnet import rng as rngmod
from ballnet.inference import MCMCConfig, PriorSpec, build_dataset, posterior_predictive_check, run_mcmc
from ballnet.inference.study import StudyConfig, simulate_season_log


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=50)
    ap.add_argument("--passes", type=int, default=300)
    ap.add_argument("--seed", type=int, default=88)
    ap.add_argument("--mode", choices=["conditional", "simulate"], default="conditional")
    ap.add_argument("--max-draws", type=int, default=200)
    args = ap.parse_args()
    warnings.simplefilter("ignore", RuntimeWarning)

    cov = fixtures.study_covariates()
    truth = fixtures.true_params(cov)
    inside = defaultdict(list)
    joint = 0
    for r in range(args.reps):
        season = simulate_season_log(r, StudyConfig(passes=args.passes, seed=args.seed), truth, cov)
        ds = build_dataset([season], cov, model_failure_receiver=False, attach=False)
        chains = run_mcmc(ds.data, ds.layout, PriorSpec(), MCMCConfig(chains=2, warmup=1000, iters=1000, seed=r))
        rep = posterior_predictive_check(chains, ds.logs, rngmod.stream(args.seed, r), mode=args.mode,
                                         max_draws=args.max_draws, covariates=cov)
        for rec in rep.records:
            inside[rec.statistic, rec.team].append(rec.inside)
        joint += all(rec.inside for rec in rep.records)
        print(f"replication {r:3d}: " + " ".join(f"{rec.statistic}/{rec.team}={int(rec.inside)}" for rec in rep.records))
    print()
    for (stat, team), v in sorted(inside.items()):
        print(f"{stat:20s} {team:6s} inside {np.mean(v):.2f}")
    print(f"all statistics inside: {joint / args.reps:.2f}")


if __name__ == "__main__":
    main()
