"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Runtimes on one core: criterion 1 about 15 minutes, criterion 7 about 6,
criterion 8 about 5, the rest under 3 each.
"""

import json
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from scipy import stats
from scipy.linalg import expm

from ballnet import fixtures
from ballnet import rng as rngmod
from ballnet.cli import main as cli_main
from ballnet.inference import (
    MCMCConfig,
    ParameterLayout,
    PriorSpec,
    build_dataset,
    posterior_predictive_check,
    posterior_summary,
    run_mcmc,
    run_simulation_study,
    update_posterior,
)
from ballnet.inference.study import StudyConfig, simulate_season_log
from ballnet.likelihood import LikelihoodConfig, compile_logs, match_log_likelihood
from ballnet.model import MatchLog, generator_matrix, holding_rate
from ballnet.simulator import SimulationConfig, StaticCovariates, simulate_match
from helpers import (
    fd_check,
    gradient_agrees,
    naive_likelihood,
    random_bundle,
    random_effects,
    random_log,
    random_params,
    small_roster,
)

pytestmark = pytest.mark.filterwarnings("ignore::RuntimeWarning")


def report(capsys, number: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[acceptance] criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# ---------------------------------------------------------------------------
# 2. Generator matrix


def test_c02_generator_matrix(capsys):
    rng = np.random.default_rng(2)
    worst_sum, exact_diag, nonneg = 0.0, True, True
    for _ in range(1000):
        roster = small_roster(int(rng.integers(2, 12)), int(rng.integers(2, 12)))
        dims = tuple(int(d) for d in rng.integers(1, 5, size=4))
        params = random_params(rng, dims, scale=1.0)
        eff = random_effects(rng, roster, scale=1.0)
        bundles = {p.index: random_bundle(rng, roster, p, dims) for p in roster.players}
        g = generator_matrix(params, eff, bundles, roster)
        q = g.q
        worst_sum = max(worst_sum, float(np.max(np.abs(q.sum(axis=1)))))
        lam = np.array([holding_rate(params.omega, bundles[p.index].c) for p in roster.players])
        exact_diag &= bool(np.all(np.diag(q) == -lam))
        off = q[~np.eye(q.shape[0], dtype=bool)]
        nonneg &= bool(np.all(off >= 0))
    ok = worst_sum <= 1e-12 and exact_diag and nonneg
    report(capsys, 2, ok, f"max |row sum| {worst_sum:.2e}, diagonal exact {exact_diag}, off-diagonal >= 0 {nonneg}")


# ---------------------------------------------------------------------------
# 3. Transition frequencies at a short horizon


def test_c03_transition_oracle(capsys):
    rng = np.random.default_rng(3)
    roster = small_roster(3, 3)
    dims = (2, 2, 2, 2)
    params = random_params(rng, dims)
    eff = random_effects(rng, roster)
    bundles = {p.index: random_bundle(rng, roster, p, dims) for p in roster.players}
    # I + Qh is first order; its O((lambda h)^2) error must stay well below the
    # Monte-Carlo SE, so holding rates are confined to [1/1.5, 1.5] per minute.
    reach = max(abs(float(params.omega @ b.c)) for b in bundles.values())
    params = replace(params, omega=params.omega * min(1.0, math.log(1.5) / reach))
    h = 0.01
    cfg = SimulationConfig(roster, StaticCovariates(bundles), T=h, short_season=True)
    players = roster.players
    n = len(players)
    counts = np.zeros((n, n))
    g = rngmod.stream(3, 0)
    total = 10**6
    for k in range(total):
        a = k % n
        log = simulate_match(cfg, params, eff, g, initial_holder=players[a])
        end = log.events[-1].receiver if log.events else log.initial_holder
        counts[a, roster.slot(end)] += 1
    expected = generator_matrix(params, eff, bundles, roster).transition_approx(h)
    rows = counts.sum(axis=1, keepdims=True)
    freq = counts / rows
    se = np.sqrt(expected * (1 - expected) / rows)
    z = np.abs(freq - expected) / se
    exact = expm(generator_matrix(params, eff, bundles, roster).q * h)
    ok = bool(np.all(z <= 3))
    report(capsys, 3, ok, f"{total} possessions, max |freq - (I + Qh)| / SE = {z.max():.2f} (limit 3); "
                          f"max |freq - exp(Qh)| / SE = {np.max(np.abs(freq - exact) / se):.2f}")


# ---------------------------------------------------------------------------
# 4. Likelihood against the naive product


def test_c04_likelihood_oracle(capsys):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(200):
        roster = small_roster(int(rng.integers(2, 5)), int(rng.integers(2, 5)))
        dims = tuple(int(d) for d in rng.integers(1, 4, size=4))
        params = random_params(rng, dims)
        eff = random_effects(rng, roster)
        log = random_log(rng, roster, dims, int(rng.integers(0, 21)))
        mfr = bool(rng.random() < 0.5)
        ll = match_log_likelihood(params, eff, log, LikelihoodConfig(dims, mfr, "position"))
        oracle = naive_likelihood(params, eff, log, mfr)
        worst = max(worst, abs(math.exp(ll) - oracle) / oracle)
    censor_exact = True
    for _ in range(20):
        roster = small_roster(3, 3)
        dims = (3, 1, 1, 1)
        params = random_params(rng, dims)
        c = rng.uniform(-1, 1, 3)
        T = float(rng.uniform(1, 120))
        log = MatchLog((), roster.players[int(rng.integers(6))], T, (roster,), censor_c=c)
        lam = holding_rate(params.omega, c)
        ll = match_log_likelihood(params, random_effects(rng, roster), log, LikelihoodConfig(dims))
        censor_exact &= ll == -lam * T
    ok = worst <= 1e-10 and censor_exact
    report(capsys, 4, ok, f"200 logs, max relative error {worst:.2e}; empty log equals -lambda T exactly: {censor_exact}")


# ---------------------------------------------------------------------------
# 5. Gradient


def test_c05_gradient_check(capsys):
    bad = [seed for seed in range(100) if not gradient_agrees(*fd_check(1000 + seed))]
    report(capsys, 5, not bad, f"100 instances, {len(bad)} disagree beyond relative 1e-5")


# ---------------------------------------------------------------------------
# 6. Prior recovery


@pytest.mark.slow
def test_c06_prior_recovery(capsys):
    # A compact layout that still has every block and all three correlations.
    layout = ParameterLayout(("h1", "h2"), ("intercept", "x"), ("f1",), ("r1",), ("u1", "u2", "u3"),
                             "position", True)
    data = compile_logs([], LikelihoodConfig(layout.dims, True, "position"), layout.units)
    cfg = MCMCConfig(chains=4, warmup=1000, iters=50000, thin=20, seed=6, init="prior")
    chains = run_mcmc(data, layout, PriorSpec(), cfg)
    tests = {}
    for name in layout.fixed_names_flat():
        tests[name] = stats.kstest(chains.draws(name).ravel(), stats.norm(0, 10).cdf).pvalue
    for name in layout.corr_names(True):
        tests[name] = stats.kstest((chains.draws(name).ravel() + 1) / 2, stats.beta(2.5, 2.5).cdf).pvalue
    for name in layout.sigma_names(True):
        tests[name] = stats.kstest(chains.draws(name).ravel(), stats.expon().cdf).pvalue
    n = chains.draws(layout.fixed_names_flat()[0]).size
    worst = min(tests, key=tests.get)
    ok = n == 10**4 and min(tests.values()) > 0.001
    report(capsys, 6, ok, f"{n} draws, {len(tests)} KS tests, smallest p = {tests[worst]:.4f} ({worst})")


# ---------------------------------------------------------------------------
# 7. Sequential updating equals a joint fit


def _split_season(season, at):
    a, b = season.events[:at], season.events[at:]
    first = replace(season, events=a, stop_time=a[-1].time)
    second = replace(season, events=tuple(replace(ev, index=k + 1) for k, ev in enumerate(b)),
                     start_time=a[-1].time, initial_holder=a[-1].receiver)
    return first, second


@pytest.mark.slow
def test_c07_online_updating(capsys):
    cov = fixtures.study_covariates()
    season = simulate_season_log(0, StudyConfig(passes=200, seed=2024), fixtures.true_params(cov), cov)
    first, second = _split_season(season, 100)
    d1 = build_dataset([first], cov, model_failure_receiver=False, attach=False)
    d12 = build_dataset([first, second], cov, model_failure_receiver=False, attach=False)
    cfg = MCMCConfig(chains=4, warmup=2000, iters=20000, seed=1)
    prev = run_mcmc(d1.data, d1.layout, PriorSpec(), cfg)
    seq = update_posterior(prev, d12.data, d12.layout, replace(cfg, seed=2))
    joint = run_mcmc(d12.data, d12.layout, PriorSpec(), replace(cfg, seed=3))
    diffs = {n: abs(seq.draws(n).mean() - joint.draws(n).mean()) for n in d12.layout.fixed_names_flat()}
    worst = max(diffs, key=diffs.get)
    ok = d12.data.n_events == 200 and diffs[worst] < 0.05
    report(capsys, 7, ok, f"{len(diffs)} fixed effects, max |mean difference| {diffs[worst]:.4f} ({worst})")


# ---------------------------------------------------------------------------
# 8. Posterior predictive calibration


@pytest.mark.slow
def test_c08_ppc_calibration(capsys):
    cov = fixtures.study_covariates()
    truth = fixtures.true_params(cov)
    reps = 50
    inside = {}
    all_inside = 0
    for r in range(reps):
        season = simulate_season_log(r, StudyConfig(passes=300, seed=88), truth, cov)
        ds = build_dataset([season], cov, model_failure_receiver=False, attach=False)
        chains = run_mcmc(ds.data, ds.layout, PriorSpec(), MCMCConfig(chains=2, warmup=1000, iters=1000, seed=r))
        rep = posterior_predictive_check(chains, ds.logs, rngmod.stream(88, r), max_draws=200)
        for rec in rep.records:
            inside.setdefault((rec.statistic, rec.team), []).append(rec.inside)
        all_inside += all(rec.inside for rec in rep.records)
    rates = {k: float(np.mean(v)) for k, v in inside.items()}
    ok = all_inside / reps >= 0.9
    detail = ", ".join(f"{s}/{t} {v:.2f}" for (s, t), v in sorted(rates.items()))
    report(capsys, 8, ok, f"{reps} replications, all statistics inside in {all_inside / reps:.2f}; {detail}")


# ---------------------------------------------------------------------------
# 9. Prior sensitivity


@pytest.mark.slow
def test_c09_prior_sensitivity(capsys):
    cov = fixtures.study_covariates()
    season = simulate_season_log(0, StudyConfig(passes=1000, seed=9), fixtures.true_params(cov), cov)
    ds = build_dataset([season], cov, model_failure_receiver=False, attach=False)
    cfg = MCMCConfig(chains=4, warmup=2000, iters=5000, seed=9)
    medians = {}
    for preset in ("prior1", "prior2", "prior3"):
        chains = run_mcmc(ds.data, ds.layout, PriorSpec.preset(preset), cfg)
        medians[preset] = {r.name: r.median for r in posterior_summary(chains).rows}
    names = list(medians["prior1"])
    spread = {n: max(m[n] for m in medians.values()) - min(m[n] for m in medians.values()) for n in names}
    worst = max(spread, key=spread.get)
    ok = spread[worst] < 0.1
    report(capsys, 9, ok, f"{len(names)} parameters, max median spread across presets {spread[worst]:.4f} ({worst})")


# ---------------------------------------------------------------------------
# 10. CLI determinism


def _tree(d: Path) -> dict:
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_c10_cli_determinism(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    config = tmp_path / "config.json"
    config.write_text(json.dumps({
        "schema": "ballnet-config/1",
        "simulate": {"mode": "pass_count", "passes": 150, "n_matches": 2},
        "mcmc": {"chains": 2, "warmup": 100, "iters": 100},
        "ppc": {"max_draws": 50},
        "study": {"n_seasons": 2, "passes": 150},
    }))

    def twice(name, make_argv):
        results = []
        for k in range(2):
            out = tmp_path / f"{name}{k}"
            capsys.readouterr()
            code = cli_main([str(a) for a in make_argv(out)])
            results.append((code, capsys.readouterr().out, _tree(out) if out.exists() else {}))
        return results[0][0] == 0 and results[0] == results[1]

    same = {}
    same["simulate"] = twice("sim", lambda o: ["--json", "simulate", "--config", config, "--seed", 5, "--out", o])
    data = tmp_path / "sim0" / "logs"
    files = sorted(data.glob("*.csv"))
    same["fit"] = twice("fit", lambda o: ["fit", files[0], "--config", config, "--seed", 6, "--out", o])
    fit = tmp_path / "fit0"
    same["update"] = twice("upd", lambda o: ["update", fit, files[1], "--out", o])
    same["summarize"] = twice("sum", lambda o: ["--json", "summarize", fit, "--include-eta", "--out", o])
    same["ppc"] = twice("ppc", lambda o: ["ppc", fit, "--seed", 7, "--out", o])
    same["simstudy"] = twice("study", lambda o: ["simstudy", "--config", config, "--seed", 8, "--out", o])
    ok = all(same.values())
    report(capsys, 10, ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))


# ---------------------------------------------------------------------------
# 1. Parameter recovery (slowest, runs last)


@pytest.mark.slow
def test_c01_parameter_recovery(tmp_path, capsys):
    cfg = StudyConfig(n_seasons=20, passes=1000, seed=2023,
                      mcmc=MCMCConfig(chains=4, warmup=2000, iters=5000))
    rep = run_simulation_study(cfg, out_dir=tmp_path)
    failed = [s["season"] for s in rep.seasons if s["status"] != "ok"]
    bias_ok = all(abs(b) <= 0.25 for b in rep.key_bias.values())
    keys_present = set(rep.key_bias) == set(fixtures.KEY_PARAMETERS)
    ok = not failed and rep.coverage_mean >= 0.85 and bias_ok and keys_present
    bias = ", ".join(f"{k} {v:+.3f}" for k, v in rep.key_bias.items())
    report(capsys, 1, ok, f"coverage {rep.coverage_mean:.3f} over {len(rep.coverage_parameters)} parameters; "
                          f"bias {bias}; failed seasons {failed}")
