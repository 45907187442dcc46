import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate

from ballnet import fixtures
from ballnet.inference import (
    MCMCConfig,
    ParameterLayout,
    PriorSpec,
    build_dataset,
    ess,
    posterior_predictive_check,
    posterior_summary,
    run_mcmc,
    update_posterior,
)
from ballnet.inference.store import RunDirError, format_chains, load_run, parse_chains, save_run
from ballnet.inference.study import StudyConfig, simulate_season_log
from ballnet.likelihood import LikelihoodConfig, compile_logs, concat_compiled
from ballnet.model import CovariateBundle, MatchEvent, MatchLog
from ballnet import rng as rngmod
from helpers import small_roster


def _holding_logs(seed=0, n=40):
    """Two teams; the holding covariate is a team indicator, so the two
    holding coefficients have independent one-dimensional posteriors."""
    rng = np.random.default_rng(seed)
    roster = small_roster(2, 2)
    rates = {1: math.exp(-0.5), 2: math.exp(0.4)}
    holder = roster.team1[0]
    t, events = 0.0, []
    for m in range(1, n + 1):
        team = roster.team_of(holder)
        h = float(rng.exponential(1 / rates[team]))
        success = bool(rng.random() < 0.7)
        rec = roster.teammates(holder)[0] if success else roster.opponents(holder)[int(rng.integers(2))]
        c = np.array([team == 1, team == 2], dtype=float)
        bundle = CovariateBundle(c, np.ones(1), np.zeros((2, 0)), np.zeros((1, 1)),
                                 tuple(j.index for j in roster.opponents(holder)),
                                 tuple(j.index for j in roster.teammates(holder)))
        t += h
        events.append(MatchEvent(m, t, h, holder, rec, success, covariates=bundle))
        holder = rec
    c_end = np.array([roster.team_of(holder) == 1, roster.team_of(holder) == 2], dtype=float)
    log = MatchLog(tuple(events), roster.team1[0], t + 0.5, (roster,), censor_c=c_end)
    layout = ParameterLayout(("team1", "team2"), ("intercept",), (), ("zero",), ("P0", "P1"), "position", False)
    data = compile_logs([log], LikelihoodConfig(layout.dims, False, "position"), layout.units)
    return log, data, layout


def _quadrature_moments(n_events, duration, sd):
    logpost = lambda w: n_events * w - math.exp(w) * duration - 0.5 * w * w / sd**2
    mode = math.log(n_events / duration) if n_events else 0.0
    lo, hi = mode - 8, mode + 8
    shift = logpost(mode)
    z = integrate.quad(lambda w: math.exp(logpost(w) - shift), lo, hi, epsabs=0, epsrel=1e-12)[0]
    m1 = integrate.quad(lambda w: w * math.exp(logpost(w) - shift), lo, hi, epsabs=0, epsrel=1e-12)[0] / z
    m2 = integrate.quad(lambda w: w * w * math.exp(logpost(w) - shift), lo, hi, epsabs=0, epsrel=1e-12)[0] / z
    return m1, math.sqrt(m2 - m1 * m1)


def test_holding_posterior_matches_quadrature():
    log, data, layout = _holding_logs()
    chains = run_mcmc(data, layout, PriorSpec(), MCMCConfig(chains=4, warmup=1000, iters=5000, seed=3))
    for k, name in enumerate(("omega[team1]", "omega[team2]")):
        sel = data.hold_c[:, k] == 1
        n_ev = int(data.hold_event[sel].sum())
        dur = float(data.hold_dur[sel].sum())
        mean, sd = _quadrature_moments(n_ev, dur, 10.0)
        x = chains.draws(name)
        n_eff = ess(x)
        assert abs(x.mean() - mean) <= 3 * sd / math.sqrt(n_eff)
        # Standard error of a sample sd is about sd / sqrt(2 n).
        assert abs(x.std() - sd) <= 3 * sd / math.sqrt(2 * n_eff)


def test_prior_only_gaussian_moments():
    layout = ParameterLayout(("a",), ("intercept",), (), (), (), "position", False)
    data = compile_logs([], LikelihoodConfig(layout.dims, False), ())
    chains = run_mcmc(data, layout, PriorSpec(fixed_effect_sd=5.0),
                      MCMCConfig(chains=4, warmup=500, iters=5000, seed=1, init="prior"))
    for name in ("omega[a]", "alpha[intercept]"):
        x = chains.draws(name)
        n_eff = ess(x)
        assert abs(x.mean()) <= 3 * 5.0 / math.sqrt(n_eff)
        assert abs(x.std() - 5.0) <= 3 * 5.0 / math.sqrt(2 * n_eff)


@pytest.fixture(scope="module")
def small_fit():
    cfg = StudyConfig(passes=200, seed=5)
    cov = fixtures.study_covariates()
    season = simulate_season_log(0, cfg, fixtures.true_params(cov), cov)
    ds = build_dataset([season], cov, model_failure_receiver=False, attach=False)
    mcfg = MCMCConfig(chains=2, warmup=300, iters=400, seed=9)
    return season, ds, mcfg, run_mcmc(ds.data, ds.layout, PriorSpec(), mcfg)


def test_seed_determinism_and_exchangeability(small_fit):
    season, ds, mcfg, chains = small_fit
    again = run_mcmc(ds.data, ds.layout, PriorSpec(), mcfg)
    assert np.array_equal(again.fixed, chains.fixed) and np.array_equal(again.eta, chains.eta)
    swapped = run_mcmc(ds.data, ds.layout, PriorSpec(), mcfg, chain_keys=[1, 0])
    assert np.array_equal(swapped.fixed[0], chains.fixed[1])
    assert np.array_equal(swapped.fixed[1], chains.fixed[0])
    assert np.array_equal(swapped.corr[::-1], chains.corr)


def test_parallel_chains_identical(small_fit):
    _, ds, mcfg, chains = small_fit
    par = run_mcmc(ds.data, ds.layout, PriorSpec(), replace(mcfg, threads=2))
    assert np.array_equal(par.fixed, chains.fixed) and np.array_equal(par.sd, chains.sd)


def test_covariance_draws_valid(small_fit):
    chains = small_fit[3]
    assert np.all(chains.sd > 0)
    for c in range(chains.n_chains):
        for d in range(chains.n_draws):
            _, _, spec = chains.params_at(c, d)
            assert np.all(np.linalg.eigvalsh(spec.matrix) > 0)


def test_summary_lists_each_parameter_once(small_fit):
    chains = small_fit[3]
    s = posterior_summary(chains)
    layout = chains.layout
    assert s.names == layout.table_names()
    assert len(set(s.names)) == len(s.names)
    assert s.names[:len(layout.success)] == [f"alpha[{n}]" for n in layout.success]
    assert set(layout.table_fixed_names()) <= set(s.names)
    # Only active random-effect components are reported.
    assert "sigma[fail_pass]" not in s.names and "sigma[success]" in s.names


def test_update_with_same_data_continues_target(small_fit):
    _, ds, mcfg, chains = small_fit
    with pytest.warns(RuntimeWarning):  # short chains are not converged
        upd = update_posterior(chains, ds.data, ds.layout, mcfg)
    assert upd.generation == 1 and upd.data_digest == chains.data_digest
    for name in ("alpha[air]", "omega[winning]", "gamma[graph_distance]"):
        a, b = chains.draws(name), upd.draws(name)
        se = math.sqrt(a.var() / ess(a) + b.var() / ess(b))
        assert abs(a.mean() - b.mean()) <= 4 * se


def test_update_spawns_new_units(small_fit):
    _, ds, mcfg, chains = small_fit
    layout = ds.layout.with_units(ds.layout.units + ("NEW",))
    data = compile_logs(ds.logs, ds.likelihood, layout.units)
    with pytest.warns(RuntimeWarning):
        upd = update_posterior(chains, data, layout, replace(mcfg, warmup=50, iters=50))
    assert upd.eta.shape[2] == len(ds.layout.units) + 1
    with pytest.raises(Exception):
        update_posterior(chains, data, ds.layout.with_units(("NEW",) + ds.layout.units), mcfg)


def test_store_round_trip(small_fit, tmp_path):
    chains = small_fit[3]
    save_run(chains, tmp_path)
    back = load_run(tmp_path)
    for f in ("fixed", "eta", "sd", "corr"):
        assert np.array_equal(getattr(back, f), getattr(chains, f))
    assert back.config == chains.config and back.prior == chains.prior
    assert format_chains(back) == format_chains(chains)
    text = format_chains(chains)
    assert text.splitlines()[1].split(",")[:3] == ["chain", "draw", chains.layout.all_names()[0]]
    with pytest.raises(RunDirError):
        parse_chains(text.replace("# ballnet-chains/1", "# other"), chains.layout, chains.n_chains)
    with pytest.raises(RunDirError):
        load_run(tmp_path / "missing")


def test_ppc_report_shape_and_degenerate_draw(small_fit):
    season, ds, mcfg, chains = small_fit
    rep = posterior_predictive_check(chains, ds.logs, rngmod.stream(1, 0))
    assert {(r.statistic, r.team) for r in rep.records} == {
        (s, t) for s in ("mean_waiting_time", "success_proportion") for t in ("home", "away")}
    assert len(rep.records) == 4
    one = posterior_predictive_check(chains, ds.logs, rngmod.stream(1, 0), max_draws=1)
    assert one.n_draws == 1
    for r in one.records:
        assert r.lower == r.median == r.upper
    # Bands are reproducible for a fixed stream.
    again = posterior_predictive_check(chains, ds.logs, rngmod.stream(1, 0))
    assert again.to_csv() == rep.to_csv()


def test_concat_compiled_matches_joint_compile(small_fit):
    season, ds, _, _ = small_fit
    a, b = season.events[:80], season.events[80:]
    first = replace(season, events=a, stop_time=a[-1].time)
    shifted = tuple(replace(ev, index=k + 1) for k, ev in enumerate(b))
    second = replace(season, events=shifted, start_time=a[-1].time, initial_holder=a[-1].receiver)
    lc = ds.likelihood
    joint = compile_logs([first, second], lc, ds.layout.units)
    both = concat_compiled(compile_logs([first], lc, ds.layout.units), compile_logs([second], lc, ds.layout.units))
    assert np.array_equal(joint.hold_dur, both.hold_dur)
    assert np.array_equal(joint.succ.chosen, both.succ.chosen)
