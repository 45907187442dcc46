"""Exact log-likelihood of possession logs, its gradient, and MAP estimation.

Logs are first compiled into padded arrays (:class:`CompiledData`), one block
per likelihood factor:

* holding times: Exponential terms plus the censored final possession,
* pass success: logistic terms,
* receiver given success / failure: multinomial-logit terms over candidates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize
from scipy.special import expit, logsumexp

from .model import (
    CovarianceSpec,
    DimensionError,
    MAX_LINEAR_PREDICTOR,
    MatchLog,
    ModelError,
    ModelParams,
    PredictorOverflowError,
    RandomEffects,
    holding_predictor,
)


class LikelihoodError(ModelError):
    pass


@dataclass(frozen=True)
class LikelihoodConfig:
    dims: tuple[int, int, int, int]
    model_failure_receiver: bool = True
    random_effect_unit: str = "position"

    def __post_init__(self):
        if self.random_effect_unit not in ("player", "position"):
            raise ModelError("random_effect_unit must be 'player' or 'position'")
        if any(d < 0 for d in self.dims) or len(self.dims) != 4:
            raise ModelError("dims must be four non-negative integers")


@dataclass
class PassBlock:
    """Multinomial-logit rows: covariates ``x`` (rows, K, d), candidate units
    ``units`` (rows, K), validity ``mask`` and the chosen column per row."""

    x: np.ndarray
    units: np.ndarray
    mask: np.ndarray
    chosen: np.ndarray
    where: list = field(default_factory=list, repr=False)

    @property
    def rows(self) -> int:
        return self.x.shape[0]


@dataclass
class CompiledData:
    dims: tuple[int, int, int, int]
    n_units: int
    hold_c: np.ndarray
    hold_dur: np.ndarray
    hold_event: np.ndarray
    x1: np.ndarray
    unit1: np.ndarray
    s: np.ndarray
    succ: PassBlock
    fail: PassBlock
    model_failure_receiver: bool
    hold_where: list = field(default_factory=list, repr=False)
    event_where: list = field(default_factory=list, repr=False)

    @property
    def n_events(self) -> int:
        return self.x1.shape[0]


def _pass_block(rows, d: int) -> PassBlock:
    if not rows:
        return PassBlock(np.zeros((0, 1, d)), np.zeros((0, 1), int), np.zeros((0, 1), bool),
                         np.zeros(0, int), [])
    K = max(len(r[1]) for r in rows)
    n = len(rows)
    x = np.zeros((n, K, d))
    units = np.zeros((n, K), int)
    mask = np.zeros((n, K), bool)
    chosen = np.zeros(n, int)
    where = []
    for i, (xr, ur, ch, loc) in enumerate(rows):
        k = len(ur)
        x[i, :k] = xr
        units[i, :k] = ur
        mask[i, :k] = True
        chosen[i] = ch
        where.append(loc)
    return PassBlock(x, units, mask, chosen, where)


def compile_logs(logs: Sequence[MatchLog], cfg: LikelihoodConfig, units: Sequence[str]) -> CompiledData:
    """Flatten logs (with covariates attached) into likelihood arrays."""
    p, d1, d2, d3 = cfg.dims
    umap = {u: k for k, u in enumerate(units)}

    def unit(player) -> int:
        key = player.unit(cfg.random_effect_unit)
        try:
            return umap[key]
        except KeyError:
            raise LikelihoodError(f"no random-effect row for unit {key!r}") from None

    hold_c, hold_dur, hold_event, hold_where = [], [], [], []
    x1, unit1, s, event_where = [], [], [], []
    succ_rows, fail_rows = [], []
    for li, log in enumerate(logs):
        for ev in log.events:
            cov = ev.covariates
            if cov is None:
                raise LikelihoodError(f"log {log.match_id} event {ev.index}: covariates not attached")
            if cov.c.size != p or cov.x1.size != d1:
                raise DimensionError(
                    f"log {log.match_id} event {ev.index}: covariate sizes "
                    f"({cov.c.size}, {cov.x1.size}) do not match dims ({p}, {d1})"
                )
            loc = (li, log.match_id, ev.index)
            hold_c.append(cov.c)
            hold_dur.append(ev.holding_time)
            hold_event.append(1.0)
            hold_where.append(loc)
            x1.append(cov.x1)
            unit1.append(unit(ev.passer))
            s.append(1.0 if ev.success else 0.0)
            event_where.append(loc)
            roster = log.roster_at(ev.time - ev.holding_time)
            if ev.success:
                cands = cov.succ_candidates or tuple(j.index for j in roster.teammates(ev.passer))
                xr, d = cov.x3, d3
                bucket = succ_rows
            elif cfg.model_failure_receiver:
                cands = cov.fail_candidates or tuple(j.index for j in roster.opponents(ev.passer))
                xr, d = cov.x2, d2
                bucket = fail_rows
            else:
                continue
            xr = np.asarray(xr, dtype=float).reshape(len(cands), d)
            try:
                ch = cands.index(ev.receiver.index)
            except ValueError:
                raise LikelihoodError(
                    f"log {log.match_id} event {ev.index}: receiver not among candidates"
                ) from None
            ur = [unit(roster.by_index(j)) for j in cands]
            bucket.append((xr, ur, ch, loc))
        tail = log.stop_time - log.last_time
        if tail < 0:
            raise LikelihoodError(f"log {log.match_id}: events run past the stop time")
        if tail > 0:
            c = log.censor_c
            if c is None:
                raise LikelihoodError(f"log {log.match_id}: censored possession has no covariates")
            hold_c.append(np.asarray(c, dtype=float))
            hold_dur.append(tail)
            hold_event.append(0.0)
            hold_where.append((li, log.match_id, len(log.events) + 1))

    def arr(rows, width):
        return np.asarray(rows, dtype=float).reshape(len(rows), width)

    return CompiledData(
        dims=cfg.dims,
        n_units=len(units),
        hold_c=arr(hold_c, p),
        hold_dur=np.asarray(hold_dur, dtype=float),
        hold_event=np.asarray(hold_event, dtype=float),
        x1=arr(x1, d1),
        unit1=np.asarray(unit1, dtype=int),
        s=np.asarray(s, dtype=float),
        succ=_pass_block(succ_rows, d3),
        fail=_pass_block(fail_rows, d2),
        model_failure_receiver=cfg.model_failure_receiver,
        hold_where=hold_where,
        event_where=event_where,
    )


def concat_compiled(a: CompiledData, b: CompiledData) -> CompiledData:
    """Stack two compiled data sets with identical dims and units."""
    if a.dims != b.dims or a.n_units != b.n_units:
        raise DimensionError("cannot concatenate compiled data with different layouts")

    def cat_block(x: PassBlock, y: PassBlock) -> PassBlock:
        K = max(x.x.shape[1], y.x.shape[1])

        def pad(blk):
            extra = K - blk.x.shape[1]
            return (np.pad(blk.x, ((0, 0), (0, extra), (0, 0))),
                    np.pad(blk.units, ((0, 0), (0, extra))),
                    np.pad(blk.mask, ((0, 0), (0, extra))))
        xx, xu, xm = pad(x)
        yx, yu, ym = pad(y)
        return PassBlock(np.concatenate([xx, yx]), np.concatenate([xu, yu]),
                         np.concatenate([xm, ym]), np.concatenate([x.chosen, y.chosen]),
                         x.where + y.where)

    return CompiledData(
        dims=a.dims, n_units=a.n_units,
        hold_c=np.concatenate([a.hold_c, b.hold_c]),
        hold_dur=np.concatenate([a.hold_dur, b.hold_dur]),
        hold_event=np.concatenate([a.hold_event, b.hold_event]),
        x1=np.concatenate([a.x1, b.x1]),
        unit1=np.concatenate([a.unit1, b.unit1]),
        s=np.concatenate([a.s, b.s]),
        succ=cat_block(a.succ, b.succ),
        fail=cat_block(a.fail, b.fail),
        model_failure_receiver=a.model_failure_receiver,
        hold_where=a.hold_where + b.hold_where,
        event_where=a.event_where + b.event_where,
    )


# ---------------------------------------------------------------------------
# Factor evaluation


def _guard(z: np.ndarray, where: list, what: str) -> None:
    if z.size == 0:
        return
    bad = ~np.isfinite(z) | (np.abs(z) > MAX_LINEAR_PREDICTOR)
    if bad.any():
        r = int(np.flatnonzero(bad.reshape(len(where), -1).any(axis=1))[0]) if where else 0
        loc = where[r] if where else "?"
        raise PredictorOverflowError(f"{what} linear predictor out of range at (log, match, event) {loc}")


def holding_loglik(data: CompiledData, omega: np.ndarray, check: bool = True) -> float:
    z = holding_predictor(data.hold_c, omega)
    if check:
        _guard(z, data.hold_where, "holding")
    return float(np.sum(data.hold_event * z - np.exp(z) * data.hold_dur))


def success_loglik(data: CompiledData, alpha: np.ndarray, eta1: np.ndarray, check: bool = True) -> float:
    z = data.x1 @ alpha + eta1[data.unit1]
    if check:
        _guard(z, data.event_where, "success")
    return float(np.sum(data.s * z - np.logaddexp(0.0, z)))


def success_terms(data: CompiledData, alpha: np.ndarray, eta1: np.ndarray) -> np.ndarray:
    z = data.x1 @ alpha + eta1[data.unit1]
    return data.s * z - np.logaddexp(0.0, z)


def pass_loglik(block: PassBlock, coef: np.ndarray, eta: np.ndarray, check: bool = True) -> float:
    if block.rows == 0:
        return 0.0
    z = block.x @ coef + eta[block.units]
    if check:
        _guard(np.where(block.mask, z, 0.0), block.where, "receiver")
    z = np.where(block.mask, z, -np.inf)
    chosen = z[np.arange(block.rows), block.chosen]
    return float(np.sum(chosen - logsumexp(z, axis=1)))


def total_loglik(data: CompiledData, params: ModelParams, eta: np.ndarray, check: bool = True) -> float:
    ll = holding_loglik(data, params.omega, check)
    ll += success_loglik(data, params.alpha, eta[:, 0], check)
    ll += pass_loglik(data.succ, params.gamma, eta[:, 2], check)
    if data.model_failure_receiver:
        ll += pass_loglik(data.fail, params.beta, eta[:, 1], check)
    if not np.isfinite(ll):
        raise LikelihoodError("non-finite log-likelihood")
    return ll


def _pass_grad(block: PassBlock, coef, eta, n_units):
    d = coef.size
    if block.rows == 0:
        return np.zeros(d), np.zeros(n_units)
    z = np.where(block.mask, block.x @ coef + eta[block.units], -np.inf)
    prob = np.exp(z - logsumexp(z, axis=1, keepdims=True))
    r = np.arange(block.rows)
    g_coef = block.x[r, block.chosen].sum(axis=0) - np.einsum("rk,rkd->d", prob, block.x)
    g_eta = np.bincount(block.units[r, block.chosen], minlength=n_units).astype(float)
    g_eta -= np.bincount(block.units.ravel(), weights=prob.ravel(), minlength=n_units)
    return g_coef, g_eta


def total_grad(data: CompiledData, params: ModelParams, eta: np.ndarray):
    """Gradient of :func:`total_loglik` as ``(ModelParams, eta_grad)``."""
    U = data.n_units
    z = holding_predictor(data.hold_c, params.omega)
    g_omega = data.hold_c.T @ (data.hold_event - np.exp(z) * data.hold_dur)
    zs = data.x1 @ params.alpha + eta[data.unit1, 0]
    resid = data.s - expit(zs)
    g_alpha = data.x1.T @ resid
    g_eta = np.zeros((U, 3))
    g_eta[:, 0] = np.bincount(data.unit1, weights=resid, minlength=U)
    g_gamma, g_eta[:, 2] = _pass_grad(data.succ, params.gamma, eta[:, 2], U)
    if data.model_failure_receiver:
        g_beta, g_eta[:, 1] = _pass_grad(data.fail, params.beta, eta[:, 1], U)
    else:
        g_beta = np.zeros(params.beta.size)
    return ModelParams(g_omega, g_alpha, g_beta, g_gamma), g_eta


# ---------------------------------------------------------------------------
# Public API on logs


def _units_for(effects: RandomEffects, cfg: LikelihoodConfig) -> tuple[str, ...]:
    if effects.by != cfg.random_effect_unit:
        raise ModelError(
            f"random effects are per {effects.by} but config says {cfg.random_effect_unit}"
        )
    return effects.units


def match_log_likelihood(params: ModelParams, effects: RandomEffects, log: MatchLog,
                         cfg: LikelihoodConfig) -> float:
    if params.dims != cfg.dims:
        raise DimensionError(f"parameter dims {params.dims} != config dims {cfg.dims}")
    data = compile_logs([log], cfg, _units_for(effects, cfg))
    return total_loglik(data, params, effects.eta)


def season_log_likelihood(params: ModelParams, effects: RandomEffects, logs: Sequence[MatchLog],
                          cfg: LikelihoodConfig) -> float:
    """Sum of per-match log-likelihoods in list order.

    History-dependent covariates are whatever was attached to the logs (see
    :func:`ballnet.eventlog.attach_covariates` for the match/season scopes).
    """
    return float(sum(match_log_likelihood(params, effects, log, cfg) for log in logs))


def grad_log_likelihood(params: ModelParams, effects: RandomEffects, logs: Sequence[MatchLog],
                        cfg: LikelihoodConfig):
    data = compile_logs(logs, cfg, _units_for(effects, cfg))
    return total_grad(data, params, effects.eta)


# ---------------------------------------------------------------------------
# MAP


@dataclass(frozen=True)
class MapResult:
    params: ModelParams
    effects: RandomEffects
    converged: bool
    iterations: int
    grad_norm: float
    objective: float
    message: str


def _mvn_prec(cov: CovarianceSpec):
    return np.linalg.inv(cov.matrix)


def map_objective(data: CompiledData, dims, fixed_sd: float, prec: np.ndarray):
    """Negative log posterior (up to a constant) over ``(fixed effects, eta)``
    with the random-effect covariance held fixed; returns ``f(v) -> (value, grad)``."""
    nfix = sum(dims)
    U = data.n_units

    def f(v):
        params = ModelParams.from_flat(v[:nfix], dims)
        eta = v[nfix:].reshape(U, 3)
        try:
            ll = total_loglik(data, params, eta)
        except ModelError:
            return np.inf, np.zeros_like(v)
        gp, ge = total_grad(data, params, eta)
        fix = v[:nfix]
        lp = -0.5 * np.sum(fix**2) / fixed_sd**2 - 0.5 * np.einsum("ui,ij,uj->", eta, prec, eta)
        g = np.concatenate([gp.flat() - fix / fixed_sd**2, (ge - eta @ prec).ravel()])
        return -(ll + lp), -g

    return f


def map_estimate(
    data: CompiledData,
    fixed_sd: float = 10.0,
    re_cov: CovarianceSpec | None = None,
    init: np.ndarray | None = None,
    gtol: float = 1e-6,
    max_iter: int = 500,
    units: Sequence[str] | None = None,
    unit_by: str = "position",
):
    """Quasi-Newton MAP with the random-effect covariance fixed.

    Stops when the max-norm of the gradient is <= ``gtol`` or after
    ``max_iter`` iterations; a few Newton steps polish an L-BFGS result that
    stalls just above the tolerance.
    """
    dims = data.dims
    nfix = sum(dims)
    U = data.n_units
    cov = re_cov or CovarianceSpec.identity()
    prec = _mvn_prec(cov)
    f = map_objective(data, dims, fixed_sd, prec)
    x0 = np.zeros(nfix + 3 * U) if init is None else np.asarray(init, dtype=float).copy()
    val0, _ = f(x0)
    if not np.isfinite(val0):
        raise LikelihoodError("non-finite objective at the initial point")
    res = optimize.minimize(
        f, x0, jac=True, method="L-BFGS-B",
        options={"maxiter": max_iter, "gtol": gtol, "ftol": 1e-16, "maxcor": 30},
    )
    x = res.x
    val, g = f(x)
    iters = int(res.nit)
    message = str(res.message)
    for _ in range(20):
        if np.max(np.abs(g)) <= gtol or iters >= max_iter:
            break
        H = _fd_hessian(f, x)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            message = "newton polish: singular Hessian"
            break
        t = 1.0
        while t > 1e-8:
            nv, ng = f(x - t * step)
            if np.isfinite(nv) and nv <= val + 1e-12 * abs(val):
                break
            t *= 0.5
        else:
            message = "line search failed"
            break
        x, val, g = x - t * step, nv, ng
        iters += 1
    gn = float(np.max(np.abs(g))) if g.size else 0.0
    params = ModelParams.from_flat(x[:nfix], dims)
    names = tuple(units) if units is not None else tuple(str(k) for k in range(U))
    effects = RandomEffects(x[nfix:].reshape(U, 3), names, unit_by)
    return MapResult(params, effects, gn <= gtol, iters, gn, float(-val), message)


def _fd_hessian(f, x, step: float = 1e-5) -> np.ndarray:
    n = x.size
    H = np.zeros((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = step
        H[:, i] = (f(x + e)[1] - f(x - e)[1]) / (2 * step)
    return 0.5 * (H + H.T)
