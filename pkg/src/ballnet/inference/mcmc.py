"""Metropolis-within-Gibbs sampler for the possession model.

One sweep updates, in order:

1. holding coefficients ``omega``
2. success coefficients ``alpha``, then the per-unit success effects, then a
   joint intercept/effect shift that leaves the likelihood unchanged
3. failure-receiver coefficients ``beta`` and per-unit effects
4. success-receiver coefficients ``gamma`` and per-unit effects
5. the random-effect covariance (log standard deviations and partial
   correlations, jointly)

Fixed-effect blocks use random-walk proposals with a full covariance that is
seeded from the curvature at the MAP and re-estimated during warmup; every
step size is tuned by Robbins-Monro during warmup only and frozen afterwards.
Components that the likelihood does not touch (the failure-receiver effects in
team-scoped fits) are drawn exactly from their Gaussian conditionals.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .. import rng as rngmod
from ..likelihood import CompiledData, PassBlock, map_estimate, map_objective, _fd_hessian
from ..model import MAX_LINEAR_PREDICTOR, CovarianceSpec, ModelError, ModelParams, RandomEffects, holding_predictor
from .layout import CORR_PAIRS, ParameterLayout
from .priors import LOG_2PI, PriorSpec, cpc_cholesky, cpc_corr, corr_to_cpc

BLOCKS = ("omega", "alpha", "beta", "gamma", "eta_success", "eta_fail_pass", "eta_pass", "covariance",
          "covariance_whitened")


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class MCMCConfig:
    chains: int = 4
    warmup: int = 2000
    iters: int = 5000
    thin: int = 1
    seed: int = 0
    init: str = "map"
    init_scale: float = 1.0
    target_accept: float = 0.3
    threads: int = 1

    def __post_init__(self):
        if self.chains < 1 or self.iters < 1 or self.warmup < 0 or self.thin < 1:
            raise ModelError("chains, iters and thin must be >= 1 and warmup >= 0")
        if self.init not in ("map", "prior", "zero"):
            raise ModelError("init must be 'map', 'prior' or 'zero'")
        if not 0.25 <= self.target_accept <= 0.45:
            raise ModelError("target_accept must lie in [0.25, 0.45]")
        if not 0 <= self.seed < 2**64:
            raise ModelError("seed must be an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("chains", "warmup", "iters", "thin", "seed", "init", "init_scale", "target_accept")}


# ---------------------------------------------------------------------------
# Data prepared for fast block updates


class _Receivers:
    """Multinomial-logit rows arranged for coefficient and per-unit updates."""

    def __init__(self, block: PassBlock, n_units: int):
        self.R, self.K = block.units.shape if block.rows else (0, 0)
        self.d = block.x.shape[2]
        self.x2d = block.x.reshape(self.R * self.K, self.d)
        self.units = block.units
        self.mask = block.mask
        self.neg = np.where(block.mask, 0.0, -np.inf)
        self.rows = np.arange(self.R)
        self.chosen = block.chosen
        self.chosen_flat = self.rows * self.K + block.chosen
        self.full = bool(block.mask.all())
        self.ones = np.ones(self.K)
        chosen_units = block.units[self.rows, block.chosen] if self.R else np.zeros(0, int)
        self.n_chosen = np.bincount(chosen_units, minlength=n_units).astype(float)
        self.flat_key = (np.repeat(self.rows, self.K) * n_units + block.units.ravel())
        self.n_units = n_units
        self.unit_rows = []
        self.unit_entries = []
        for u in range(n_units):
            hit = (block.units == u) & block.mask
            self.unit_rows.append(np.flatnonzero(hit.any(axis=1)))
            self.unit_entries.append(np.flatnonzero(hit.ravel()))

    def base(self, coef: np.ndarray) -> np.ndarray:
        return (self.x2d @ coef).reshape(self.R, self.K)

    def row_weights(self, z: np.ndarray):
        """``(exp(z - shift), row sums, shift)`` with a shared shift when that
        is numerically safe and per-row shifts otherwise."""
        m = z.max()
        e = np.exp(z - m)
        D = e @ self.ones
        if D.min() > 1e-250:
            return e, D, np.full(self.R, m)
        mr = z.max(axis=1)
        e = np.exp(z - mr[:, None])
        return e, e @ self.ones, mr

    def loglik(self, base: np.ndarray, eta_col: np.ndarray) -> float:
        if self.R == 0:
            return 0.0
        z = base + eta_col[self.units]
        # Padding entries hold a real unit's effect, so checking them is harmless.
        if max(z.max(), -z.min()) > MAX_LINEAR_PREDICTOR:
            return -np.inf
        if not self.full:
            z += self.neg
        _, D, m = self.row_weights(z)
        return float(z.ravel()[self.chosen_flat].sum() - np.log(D).sum() - m.sum())


class _Target:
    """Compiled data plus the prior, arranged for the sampler."""

    def __init__(self, data: CompiledData, prior: PriorSpec):
        self.data = data
        self.prior = prior
        self.dims = data.dims
        self.U = data.n_units
        # Holding rows collapse to distinct covariate vectors.
        if data.hold_c.shape[0]:
            uniq, inv = np.unique(data.hold_c, axis=0, return_inverse=True)
            inv = inv.ravel()
            self.hold_c = uniq
            self.hold_events = np.bincount(inv, weights=data.hold_event, minlength=len(uniq))
            self.hold_exposure = np.bincount(inv, weights=data.hold_dur, minlength=len(uniq))
        else:
            self.hold_c = np.zeros((0, self.dims[0]))
            self.hold_events = self.hold_exposure = np.zeros(0)
        self.x1 = data.x1
        self.unit1 = data.unit1
        self.s = data.s
        ones = np.flatnonzero(np.all(data.x1 == 1.0, axis=0)) if data.x1.shape[0] else np.zeros(0, int)
        # Intercept column for the shift move (an all-ones column).
        self.intercept = int(ones[0]) if ones.size else None
        self.succ = _Receivers(data.succ, self.U)
        self.fail_modeled = data.model_failure_receiver
        self.fail = _Receivers(data.fail, self.U) if data.model_failure_receiver else None
        self.sd = prior.fixed_effect_sd

    def hold_ll(self, omega: np.ndarray) -> float:
        if self.hold_c.shape[0] == 0:
            return 0.0
        z = holding_predictor(self.hold_c, omega)
        if np.max(np.abs(z)) > MAX_LINEAR_PREDICTOR:
            return -np.inf
        return float(self.hold_events @ z - self.hold_exposure @ np.exp(z))

    def succ_terms(self, xa: np.ndarray, eta1: np.ndarray) -> np.ndarray | None:
        z = xa + eta1[self.unit1]
        if z.size and np.max(np.abs(z)) > MAX_LINEAR_PREDICTOR:
            return None
        return self.s * z - np.logaddexp(0.0, z)

    def gauss(self, x: np.ndarray) -> float:
        return float(-0.5 * np.dot(x, x) / self.sd**2)


# ---------------------------------------------------------------------------
# Chain state and adaptation


@dataclass
class ChainState:
    omega: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    eta: np.ndarray
    log_sd: np.ndarray
    y: np.ndarray

    def copy(self) -> "ChainState":
        return ChainState(*(np.array(getattr(self, f)) for f in
                            ("omega", "alpha", "beta", "gamma", "eta", "log_sd", "y")))

    def to_dict(self) -> dict:
        return {f: np.asarray(getattr(self, f)).tolist() for f in
                ("omega", "alpha", "beta", "gamma", "eta", "log_sd", "y")}

    @classmethod
    def from_dict(cls, d, n_units: int) -> "ChainState":
        return cls(*(np.asarray(d[f], dtype=float) for f in ("omega", "alpha", "beta", "gamma")),
                   np.asarray(d["eta"], dtype=float).reshape(n_units, 3),
                   np.asarray(d["log_sd"], dtype=float), np.asarray(d["y"], dtype=float))


@dataclass
class RWBlock:
    """Random-walk Metropolis block with an adaptive covariance and scale."""

    name: str
    cov: np.ndarray
    log_scale: float
    target: float = 0.3
    chol: np.ndarray = field(init=False, repr=False)
    accepted: int = 0
    proposed: int = 0

    def __post_init__(self):
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        self.chol = _safe_chol(self.cov)

    @classmethod
    def fresh(cls, name: str, cov: np.ndarray, target: float) -> "RWBlock":
        d = max(np.atleast_2d(cov).shape[0], 1)
        return cls(name, cov, float(np.log(2.38 / np.sqrt(d))), target if d > 1 else 0.44)

    def propose(self, x: np.ndarray, rng) -> np.ndarray:
        return x + np.exp(self.log_scale) * (self.chol @ rng.standard_normal(x.size))

    def adapt(self, prob: float, t: int) -> None:
        self.log_scale += (prob - self.target) / (t + 1.0) ** 0.6

    def set_cov(self, cov: np.ndarray) -> None:
        self.cov = cov
        self.chol = _safe_chol(cov)

    def to_dict(self) -> dict:
        return {"name": self.name, "cov": self.cov.tolist(), "log_scale": self.log_scale,
                "target": self.target}

    @classmethod
    def from_dict(cls, d) -> "RWBlock":
        return cls(d["name"], np.asarray(d["cov"], dtype=float), float(d["log_scale"]), float(d["target"]))


def _safe_chol(cov: np.ndarray) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    d = cov.shape[0]
    if d == 0:
        return np.zeros((0, 0))
    jitter = 1e-12 * max(np.trace(cov) / d, 1e-12)
    for _ in range(12):
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(d))
        except np.linalg.LinAlgError:
            jitter *= 10.0
    w, v = np.linalg.eigh(cov)
    return v @ np.diag(np.sqrt(np.clip(w, 1e-12, None)))


@dataclass
class Adaptation:
    blocks: dict
    eta_log_step: np.ndarray  # (U, 3)
    shift_log_step: np.ndarray  # intercept shift, eta_fail shift, eta_pass shift
    scale_log_step: np.ndarray  # joint (sd, effect column) rescaling, per component

    def to_dict(self) -> dict:
        return {"blocks": {k: b.to_dict() for k, b in self.blocks.items()},
                "eta_log_step": self.eta_log_step.tolist(),
                "shift_log_step": self.shift_log_step.tolist(),
                "scale_log_step": self.scale_log_step.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Adaptation":
        return cls({k: RWBlock.from_dict(b) for k, b in d["blocks"].items()},
                   np.asarray(d["eta_log_step"], dtype=float).reshape(-1, 3),
                   np.asarray(d["shift_log_step"], dtype=float),
                   np.asarray(d["scale_log_step"], dtype=float))

    def copy(self) -> "Adaptation":
        return Adaptation.from_dict(self.to_dict())


# ---------------------------------------------------------------------------
# The sampler for one chain


class _Chain:
    def __init__(self, target: _Target, state: ChainState, adapt: Adaptation, cfg: MCMCConfig, rng):
        self.t = target
        self.st = state
        self.ad = adapt
        self.cfg = cfg
        self.rng = rng
        self.stats = {b: [0, 0] for b in BLOCKS}
        self._refresh_cov()
        self._xa = target.x1 @ state.alpha
        self._sbase = target.succ.base(state.gamma)
        self._fbase = target.fail.base(state.beta) if target.fail is not None else None

    # -- covariance helpers
    def _refresh_cov(self):
        st = self.st
        sd = np.exp(st.log_sd)
        L = sd[:, None] * cpc_cholesky(np.tanh(st.y))
        self.sigma_chol = L
        Linv = np.linalg.inv(L)
        self.prec = Linv.T @ Linv
        self.half_logdet = float(np.sum(np.log(np.diag(L))))

    def _eta_prior_delta(self, col: int, delta: np.ndarray, units=slice(None)) -> np.ndarray:
        P = self.prec
        Pe = self.st.eta[units] @ P[:, col]
        return -0.5 * (2.0 * delta * Pe + delta * delta * P[col, col])

    def _accept(self, log_ratio: float) -> bool:
        return bool(np.log(self.rng.random()) < log_ratio)

    def _count(self, block: str, ok: bool, n: int = 1):
        self.stats[block][0] += int(ok)
        self.stats[block][1] += n

    # -- fixed-effect blocks
    def _rw(self, name: str, x: np.ndarray, logpost, current: float, warm: int | None):
        blk = self.ad.blocks[name]
        if x.size == 0:
            return x, current
        prop = blk.propose(x, self.rng)
        new = logpost(prop)
        ratio = new - current if np.isfinite(new) else -np.inf
        ok = self._accept(ratio)
        if warm is not None:
            blk.adapt(float(np.exp(min(0.0, ratio))), warm)
        self._count(name, ok)
        return (prop, new) if ok else (x, current)

    def step_omega(self, warm):
        t = self.t
        f = lambda w: t.hold_ll(w) + t.gauss(w)
        self.st.omega, _ = self._rw("omega", self.st.omega, f, f(self.st.omega), warm)

    def step_alpha(self, warm):
        t, st = self.t, self.st
        eta1 = st.eta[:, 0]

        def f(a):
            terms = t.succ_terms(t.x1 @ a, eta1)
            return -np.inf if terms is None else float(terms.sum()) + t.gauss(a)

        st.alpha, _ = self._rw("alpha", st.alpha, f, f(st.alpha), warm)
        self._xa = t.x1 @ st.alpha

    def step_eta_success(self, warm):
        t, st, U = self.t, self.st, self.t.U
        if U == 0:
            return
        cur = t.succ_terms(self._xa, st.eta[:, 0])
        step = np.exp(self.ad.eta_log_step[:, 0])
        delta = step * self.rng.standard_normal(U)
        prop = st.eta[:, 0] + delta
        new = t.succ_terms(self._xa, prop)
        if new is None:
            dll = np.full(U, -np.inf)
        else:
            dll = np.bincount(t.unit1, weights=new - cur, minlength=U)
        ratio = dll + self._eta_prior_delta(0, delta)
        logu = np.log(self.rng.random(U))
        ok = logu < ratio
        st.eta[ok, 0] = prop[ok]
        if warm is not None:
            prob = np.exp(np.minimum(0.0, np.nan_to_num(ratio, nan=-np.inf)))
            self.ad.eta_log_step[:, 0] += (prob - 0.44) / (warm + 1.0) ** 0.6
        self.stats["eta_success"][0] += int(ok.sum())
        self.stats["eta_success"][1] += U

    def step_intercept_shift(self, warm):
        """Move the intercept up and every success effect down by the same
        amount; only the prior changes."""
        t, st = self.t, self.st
        k = t.intercept
        if k is None or t.U == 0:
            return
        step = np.exp(self.ad.shift_log_step[0])
        d = step * self.rng.standard_normal()
        a_old = st.alpha[k]
        dprior = -0.5 * ((a_old + d) ** 2 - a_old**2) / t.sd**2
        dprior += float(np.sum(self._eta_prior_delta(0, np.full(t.U, -d))))
        ok = self._accept(dprior)
        if ok:
            st.alpha[k] += d
            st.eta[:, 0] -= d
            self._xa = self._xa + d
        if warm is not None:
            self.ad.shift_log_step[0] += (np.exp(min(0.0, dprior)) - 0.44) / (warm + 1.0) ** 0.6

    def _coef_block(self, name: str, recv: _Receivers, coef: np.ndarray, col: int, warm):
        st = self.st
        eta_col = st.eta[:, col]
        f = lambda c: recv.loglik(recv.base(c), eta_col) + self.t.gauss(c)
        new, _ = self._rw(name, coef, f, f(coef), warm)
        return new

    def _unit_updates(self, name: str, recv: _Receivers, base: np.ndarray, col: int, warm):
        """Per-unit random-walk updates of one effect column using row-wise
        partial sums, so a proposal never recomputes the full softmax."""
        st, U = self.st, self.t.U
        eta = st.eta
        if recv.R:
            z = base + eta[:, col][recv.units] + recv.neg
            e, D, _ = recv.row_weights(z)
            # W[u, r]: summed weight of unit u's candidates in row r.
            W = np.bincount(recv.flat_key, weights=e.ravel(), minlength=recv.R * U).reshape(recv.R, U).T.copy()
            base_flat = base.ravel()
            reach = np.array([np.max(np.abs(base_flat[ent])) if ent.size else 0.0
                              for ent in recv.unit_entries])
        steps = np.exp(self.ad.eta_log_step[:, col])
        normals = self.rng.standard_normal(U)
        log_u = np.log(self.rng.random(U))
        P = self.prec
        Pcol = P[:, col]
        Pkk = P[col, col]
        n_chosen = recv.n_chosen
        acc = 0
        ratios = np.empty(U)
        for u in range(U):
            d = steps[u] * normals[u]
            new = eta[u, col] + d
            ratio = -0.5 * (2.0 * d * float(eta[u] @ Pcol) + d * d * Pkk)
            touched = recv.R and recv.unit_entries[u].size
            if touched:
                if reach[u] + abs(new) > MAX_LINEAR_PREDICTOR and np.max(
                        np.abs(base_flat[recv.unit_entries[u]] + new)) > MAX_LINEAR_PREDICTOR:
                    ratio = -np.inf
                else:
                    f = np.expm1(d)
                    a = W[u]
                    ratio += n_chosen[u] * d - float(np.log1p(a * (f / D)).sum())
            ratios[u] = ratio
            if log_u[u] < ratio:
                eta[u, col] = new
                acc += 1
                if touched:
                    D += a * f
                    W[u] = a * np.exp(d)
        if warm is not None:
            self.ad.eta_log_step[:, col] += (np.exp(np.minimum(0.0, ratios)) - 0.44) / (warm + 1.0) ** 0.6
        self.stats[name][0] += acc
        self.stats[name][1] += U

    def _column_shift(self, col: int, slot: int, warm):
        """Shift one effect column for every unit; receiver likelihoods are
        invariant to this move."""
        t, st = self.t, self.st
        if t.U == 0:
            return
        d = np.exp(self.ad.shift_log_step[slot]) * self.rng.standard_normal()
        ratio = float(np.sum(self._eta_prior_delta(col, np.full(t.U, d))))
        if self._accept(ratio):
            st.eta[:, col] += d
        if warm is not None:
            self.ad.shift_log_step[slot] += (np.exp(min(0.0, ratio)) - 0.44) / (warm + 1.0) ** 0.6

    def _gibbs_column(self, col: int):
        """Exact conditional draw for a column absent from the likelihood."""
        st, U = self.st, self.t.U
        if U == 0:
            return
        P = self.prec
        others = [k for k in range(3) if k != col]
        mean = -(st.eta[:, others] @ P[others, col]) / P[col, col]
        st.eta[:, col] = mean + self.rng.standard_normal(U) / np.sqrt(P[col, col])
        self.stats["eta_fail_pass"][0] += U
        self.stats["eta_fail_pass"][1] += U

    def step_fail(self, warm):
        t, st = self.t, self.st
        if t.fail is None:
            # Prior-only block: exact draws.
            if st.beta.size:
                st.beta = self.rng.standard_normal(st.beta.size) * t.sd
            self._gibbs_column(1)
            return
        st.beta = self._coef_block("beta", t.fail, st.beta, 1, warm)
        self._fbase = t.fail.base(st.beta)
        self._unit_updates("eta_fail_pass", t.fail, self._fbase, 1, warm)
        self._column_shift(1, 1, warm)

    def step_pass(self, warm):
        t, st = self.t, self.st
        st.gamma = self._coef_block("gamma", t.succ, st.gamma, 2, warm)
        self._sbase = t.succ.base(st.gamma)
        self._unit_updates("eta_pass", t.succ, self._sbase, 2, warm)
        self._column_shift(2, 2, warm)

    # -- covariance block
    def hyper_logprior(self, u: np.ndarray) -> float:
        """Log prior of (log sd, partial-correlation angles) including the
        change-of-variables terms."""
        l0, l1, l2, y0, y1, y2 = (float(v) for v in u)
        if max(abs(y0), abs(y1), abs(y2)) > 20 or max(abs(l0), abs(l1), abs(l2)) > 30:
            return -np.inf
        a, b, c = (1.0 - math.tanh(v) ** 2 for v in (y0, y1, y2))
        if min(a, b, c) <= 0:
            return -np.inf
        prior = self.t.prior
        # Exponential prior on each sd plus the log-scale Jacobian.
        lp = -prior.scale_rate * (math.exp(l0) + math.exp(l1) + math.exp(l2)) + l0 + l1 + l2
        la, lb, lc = math.log(a), math.log(b), math.log(c)
        lp += (prior.lkj_shape - 1.0) * (la + lb + lc)
        lp += 0.5 * (la + lb) + la + lb + lc  # partial-correlation Jacobians
        return lp

    @staticmethod
    def _sigma_chol(u: np.ndarray) -> np.ndarray:
        return np.exp(u[:3])[:, None] * cpc_cholesky(np.tanh(u[3:]))

    def cov_logpost(self, u: np.ndarray) -> float:
        lp = self.hyper_logprior(u)
        if self.t.U and np.isfinite(lp):
            L = self._sigma_chol(u)
            eta = self.st.eta
            # Forward substitution, vectorized over units.
            s0 = eta[:, 0] / L[0, 0]
            s1 = (eta[:, 1] - L[1, 0] * s0) / L[1, 1]
            s2 = (eta[:, 2] - L[2, 0] * s0 - L[2, 1] * s1) / L[2, 2]
            quad = float(s0 @ s0 + s1 @ s1 + s2 @ s2)
            lp += -0.5 * quad - self.t.U * math.log(L[0, 0] * L[1, 1] * L[2, 2])
        return lp

    def step_cov(self, warm):
        st = self.st
        u = np.concatenate([st.log_sd, st.y])
        new, _ = self._rw("covariance", u, self.cov_logpost, self.cov_logpost(u), warm)
        st.log_sd, st.y = new[:3].copy(), new[3:].copy()
        self._refresh_cov()

    def step_cov_whitened(self, warm):
        """Covariance update holding the whitened effects fixed.

        Effects move with the covariance (eta' = L' L^-1 eta); the Gaussian
        prior of the whitened effects is unchanged and the Jacobian cancels the
        determinant term, leaving likelihood and hyperprior. Alternating this
        with :meth:`step_cov` mixes whether the data pin the effects down or not.
        """
        st, U = self.st, self.t.U
        if U == 0:
            return
        u = np.concatenate([st.log_sd, st.y])
        blk = self.ad.blocks["covariance_whitened"]
        prop = blk.propose(u, self.rng)
        hyper = self.hyper_logprior(prop)
        if np.isfinite(hyper):
            A = self._sigma_chol(prop) @ np.linalg.inv(self._sigma_chol(u))
            eta_new = st.eta @ A.T
            ratio = hyper - self.hyper_logprior(u)
            for col in range(3):
                ratio += self._column_loglik(col, eta_new[:, col]) - self._column_loglik(col, st.eta[:, col])
            if not np.isfinite(ratio):
                ratio = -np.inf
        else:
            ratio = -np.inf
        ok = self._accept(ratio)
        if ok:
            st.eta = eta_new
            st.log_sd, st.y = prop[:3].copy(), prop[3:].copy()
            self._refresh_cov()
        if warm is not None:
            blk.adapt(float(np.exp(min(0.0, ratio))), warm)
        self._count("covariance_whitened", ok)

    def _column_loglik(self, col: int, eta_col: np.ndarray) -> float:
        t = self.t
        if col == 0:
            terms = t.succ_terms(self._xa, eta_col)
            return -np.inf if terms is None else float(terms.sum())
        if col == 1:
            return 0.0 if t.fail is None else t.fail.loglik(self._fbase, eta_col)
        return t.succ.loglik(self._sbase, eta_col)

    def step_scale(self, col: int, warm):
        """Rescale one standard deviation and its effect column together.

        The Gaussian prior term of the effects is invariant under this move and
        the Jacobian cancels the log-determinant change, so only the
        likelihood, the Exponential prior and the log-scale Jacobian remain.
        This lets the chain travel along the narrow region near sd = 0.
        """
        t, st = self.t, self.st
        if t.U == 0:
            return
        eps = np.exp(self.ad.scale_log_step[col]) * self.rng.standard_normal()
        if abs(st.log_sd[col] + eps) > 30:
            ratio = -np.inf
        else:
            old = st.eta[:, col]
            new = old * np.exp(eps)
            dll = self._column_loglik(col, new) - self._column_loglik(col, old)
            sd = np.exp(st.log_sd[col])
            ratio = dll - t.prior.scale_rate * sd * np.expm1(eps) + eps
        ok = self._accept(ratio)
        if ok:
            st.eta[:, col] = new
            st.log_sd[col] += eps
            self._refresh_cov()
        if warm is not None:
            self.ad.scale_log_step[col] += (np.exp(min(0.0, ratio)) - 0.44) / (warm + 1.0) ** 0.6

    def sweep(self, warm):
        self.step_omega(warm)
        self.step_alpha(warm)
        self.step_eta_success(warm)
        self.step_intercept_shift(warm)
        self.step_fail(warm)
        self.step_pass(warm)
        self._refresh_cov()
        self.step_cov(warm)
        self.step_cov_whitened(warm)
        for col in range(3):
            self.step_scale(col, warm)


# ---------------------------------------------------------------------------
# Posterior container


@dataclass
class PosteriorChains:
    layout: ParameterLayout
    fixed: np.ndarray  # (chains, draws, n_fixed) in ModelParams.flat order
    eta: np.ndarray  # (chains, draws, U, 3)
    sd: np.ndarray  # (chains, draws, 3)
    corr: np.ndarray  # (chains, draws, 3) entries (0,1), (0,2), (1,2)
    chain_seeds: tuple
    config: MCMCConfig
    prior: PriorSpec
    adaptation: list
    last_state: list
    acceptance: list
    data_digest: str = ""
    generation: int = 0

    @property
    def n_chains(self) -> int:
        return self.fixed.shape[0]

    @property
    def n_draws(self) -> int:
        return self.fixed.shape[1]

    def draws(self, name: str) -> np.ndarray:
        """(chains, draws) array for a canonical parameter name."""
        lay = self.layout
        flat = lay.fixed_names_flat()
        if name in flat:
            return self.fixed[:, :, flat.index(name)]
        corr = lay.corr_names()
        if name in corr:
            return self.corr[:, :, corr.index(name)]
        sig = lay.sigma_names()
        if name in sig:
            return self.sd[:, :, sig.index(name)]
        etas = lay.eta_names()
        if name in etas:
            k, u = divmod(etas.index(name), len(lay.units))
            return self.eta[:, :, u, k]
        raise KeyError(name)

    def matrix(self, names: Sequence[str] | None = None) -> np.ndarray:
        names = list(names) if names is not None else self.layout.all_names()
        return np.stack([self.draws(n) for n in names], axis=-1)

    def params_at(self, chain: int, draw: int):
        lay = self.layout
        params = ModelParams.from_flat(self.fixed[chain, draw], lay.dims)
        effects = RandomEffects(self.eta[chain, draw], lay.units, lay.unit_by)
        R = np.eye(3)
        for (a, b), v in zip(CORR_PAIRS, self.corr[chain, draw]):
            R[a, b] = R[b, a] = v
        return params, effects, CovarianceSpec(self.sd[chain, draw], R)


# ---------------------------------------------------------------------------
# Initialization


def data_digest(data: CompiledData) -> str:
    h = hashlib.sha256()
    for arr in (data.hold_c, data.hold_dur, data.hold_event, data.x1, data.unit1, data.s,
                data.succ.x, data.succ.units, data.succ.mask, data.succ.chosen,
                data.fail.x, data.fail.units, data.fail.mask, data.fail.chosen):
        a = np.ascontiguousarray(arr)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class _InitInfo:
    x: np.ndarray  # MAP (fixed + eta)
    cov: np.ndarray  # Laplace covariance


def _laplace(data: CompiledData, prior: PriorSpec, layout: ParameterLayout) -> _InitInfo:
    cov0 = CovarianceSpec(np.full(3, 1.0 / prior.scale_rate), np.eye(3))
    res = map_estimate(data, fixed_sd=prior.fixed_effect_sd, re_cov=cov0,
                       units=layout.units, unit_by=layout.unit_by)
    x = np.concatenate([res.params.flat(), res.effects.eta.ravel()])
    f = map_objective(data, data.dims, prior.fixed_effect_sd, np.linalg.inv(cov0.matrix))
    H = _fd_hessian(f, x)
    try:
        cov = np.linalg.inv(H)
        np.linalg.cholesky(0.5 * (cov + cov.T))
    except np.linalg.LinAlgError:
        cov = np.eye(x.size) * 0.01
    return _InitInfo(x, 0.5 * (cov + cov.T))


def _fresh_adaptation(info: _InitInfo, layout: ParameterLayout, target: float) -> Adaptation:
    p, d1, d2, d3 = layout.dims
    o = np.cumsum([0, p, d1, d2, d3])
    blocks = {}
    for name, (a, b) in zip(("omega", "alpha", "beta", "gamma"), zip(o[:-1], o[1:])):
        blocks[name] = RWBlock.fresh(name, info.cov[a:b, a:b], target)
    blocks["covariance"] = RWBlock.fresh("covariance", np.eye(6) * 0.05, target)
    blocks["covariance_whitened"] = RWBlock.fresh("covariance_whitened", np.eye(6) * 0.05, target)
    U = len(layout.units)
    nfix = layout.n_fixed
    if U:
        var = np.diag(info.cov)[nfix:].reshape(U, 3)
        eta_step = 0.5 * np.log(np.clip(var, 1e-8, None)) + np.log(2.38)
    else:
        eta_step = np.zeros((0, 3))
    return Adaptation(blocks, eta_step, np.log(np.full(3, 0.3)), np.log(np.full(3, 0.5)))


def _initial_state(info: _InitInfo, layout: ParameterLayout, prior: PriorSpec, cfg: MCMCConfig, rng) -> ChainState:
    p, d1, d2, d3 = layout.dims
    nfix = layout.n_fixed
    U = len(layout.units)
    if cfg.init == "map":
        L = _safe_chol(info.cov)
        x = info.x + cfg.init_scale * (L @ rng.standard_normal(info.x.size))
    elif cfg.init == "prior":
        x = np.concatenate([rng.standard_normal(nfix) * prior.fixed_effect_sd,
                            rng.standard_normal(3 * U) / prior.scale_rate])
    else:
        x = np.zeros(nfix + 3 * U)
    params = ModelParams.from_flat(x[:nfix], layout.dims)
    log_sd = np.log(np.full(3, 1.0 / prior.scale_rate)) + 0.1 * rng.standard_normal(3)
    y = 0.1 * rng.standard_normal(3)
    return ChainState(params.omega, params.alpha, params.beta, params.gamma,
                      x[nfix:].reshape(U, 3).copy(), log_sd, y)


# ---------------------------------------------------------------------------
# Running chains


@dataclass(frozen=True)
class _ChainJob:
    data: CompiledData
    prior: PriorSpec
    cfg: MCMCConfig
    layout: ParameterLayout
    key: tuple
    state: ChainState | None
    adaptation: Adaptation | None
    init: _InitInfo | None


def _run_chain(job: _ChainJob):
    rng = rngmod.stream(job.cfg.seed, *job.key)
    target = _Target(job.data, job.prior)
    if job.state is None:
        state = _initial_state(job.init, job.layout, job.prior, job.cfg, rng)
        adapt = _fresh_adaptation(job.init, job.layout, job.cfg.target_accept)
    else:
        state, adapt = job.state.copy(), job.adaptation.copy()
    chain = _Chain(target, state, adapt, job.cfg, rng)
    _check_init(chain)
    cfg = job.cfg
    W = cfg.warmup
    names = ("omega", "alpha", "beta", "gamma")
    marks = {int(W * f) for f in (0.25, 0.5, 0.75)} - {0}
    history = {n: [] for n in names}
    history["covariance"] = []
    for it in range(W):
        chain.sweep(it)
        for n in names:
            history[n].append(getattr(chain.st, n).copy())
        history["covariance"].append(np.concatenate([chain.st.log_sd, chain.st.y]))
        if it + 1 in marks:
            for n, rows in history.items():
                arr = np.asarray(rows)
                if arr.shape[0] > 2 * arr.shape[1] + 10 and arr.shape[1]:
                    emp = np.atleast_2d(np.cov(arr, rowvar=False))
                    if np.all(np.isfinite(emp)) and np.all(np.diag(emp) > 0):
                        targets = ("covariance", "covariance_whitened") if n == "covariance" else (n,)
                        for b in targets:
                            adapt.blocks[b].set_cov(emp + 1e-10 * np.eye(emp.shape[0]))
                history[n] = rows[len(rows) // 2:]
    warm_stats = {b: tuple(v) for b, v in chain.stats.items()}
    dead = [b for b, (a, n) in warm_stats.items() if n > 0 and a == 0]
    if W > 0 and dead:
        raise SamplerError(f"no proposal accepted during warmup in block(s): {', '.join(dead)}")
    chain.stats = {b: [0, 0] for b in BLOCKS}
    n_keep = cfg.iters // cfg.thin
    U = target.U
    fixed = np.zeros((n_keep, job.layout.n_fixed))
    eta = np.zeros((n_keep, U, 3))
    sd = np.zeros((n_keep, 3))
    corr = np.zeros((n_keep, 3))
    k = 0
    for it in range(n_keep * cfg.thin):
        chain.sweep(None)
        if (it + 1) % cfg.thin == 0:
            st = chain.st
            fixed[k] = np.concatenate([st.omega, st.alpha, st.beta, st.gamma])
            eta[k] = st.eta
            sd[k] = np.exp(st.log_sd)
            R = cpc_corr(np.tanh(st.y))
            corr[k] = [R[a, b] for a, b in CORR_PAIRS]
            k += 1
    acc = {b: (a / n if n else None) for b, (a, n) in chain.stats.items()}
    return fixed, eta, sd, corr, chain.st, adapt, {"warmup": _rates(warm_stats), "sampling": acc}


def _rates(stats) -> dict:
    return {b: (a / n if n else None) for b, (a, n) in stats.items()}


def _check_init(chain: _Chain) -> None:
    t, st = chain.t, chain.st
    checks = {
        "omega": t.hold_ll(st.omega),
        "alpha": (lambda v: -np.inf if v is None else float(v.sum()))(t.succ_terms(t.x1 @ st.alpha, st.eta[:, 0])),
        "gamma": t.succ.loglik(t.succ.base(st.gamma), st.eta[:, 2]),
        "covariance": chain.cov_logpost(np.concatenate([st.log_sd, st.y])),
    }
    if t.fail is not None:
        checks["beta"] = t.fail.loglik(t.fail.base(st.beta), st.eta[:, 1])
    bad = [k for k, v in checks.items() if not np.isfinite(v)]
    if bad:
        raise SamplerError(f"non-finite log posterior at the initial point in block(s): {', '.join(bad)}")


def _execute(jobs: list[_ChainJob], threads: int):
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(threads, len(jobs))) as ex:
            return list(ex.map(_run_chain, jobs))
    return [_run_chain(j) for j in jobs]


def _assemble(results, layout, keys, cfg, prior, digest, generation) -> PosteriorChains:
    fixed, eta, sd, corr, states, adapts, accs = zip(*results)
    return PosteriorChains(
        layout=layout, fixed=np.stack(fixed), eta=np.stack(eta), sd=np.stack(sd), corr=np.stack(corr),
        chain_seeds=tuple((cfg.seed, *k) for k in keys), config=cfg, prior=prior,
        adaptation=list(adapts), last_state=list(states), acceptance=list(accs),
        data_digest=digest, generation=generation,
    )


def run_mcmc(data: CompiledData, layout: ParameterLayout, prior: PriorSpec | None = None,
             cfg: MCMCConfig | None = None, chain_keys: Sequence[int] | None = None) -> PosteriorChains:
    """Sample the joint posterior; chain ``c`` uses the stream ``(seed, c)``."""
    prior = prior or PriorSpec()
    cfg = cfg or MCMCConfig()
    if data.dims != layout.dims or data.n_units != len(layout.units):
        raise ModelError(f"data layout {data.dims}/{data.n_units} units does not match "
                         f"parameter layout {layout.dims}/{len(layout.units)} units")
    info = _laplace(data, prior, layout) if cfg.init == "map" else _InitInfo(
        np.zeros(layout.n_fixed + 3 * len(layout.units)),
        np.diag(np.concatenate([np.full(layout.n_fixed, prior.fixed_effect_sd**2 * 0.01),
                                np.full(3 * len(layout.units), 0.25)])))
    keys = [(c,) for c in (chain_keys if chain_keys is not None else range(cfg.chains))]
    jobs = [_ChainJob(data, prior, cfg, layout, k, None, None, info) for k in keys]
    results = _execute(jobs, cfg.threads)
    return _assemble(results, layout, keys, cfg, prior, data_digest(data), 0)


def update_posterior(prev: PosteriorChains, data: CompiledData, layout: ParameterLayout,
                     cfg: MCMCConfig | None = None) -> PosteriorChains:
    """Refit on the combined data, warm-started from each previous chain's
    last state with its tuned proposals.

    ``data`` must hold the previous and the new observations; ``layout`` may
    add units, whose effect rows start from a draw of the current random-effect
    distribution.
    """
    cfg = cfg or prev.config
    if layout.dims != prev.layout.dims:
        raise ModelError(f"covariate dimensions changed from {prev.layout.dims} to {layout.dims}")
    if layout.units[:len(prev.layout.units)] != prev.layout.units:
        raise ModelError("new layout must keep the previous units first and in order")
    from .diagnostics import max_rhat
    rhat = max_rhat(prev)
    if rhat > 1.05:
        warnings.warn(f"previous posterior not converged (max R-hat {rhat:.3f})", RuntimeWarning)
    U_old, U = len(prev.layout.units), len(layout.units)
    gen = prev.generation + 1
    jobs = []
    keys = []
    for c, (state, adapt) in enumerate(zip(prev.last_state, prev.adaptation)):
        key = (prev.chain_seeds[c][1], gen)
        keys.append(key)
        st, ad = state.copy(), adapt.copy()
        if U > U_old:
            spawn = rngmod.stream(cfg.seed, key[0], gen, 1)
            L = np.exp(st.log_sd)[:, None] * cpc_cholesky(np.tanh(st.y))
            new_rows = (L @ spawn.standard_normal((3, U - U_old))).T
            st.eta = np.vstack([st.eta, new_rows])
            ad.eta_log_step = np.vstack([ad.eta_log_step, np.tile(st.log_sd + np.log(2.38), (U - U_old, 1))])
        jobs.append(_ChainJob(data, prev.prior, cfg, layout, key, st, ad, None))
    results = _execute(jobs, cfg.threads)
    out = _assemble(results, layout, keys, cfg, prev.prior, data_digest(data), gen)
    return out
