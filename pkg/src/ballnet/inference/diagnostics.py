"""Posterior summaries: medians, central intervals, ESS and split R-hat."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

SUMMARY_SCHEMA = "ballnet-summary/1"


def _autocov(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of a 1-d series via FFT."""
    n = x.size
    xc = x - x.mean()
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, size)
    ac = np.fft.irfft(f * np.conj(f), size)[:n]
    return ac / n


def _split(draws: np.ndarray) -> np.ndarray:
    m, n = draws.shape
    half = n // 2
    if half < 1:
        return draws
    return np.concatenate([draws[:, :half], draws[:, n - half:]], axis=0)


def split_rhat(draws: np.ndarray) -> float:
    """Split R-hat for a (chains, draws) array; NaN when every chain is constant."""
    x = _split(np.asarray(draws, dtype=float))
    m, n = x.shape
    if n < 2:
        return float("nan")
    W = x.var(axis=1, ddof=1).mean()
    if not W > 0:
        return float("nan")
    B = n * x.mean(axis=1).var(ddof=1) if m > 1 else 0.0
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def ess(draws: np.ndarray) -> float:
    """Multi-chain effective sample size with Geyer's initial positive
    sequence (truncated at the first negative pair sum)."""
    x = np.asarray(draws, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    m, n = x.shape
    total = m * n
    if n < 4:
        return float(total)
    acov = np.stack([_autocov(c) for c in x])
    chain_var = acov[:, 0] * n / (n - 1)
    W = chain_var.mean()
    if not W > 0:
        return float(total)
    B = n * x.mean(axis=1).var(ddof=1) if m > 1 else 0.0
    var_plus = (n - 1) / n * W + B / n
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    tau = -1.0
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair < 0:
            break
        tau += 2.0 * pair
    tau = max(tau, 1.0 / np.log10(total + 1.0))
    return float(max(1.0, total / tau))


@dataclass(frozen=True)
class SummaryRow:
    name: str
    mean: float
    median: float
    lower: float
    upper: float
    ess: float
    rhat: float
    degenerate: bool = False


@dataclass(frozen=True)
class PosteriorSummary:
    rows: tuple[SummaryRow, ...]
    n_chains: int
    n_draws: int

    def __getitem__(self, name: str) -> SummaryRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [r.name for r in self.rows]

    def to_dict(self) -> dict:
        return {"schema": SUMMARY_SCHEMA, "n_chains": self.n_chains, "n_draws": self.n_draws,
                "parameters": [asdict(r) for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def table(self) -> str:
        lines = [f"{'parameter':32s} {'M':>8s} {'CI':>20s} {'ESS':>8s} {'Rhat':>6s}"]
        for r in self.rows:
            ci = f"({r.lower:.2f}, {r.upper:.2f})"
            lines.append(f"{r.name:32s} {r.median:8.2f} {ci:>20s} {r.ess:8.0f} {r.rhat:6.3f}")
        return "\n".join(lines)


def summarize_draws(names: Sequence[str], draws: np.ndarray) -> PosteriorSummary:
    """Summaries for a (chains, draws, params) array."""
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 3 or draws.shape[1] < 1:
        raise ValueError("need at least one retained draw")
    rows = []
    for k, name in enumerate(names):
        x = draws[:, :, k]
        flat = x.ravel()
        lo, med, hi = np.quantile(flat, [0.025, 0.5, 0.975])
        rh = split_rhat(x)
        degenerate = not np.isfinite(rh)
        rows.append(SummaryRow(
            name=name, mean=float(flat.mean()), median=float(med), lower=float(lo), upper=float(hi),
            ess=ess(x) if not degenerate else float(flat.size),
            rhat=1.0 if degenerate else rh, degenerate=degenerate,
        ))
    return PosteriorSummary(tuple(rows), draws.shape[0], draws.shape[1])


def posterior_summary(chains, names: Sequence[str] | None = None, include_eta: bool = False) -> PosteriorSummary:
    """Summary table in reporting order (success, receiver, holding, random effects)."""
    if chains.n_draws < 1:
        raise ValueError("empty chains")
    names = list(names) if names is not None else chains.layout.table_names(include_eta)
    return summarize_draws(names, chains.matrix(names))


def max_rhat(chains) -> float:
    if chains.n_draws < 4:
        return float("inf")
    vals = [split_rhat(chains.draws(n)) for n in chains.layout.table_names()]
    vals = [v for v in vals if np.isfinite(v)]
    return max(vals) if vals else 1.0
