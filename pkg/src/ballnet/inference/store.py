"""Run directories: chain draws as CSV plus the sampler state needed to
resume or update a fit."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from ..model import ModelError
from .layout import ParameterLayout
from .mcmc import Adaptation, ChainState, MCMCConfig, PosteriorChains
from .priors import PriorSpec

CHAINS_SCHEMA = "ballnet-chains/1"
STATE_SCHEMA = "ballnet-state/1"
CHAINS_FILE = "chains.csv"
STATE_FILE = "state.json"


class RunDirError(ModelError):
    pass


def format_chains(chains: PosteriorChains) -> str:
    names = chains.layout.all_names()
    mat = chains.matrix(names)
    buf = io.StringIO()
    buf.write(f"# {CHAINS_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["chain", "draw", *names])
    for c in range(chains.n_chains):
        for d, row in enumerate(mat[c].tolist()):
            w.writerow([c, d, *map(repr, row)])
    return buf.getvalue()


def parse_chains(text: str, layout: ParameterLayout, n_chains: int) -> dict[str, np.ndarray]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != f"# {CHAINS_SCHEMA}":
        raise RunDirError(f"chain file does not start with '# {CHAINS_SCHEMA}'")
    reader = csv.reader(lines[1:])
    header = next(reader, None)
    names = layout.all_names()
    if header != ["chain", "draw", *names]:
        raise RunDirError("chain file columns do not match the stored parameter layout")
    rows = [r for r in reader if r]
    try:
        vals = np.array([[float(v) for v in r[2:]] for r in rows])
        chain_ix = np.array([int(r[0]) for r in rows])
    except ValueError as exc:
        raise RunDirError(f"chain file: {exc}") from None
    if vals.size == 0 or len(rows) % n_chains or not np.array_equal(
            chain_ix, np.repeat(np.arange(n_chains), len(rows) // n_chains)):
        raise RunDirError("chain file rows are not complete, equal-length chains")
    arr = vals.reshape(n_chains, -1, len(names))
    return {n: arr[:, :, k] for k, n in enumerate(names)}


def save_run(chains: PosteriorChains, run_dir: str | Path) -> list[Path]:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    state = {
        "schema": STATE_SCHEMA,
        "layout": chains.layout.to_dict(),
        "config": chains.config.to_dict(),
        "prior": chains.prior.to_dict(),
        "chain_seeds": [list(s) for s in chains.chain_seeds],
        "generation": chains.generation,
        "data_digest": chains.data_digest,
        "n_draws": chains.n_draws,
        "acceptance": chains.acceptance,
        "last_state": [s.to_dict() for s in chains.last_state],
        "adaptation": [a.to_dict() for a in chains.adaptation],
    }
    paths = [run_dir / CHAINS_FILE, run_dir / STATE_FILE]
    paths[0].write_text(format_chains(chains))
    paths[1].write_text(json.dumps(state, indent=1) + "\n")
    return paths


def read_state(run_dir: str | Path) -> dict:
    path = Path(run_dir) / STATE_FILE
    if not path.exists():
        raise RunDirError(f"{path}: no sampler state (not a fit run directory?)")
    state = json.loads(path.read_text())
    if state.get("schema") != STATE_SCHEMA:
        raise RunDirError(f"{path}: unsupported schema {state.get('schema')!r}")
    return state


def load_run(run_dir: str | Path) -> PosteriorChains:
    run_dir = Path(run_dir)
    state = read_state(run_dir)
    path = run_dir / CHAINS_FILE
    if not path.exists():
        raise RunDirError(f"{path}: chain file missing")
    layout = ParameterLayout.from_dict(state["layout"])
    n_chains = len(state["chain_seeds"])
    cols = parse_chains(path.read_text(), layout, n_chains)
    U = len(layout.units)
    fixed = np.stack([cols[n] for n in layout.fixed_names_flat()], axis=-1)
    corr = np.stack([cols[n] for n in layout.corr_names()], axis=-1)
    sd = np.stack([cols[n] for n in layout.sigma_names()], axis=-1)
    eta_names = layout.eta_names()
    eta = np.stack([np.stack([cols[eta_names[k * U + u]] for k in range(3)], axis=-1)
                    for u in range(U)], axis=2) if U else np.zeros(fixed.shape[:2] + (0, 3))
    cfg = state["config"]
    return PosteriorChains(
        layout=layout, fixed=fixed, eta=eta, sd=sd, corr=corr,
        chain_seeds=tuple(tuple(s) for s in state["chain_seeds"]),
        config=MCMCConfig(**cfg), prior=PriorSpec(**state["prior"]),
        adaptation=[Adaptation.from_dict(a) for a in state["adaptation"]],
        last_state=[ChainState.from_dict(s, U) for s in state["last_state"]],
        acceptance=state["acceptance"], data_digest=state["data_digest"],
        generation=int(state["generation"]),
    )
