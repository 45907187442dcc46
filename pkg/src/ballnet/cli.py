"""Command-line interface.

    ballnet [global flags] simulate  [--config FILE]
    ballnet [global flags] fit       DATA [--config FILE]
    ballnet [global flags] update    RUN_DIR DATA
    ballnet [global flags] summarize RUN_DIR [--include-eta]
    ballnet [global flags] ppc       RUN_DIR [DATA]
    ballnet [global flags] simstudy  [--config FILE]

Global flags (accepted before or after the subcommand): ``--seed``,
``--threads``, ``--json``, ``--out`` and ``--prior``. DATA is an event file or
a directory of them. Every artifact-producing command writes
``manifest.json`` into ``--out``. Outputs depend only on inputs, config and
seed, never on ``--threads``; manifest times come from ``SOURCE_DATE_EPOCH``
when it is set and are null otherwise.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import warnings
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from . import rng as rngmod
from .config import CONFIG_SCHEMA_TAG, ConfigError, RunConfig, load_config, parse_config
from .eventlog import EVENT_SCHEMA, EventLogError, format_event_log, parse_event_log
from .inference.dataset import build_dataset
from .inference.diagnostics import SUMMARY_SCHEMA, posterior_summary
from .inference.mcmc import SamplerError, run_mcmc, update_posterior
from .inference.ppc import PPC_SCHEMA, posterior_predictive_check
from .inference.store import CHAINS_SCHEMA, STATE_SCHEMA, RunDirError, load_run, save_run
from .inference.study import STUDY_SCHEMA, StudyConfig, run_simulation_study
from .model import ModelError
from .simulator import PitchCovariates, SimulationConfig, SimulationError, simulate_season

MANIFEST_SCHEMA = "ballnet-manifest/1"
SCHEMAS = {
    "config": CONFIG_SCHEMA_TAG, "events": EVENT_SCHEMA, "chains": CHAINS_SCHEMA,
    "state": STATE_SCHEMA, "summary": SUMMARY_SCHEMA, "ppc": PPC_SCHEMA,
    "study": STUDY_SCHEMA, "manifest": MANIFEST_SCHEMA,
}
DATA_FILE = "data/events.csv"
CONFIG_FILE = "config.json"

log = logging.getLogger("ballnet")


class LineageError(ModelError):
    pass


class CLIError(ModelError):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _timestamp() -> str | None:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is None:
        return None
    return datetime.fromtimestamp(int(epoch), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass
class RunManifest:
    command: str
    config_digest: str | None
    seed: int
    start_time: str | None = None
    end_time: str | None = None
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    lineage: dict | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"schema": MANIFEST_SCHEMA, "version": __version__, "command": self.command,
             "config_digest": self.config_digest, "seed": self.seed, "schemas": SCHEMAS,
             "start_time": self.start_time, "end_time": self.end_time,
             "inputs": self.inputs, "outputs": self.outputs}
        if self.lineage is not None:
            d["lineage"] = self.lineage
        d.update(self.extra)
        return d

    def write(self, out: Path, files: list[Path]) -> Path:
        self.outputs = {p.relative_to(out).as_posix(): _sha256(p) for p in sorted(files)}
        self.end_time = _timestamp()
        path = out / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path


# ---------------------------------------------------------------------------
# Helpers


def _out_dir(args) -> Path:
    if args.out is None:
        raise CLIError(f"{args.command}: --out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if args.prior is not None:
        raw = dict(cfg.raw, prior=args.prior)
        cfg = replace(parse_config(raw), digest=cfg.digest)
    return cfg


def _data_files(path: str | Path) -> list[Path]:
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.rglob("*") if p.suffix in (".csv", ".jsonl") and p.is_file())
        if not files:
            raise EventLogError(f"{path}: no .csv or .jsonl event files")
        return files
    if not path.exists():
        raise EventLogError(f"{path}: no such file or directory")
    return [path]


def _read_logs(path, strict: bool):
    files = _data_files(path)
    logs = []
    for f in files:
        logs.extend(parse_event_log(f, strict=strict))
    return logs, {str(f): _sha256(f) for f in files}


def _graphs(cfg: RunConfig, logs):
    names = (cfg.formations[0].name, cfg.formations[1].name)
    if logs and all(tuple(l.formations) == names for l in logs):
        return cfg.graphs()
    return None


def _dataset(cfg: RunConfig, logs, base_units=()):
    return build_dataset(logs, cfg.covariates, cfg.model_failure_receiver, cfg.unit_by,
                         graphs=_graphs(cfg, logs), base_units=base_units)


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _emit(args, payload: dict, text: str | None = None) -> None:
    if args.json:
        sys.stdout.write(json.dumps(payload, indent=2) + "\n")
    elif text is not None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _save_fit(out: Path, chains, cfg: RunConfig, logs) -> list[Path]:
    files = save_run(chains, out)
    summary = posterior_summary(chains)
    files.append(_write(out / "summary.json", summary.to_json()))
    files.append(_write(out / "summary.txt", summary.table() + "\n"))
    files.append(_write(out / DATA_FILE, format_event_log(logs)))
    files.append(_write(out / CONFIG_FILE, json.dumps(cfg.raw, indent=2, sort_keys=True) + "\n"))
    return files


# ---------------------------------------------------------------------------
# Commands


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    man = RunManifest("simulate", cfg.digest, args.seed, start_time=_timestamp())
    s = cfg.simulate
    goals = s.goals if isinstance(s.goals, tuple) else ()
    sim = SimulationConfig(
        roster=cfg.roster(), covariates=PitchCovariates(cfg.covariates, cfg.graphs()),
        T=s.T, seed=args.seed, mode=s.mode, passes=s.passes, short_season=s.short_season,
        goals=goals, match_id="season" if s.mode == "pass_count" else "match",
        formations=(cfg.formations[0].name, cfg.formations[1].name), team_names=s.team_names,
    )
    logs = simulate_season(sim, cfg.truths, cfg.effects(args.seed), s.n_matches, threads=args.threads,
                           goal_rate=s.goal_rate if s.goals == "random" else None, equalizer=s.equalizer)
    ext = "jsonl" if s.format == "jsonl" else "csv"
    files = [_write(out / "logs" / f"{l.match_id}.{ext}", format_event_log([l], s.format)) for l in logs]
    man.extra = {"matches": len(logs), "events": sum(len(l.events) for l in logs)}
    path = man.write(out, files)
    _emit(args, man.to_dict(), f"wrote {len(logs)} matches to {out / 'logs'}\nmanifest: {path}")
    return 0


def cmd_fit(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    man = RunManifest("fit", cfg.digest, args.seed, start_time=_timestamp())
    logs, inputs = _read_logs(args.data, cfg.strict)
    ds = _dataset(cfg, logs)
    chains = run_mcmc(ds.data, ds.layout, cfg.prior, cfg.mcmc_config(args.seed, args.threads))
    files = _save_fit(out, chains, cfg, ds.logs)
    man.inputs = inputs
    man.extra = {"prior": cfg.prior_name, "data_digest": chains.data_digest, "events": ds.data.n_events}
    man.write(out, files)
    summary = posterior_summary(chains)
    _emit(args, summary.to_dict(), summary.table())
    return 0


def _check_lineage(run_dir: Path) -> dict:
    """Compare a run directory against its manifest; any change is refused."""
    mpath = run_dir / "manifest.json"
    if not mpath.exists():
        raise RunDirError(f"{run_dir}: no manifest.json")
    manifest = json.loads(mpath.read_text())
    if manifest.get("command") not in ("fit", "update"):
        raise RunDirError(f"{run_dir}: not a fit or update run")
    diffs = []
    for rel, digest in manifest.get("outputs", {}).items():
        p = run_dir / rel
        actual = _sha256(p) if p.exists() else "<missing>"
        if actual != digest:
            diffs.append(f"{rel}: manifest {digest}, found {actual}")
    if diffs:
        raise LineageError("lineage mismatch, run directory differs from its manifest:\n  " + "\n  ".join(diffs))
    return manifest


def cmd_update(args) -> int:
    prev_dir = Path(args.run_dir)
    prev_manifest = _check_lineage(prev_dir)
    cfg = load_config(prev_dir / CONFIG_FILE)
    prev = load_run(prev_dir)
    out = _out_dir(args)
    man = RunManifest("update", cfg.digest, args.seed if args.seed_given else prev.config.seed,
                      start_time=_timestamp())
    old_logs = parse_event_log(prev_dir / DATA_FILE, strict=True)
    old = _dataset(cfg, old_logs, prev.layout.units)
    if old.layout.units != prev.layout.units:
        # The stored data defines the stored units; anything else is a tampered run.
        raise LineageError(f"lineage mismatch: units {list(old.layout.units)} differ from the stored layout")
    from .inference.mcmc import data_digest
    found = data_digest(old.data)
    if found != prev.data_digest:
        raise LineageError(f"lineage mismatch: data digest in state {prev.data_digest}, "
                           f"stored data gives {found}")
    new_logs, inputs = _read_logs(args.data, cfg.strict)
    ds = _dataset(cfg, list(old.logs) + new_logs, prev.layout.units)
    mcfg = replace(prev.config, threads=args.threads,
                   seed=args.seed if args.seed_given else prev.config.seed)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        chains = update_posterior(prev, ds.data, ds.layout, mcfg)
    for w in caught:
        log.warning("%s", w.message)
    files = _save_fit(out, chains, cfg, ds.logs)
    man.inputs = inputs
    man.lineage = {"previous_run": str(prev_dir), "previous_manifest": _sha256(prev_dir / "manifest.json"),
                   "previous_data_digest": prev.data_digest, "previous_config_digest":
                   prev_manifest.get("config_digest"), "generation": chains.generation}
    man.extra = {"prior": cfg.prior_name, "data_digest": chains.data_digest, "events": ds.data.n_events}
    man.write(out, files)
    summary = posterior_summary(chains)
    _emit(args, summary.to_dict(), summary.table())
    return 0


def cmd_summarize(args) -> int:
    chains = load_run(args.run_dir)
    summary = posterior_summary(chains, include_eta=args.include_eta)
    if args.out is not None:
        out = _out_dir(args)
        man = RunManifest("summarize", None, args.seed, start_time=_timestamp(),
                          inputs={str(Path(args.run_dir) / "chains.csv"): _sha256(Path(args.run_dir) / "chains.csv")})
        files = [_write(out / "summary.json", summary.to_json()),
                 _write(out / "summary.txt", summary.table() + "\n")]
        man.write(out, files)
    _emit(args, summary.to_dict(), summary.table())
    return 0


def cmd_ppc(args) -> int:
    run_dir = Path(args.run_dir)
    chains = load_run(run_dir)
    cfg = load_config(run_dir / CONFIG_FILE) if (run_dir / CONFIG_FILE).exists() else _config(args)
    out = _out_dir(args)
    man = RunManifest("ppc", cfg.digest, args.seed, start_time=_timestamp())
    data = args.data if args.data is not None else run_dir / DATA_FILE
    logs, inputs = _read_logs(data, cfg.strict)
    ds = _dataset(cfg, logs, chains.layout.units)
    if ds.layout.units != chains.layout.units:
        raise CLIError("ppc data introduces units the fitted run does not have")
    report = posterior_predictive_check(chains, ds.logs, rngmod.stream(args.seed), mode=cfg.ppc_mode,
                                        max_draws=cfg.ppc_max_draws, covariates=cfg.covariates)
    files = [_write(out / "ppc.json", report.to_json()), _write(out / "ppc.csv", report.to_csv())]
    man.inputs = inputs
    man.write(out, files)
    _emit(args, report.to_dict(), report.to_csv())
    return 0


def cmd_simstudy(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    man = RunManifest("simstudy", cfg.digest, args.seed, start_time=_timestamp())
    st = cfg.study
    scfg = StudyConfig(n_seasons=int(st["n_seasons"]), passes=int(st["passes"]), seed=args.seed,
                       mcmc=cfg.mcmc_config(0), prior=cfg.prior, goal_rate=float(st["goal_rate"]),
                       threads=args.threads, model_failure_receiver=cfg.model_failure_receiver)
    sim = SimulationConfig(
        roster=cfg.roster(), covariates=PitchCovariates(cfg.covariates, cfg.graphs()),
        seed=args.seed, mode="pass_count", passes=scfg.passes, match_id="season",
        formations=(cfg.formations[0].name, cfg.formations[1].name), team_names=cfg.simulate.team_names,
    )

    def progress(res):
        log.info("season %d: %s", res["season"], res["status"])

    report = run_simulation_study(scfg, truths=cfg.truths, covariates=cfg.covariates, simulation=sim,
                                  out_dir=out, progress=progress)
    files = [_write(out / "study.json", report.to_json()),
             _write(out / "percentiles.csv", report.percentile_csv())]
    files += sorted((out / "seasons").glob("*.json"))
    failed = [s["season"] for s in report.seasons if s["status"] != "ok"]
    man.extra = {"seasons_ok": len(report.seasons) - len(failed), "seasons_failed": failed}
    man.write(out, files)
    text = (f"coverage (averaged over {len(report.coverage_parameters)} parameters): "
            f"{report.coverage_mean:.3f}\n" + "".join(f"bias {k}: {v:+.3f}\n" for k, v in report.key_bias.items()))
    _emit(args, report.to_dict(), text)
    return 0


# ---------------------------------------------------------------------------
# Entry point


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=_u64, default=d(None), help="root seed (unsigned 64-bit)")
    parser.add_argument("--threads", type=_positive, default=d(1), help="worker processes")
    parser.add_argument("--json", action="store_true", default=d(False), help="machine-readable output")
    parser.add_argument("--out", default=d(None), help="output directory")
    parser.add_argument("--prior", choices=["prior1", "prior2", "prior3"], default=d(None),
                        help="prior preset, overriding the config file")


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ballnet", description="Possession-network model for passing data.")
    parser.add_argument("--version", action="version", version=f"ballnet {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate event logs")
    p.add_argument("--config")
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("fit", parents=[common], help="fit the model to event logs")
    p.add_argument("data")
    p.add_argument("--config")
    p.set_defaults(func=cmd_fit)
    p = sub.add_parser("update", parents=[common], help="update a fit with new event logs")
    p.add_argument("run_dir")
    p.add_argument("data")
    p.set_defaults(func=cmd_update)
    p = sub.add_parser("summarize", parents=[common], help="posterior summary of a fit")
    p.add_argument("run_dir")
    p.add_argument("--include-eta", action="store_true")
    p.set_defaults(func=cmd_summarize)
    p = sub.add_parser("ppc", parents=[common], help="posterior predictive check")
    p.add_argument("run_dir")
    p.add_argument("data", nargs="?")
    p.add_argument("--config")
    p.set_defaults(func=cmd_ppc)
    p = sub.add_parser("simstudy", parents=[common], help="simulation study")
    p.add_argument("--config")
    p.set_defaults(func=cmd_simstudy)
    return parser


VALIDATION_ERRORS = (ConfigError, EventLogError, RunDirError, LineageError, CLIError)


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (SamplerError, SimulationError)):
        return 2
    if isinstance(exc, VALIDATION_ERRORS) or isinstance(exc, (ModelError, FileNotFoundError)):
        return 1
    return 2


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    logging.basicConfig(level=logging.INFO if not args.json else logging.WARNING,
                        format="ballnet: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except Exception as exc:  # mapped to exit codes below
        code = _exit_code(exc)
        if args.json:
            sys.stderr.write(json.dumps({"error": {"type": type(exc).__name__, "message": str(exc),
                                                   "exit_code": code}}) + "\n")
        else:
            sys.stderr.write(f"ballnet {args.command}: error: {exc}\n")
        if code == 2 and os.environ.get("BALLNET_TRACEBACK"):
            raise
        return code


if __name__ == "__main__":
    sys.exit(main())
