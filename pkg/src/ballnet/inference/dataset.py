"""From match logs to compiled likelihood data and a parameter layout."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from ..eventlog import attach_covariates
from ..likelihood import CompiledData, LikelihoodConfig, compile_logs
from ..model import MatchLog, ModelError
from ..pitch import CovariateConfig, FormationGraph
from .layout import ParameterLayout


@dataclass(frozen=True)
class Dataset:
    logs: tuple[MatchLog, ...]
    data: CompiledData
    layout: ParameterLayout
    covariates: CovariateConfig
    likelihood: LikelihoodConfig


def units_for(logs: Sequence[MatchLog], cfg: CovariateConfig, unit_by: str,
              base: Sequence[str] = ()) -> tuple[str, ...]:
    """Random-effect units: every configured position, or every player in
    order of first appearance; ``base`` units keep their leading order."""
    units = list(base)
    if unit_by == "position":
        candidates = list(cfg.positions)
    elif unit_by == "player":
        candidates = [p.label for log in logs for r in log.roster_timeline for p in r.players]
    else:
        raise ModelError(f"unknown random-effect unit {unit_by!r}")
    for u in candidates:
        if u not in units:
            units.append(u)
    return tuple(units)


def build_dataset(
    logs: Sequence[MatchLog],
    cfg: CovariateConfig,
    model_failure_receiver: bool = True,
    unit_by: str = "position",
    graphs: Mapping[int, FormationGraph] | None = None,
    base_units: Sequence[str] = (),
    attach: bool = True,
) -> Dataset:
    """Attach covariates (unless ``attach`` is False) and compile the logs."""
    logs = tuple(attach_covariates(logs, cfg, graphs) if attach else logs)
    units = units_for(logs, cfg, unit_by, base_units)
    lcfg = LikelihoodConfig(cfg.dims, model_failure_receiver, unit_by)
    data = compile_logs(logs, lcfg, units)
    layout = ParameterLayout.from_covariates(cfg, units, unit_by, model_failure_receiver)
    return Dataset(logs, data, layout, cfg, lcfg)
