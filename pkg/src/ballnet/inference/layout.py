"""Canonical parameter names and their order in tables and chain files."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

from ..model import ETA_COMPONENTS, ModelError
from ..pitch import CovariateConfig

CORR_PAIRS = tuple(combinations(range(3), 2))  # (0,1), (0,2), (1,2), matching the partial correlations


@dataclass(frozen=True)
class ParameterLayout:
    holding: tuple[str, ...]
    success: tuple[str, ...]
    fail_receiver: tuple[str, ...]
    receiver: tuple[str, ...]
    units: tuple[str, ...] = ()
    unit_by: str = "position"
    model_failure_receiver: bool = True

    def __post_init__(self):
        for block in (self.holding, self.success, self.fail_receiver, self.receiver, self.units):
            if len(set(block)) != len(block):
                raise ModelError("duplicate names in parameter layout")

    @classmethod
    def from_covariates(cls, cfg: CovariateConfig, units, unit_by: str = "position",
                        model_failure_receiver: bool = True) -> "ParameterLayout":
        return cls(cfg.holding_names, cfg.success, cfg.failure_receiver, cfg.receiver,
                   tuple(units), unit_by, model_failure_receiver)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return (len(self.holding), len(self.success), len(self.fail_receiver), len(self.receiver))

    @property
    def n_fixed(self) -> int:
        return sum(self.dims)

    def with_units(self, units) -> "ParameterLayout":
        from dataclasses import replace
        return replace(self, units=tuple(units))

    @property
    def active_components(self) -> tuple[int, ...]:
        """Random-effect components informed by the likelihood."""
        return (0, 1, 2) if self.model_failure_receiver else (0, 2)

    def fixed_names_flat(self) -> list[str]:
        """Names in ModelParams.flat() order (omega, alpha, beta, gamma)."""
        return ([f"omega[{n}]" for n in self.holding] + [f"alpha[{n}]" for n in self.success]
                + [f"beta[{n}]" for n in self.fail_receiver] + [f"gamma[{n}]" for n in self.receiver])

    def table_fixed_names(self) -> list[str]:
        """Fixed effects in reporting order: success, receiver given success,
        receiver given failure, holding."""
        return ([f"alpha[{n}]" for n in self.success] + [f"gamma[{n}]" for n in self.receiver]
                + [f"beta[{n}]" for n in self.fail_receiver] + [f"omega[{n}]" for n in self.holding])

    def corr_names(self, active_only: bool = False) -> list[str]:
        act = set(self.active_components) if active_only else {0, 1, 2}
        return [f"corr[{ETA_COMPONENTS[a]},{ETA_COMPONENTS[b]}]" for a, b in CORR_PAIRS
                if a in act and b in act]

    def sigma_names(self, active_only: bool = False) -> list[str]:
        act = self.active_components if active_only else (0, 1, 2)
        return [f"sigma[{ETA_COMPONENTS[k]}]" for k in act]

    def eta_names(self, active_only: bool = False) -> list[str]:
        act = self.active_components if active_only else (0, 1, 2)
        return [f"eta_{ETA_COMPONENTS[k]}[{u}]" for k in act for u in self.units]

    def table_names(self, include_eta: bool = False) -> list[str]:
        """Rows of a posterior summary table."""
        names = self.table_fixed_names() + self.corr_names(True) + self.sigma_names(True)
        if include_eta:
            names += self.eta_names(True)
        return names

    def all_names(self) -> list[str]:
        """Columns of a chain file (every sampled quantity)."""
        return self.table_fixed_names() + self.corr_names() + self.sigma_names() + self.eta_names()

    def to_dict(self) -> dict:
        return {
            "holding": list(self.holding), "success": list(self.success),
            "fail_receiver": list(self.fail_receiver), "receiver": list(self.receiver),
            "units": list(self.units), "unit_by": self.unit_by,
            "model_failure_receiver": self.model_failure_receiver,
        }

    @classmethod
    def from_dict(cls, d) -> "ParameterLayout":
        return cls(tuple(d["holding"]), tuple(d["success"]), tuple(d["fail_receiver"]),
                   tuple(d["receiver"]), tuple(d["units"]), d["unit_by"], bool(d["model_failure_receiver"]))
