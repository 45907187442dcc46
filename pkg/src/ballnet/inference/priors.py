"""Priors and the unconstrained parameterization of the random-effect covariance.

The 3x3 correlation matrix is built from three canonical partial correlations
``z = tanh(y)``; any real ``y`` gives a positive-definite matrix, so proposals
never leave the valid set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..model import CovarianceSpec, ModelError, ModelParams, RandomEffects

LOG_2PI = float(np.log(2.0 * np.pi))

PRESETS = {"prior1": 5.0, "prior2": 10.0, "prior3": 15.0}
DEFAULT_PRESET = "prior2"


@dataclass(frozen=True)
class PriorSpec:
    fixed_effect_sd: float = 10.0
    lkj_shape: float = 2.0
    scale_rate: float = 1.0

    def __post_init__(self):
        for name in ("fixed_effect_sd", "lkj_shape", "scale_rate"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ModelError(f"{name} must be positive, got {v}")

    @classmethod
    def preset(cls, name: str) -> "PriorSpec":
        try:
            return cls(fixed_effect_sd=PRESETS[name])
        except KeyError:
            raise ModelError(f"unknown prior preset {name!r}; choose from {sorted(PRESETS)}") from None

    def to_dict(self) -> dict:
        return {"fixed_effect_sd": self.fixed_effect_sd, "lkj_shape": self.lkj_shape,
                "scale_rate": self.scale_rate}


# ---------------------------------------------------------------------------
# Correlation parameterization


def cpc_cholesky(z) -> np.ndarray:
    """Lower Cholesky factor of the correlation matrix with partial
    correlations ``z = (z12, z13, z23)``."""
    z12, z13, z23 = (float(v) for v in z)
    c12 = np.sqrt(1.0 - z12 * z12)
    c13 = np.sqrt(1.0 - z13 * z13)
    c23 = np.sqrt(1.0 - z23 * z23)
    return np.array([
        [1.0, 0.0, 0.0],
        [z12, c12, 0.0],
        [z13, z23 * c13, c13 * c23],
    ])


def cpc_corr(z) -> np.ndarray:
    L = cpc_cholesky(z)
    R = L @ L.T
    np.fill_diagonal(R, 1.0)
    return R


def corr_to_cpc(corr) -> np.ndarray:
    R = np.asarray(corr, dtype=float)
    z12, z13 = R[0, 1], R[0, 2]
    z23 = (R[1, 2] - z12 * z13) / np.sqrt((1.0 - z12**2) * (1.0 - z13**2))
    return np.array([z12, z13, z23])


def cpc_log_det(z) -> float:
    z = np.asarray(z, dtype=float)
    return float(np.sum(np.log1p(-z * z)))


def unconstrained_log_jacobian(y) -> float:
    """log |d corr / d y| for ``z = tanh(y)``."""
    z = np.tanh(np.asarray(y, dtype=float))
    one_m = 1.0 - z * z
    return float(0.5 * np.log(one_m[0]) + 0.5 * np.log(one_m[1]) + np.sum(np.log(one_m)))


def covariance_from_unconstrained(log_sd, y) -> CovarianceSpec:
    return CovarianceSpec(np.exp(np.asarray(log_sd, dtype=float)), cpc_corr(np.tanh(y)))


# ---------------------------------------------------------------------------
# Log densities


def gaussian_log_prior(x: np.ndarray, sd: float) -> float:
    x = np.asarray(x, dtype=float)
    return float(-0.5 * np.sum(x * x) / sd**2 - x.size * (np.log(sd) + 0.5 * LOG_2PI))


def mvn_log_density(eta: np.ndarray, cov: np.ndarray) -> float:
    """Sum of MVN(0, cov) log-densities over the rows of ``eta``."""
    eta = np.atleast_2d(np.asarray(eta, dtype=float))
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ModelError("random-effect covariance is not positive definite") from None
    half_logdet = float(np.sum(np.log(np.diag(L))))
    sol = np.linalg.solve(L, eta.T)
    n, k = eta.shape
    return float(-0.5 * np.sum(sol * sol) - n * (half_logdet + 0.5 * k * LOG_2PI))


def lkj_log_density(corr: np.ndarray, shape: float) -> float:
    """Unnormalized LKJ log-density, ``(shape - 1) * log det corr``."""
    sign, logdet = np.linalg.slogdet(corr)
    if sign <= 0:
        raise ModelError("correlation matrix is not positive definite")
    return float((shape - 1.0) * logdet)


def exponential_log_density(x, rate: float) -> float:
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        return -np.inf
    return float(np.sum(np.log(rate) - rate * x))


def log_prior(params: ModelParams, effects: RandomEffects, cov: CovarianceSpec, prior: PriorSpec) -> float:
    """Gaussian fixed effects + MVN random-effect rows + LKJ correlation +
    Exponential standard deviations."""
    lp = gaussian_log_prior(params.flat(), prior.fixed_effect_sd)
    lp += mvn_log_density(effects.eta, cov.matrix) if effects.eta.size else 0.0
    lp += lkj_log_density(cov.corr, prior.lkj_shape)
    lp += exponential_log_density(cov.sd, prior.scale_rate)
    return lp
