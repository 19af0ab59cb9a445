"""Weighted-quantile conformal core.

Everything here operates on a :class:`WeightedSupport`: a discrete signed
residual distribution given by residual values and nonnegative weights
summing to one. Intervals are built from the weighted quantiles

    F(rho)  = sum_i w_i * 1{r_i <= rho}
    Q(tau)  = inf{rho : F(rho) >= tau}
    C_alpha = [forecast + Q(alpha/2), forecast + Q(1 - alpha/2)]

Signed residuals let the lower and upper tails calibrate independently,
so the intervals are asymmetric whenever the residual distribution is.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from rarecp.errors import DataError
from rarecp.validation import check_unit_interval

WEIGHT_SUM_TOL = 1e-9


@dataclass(frozen=True)
class WeightedSupport:
    """Discrete residual distribution: values with weights summing to 1."""

    residuals: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        residuals = np.asarray(self.residuals, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "residuals", residuals)
        object.__setattr__(self, "weights", weights)
        if residuals.ndim != 1 or weights.ndim != 1:
            raise DataError("support residuals and weights must be 1-D")
        if residuals.size == 0:
            raise DataError("empty support is forbidden")
        if residuals.shape != weights.shape:
            raise DataError("support residuals and weights must align")
        if not (np.all(np.isfinite(residuals)) and np.all(np.isfinite(weights))):
            raise DataError("support contains non-finite values")
        if np.any(weights < 0.0):
            raise DataError("support weights must be nonnegative")
        if abs(float(weights.sum()) - 1.0) > WEIGHT_SUM_TOL:
            raise DataError(
                f"support weights must sum to 1 within {WEIGHT_SUM_TOL}, "
                f"got {float(weights.sum())!r}"
            )

    def __len__(self) -> int:
        return int(self.residuals.size)

    @classmethod
    def from_pairs(cls, pairs) -> "WeightedSupport":
        residuals = [r for r, _ in pairs]
        weights = [w for _, w in pairs]
        return cls(np.asarray(residuals), np.asarray(weights))

    @classmethod
    def uniform(cls, residuals) -> "WeightedSupport":
        residuals = np.asarray(residuals, dtype=np.float64)
        n = residuals.size
        return cls(residuals, np.full(n, 1.0 / n))

    def sorted(self) -> "WeightedSupport":
        order = np.argsort(self.residuals, kind="stable")
        return WeightedSupport(self.residuals[order], self.weights[order])


@dataclass(frozen=True)
class PredictionInterval:
    lower: float
    upper: float
    alpha_used: float

    def __post_init__(self):
        if not self.lower <= self.upper:
            raise DataError(
                f"interval bounds out of order: [{self.lower}, {self.upper}]"
            )
        check_unit_interval(self.alpha_used, "alpha_used")

    def covers(self, y: float) -> bool:
        """Closed-interval convention: endpoints count as covered."""
        return self.lower <= y <= self.upper

    @property
    def width(self) -> float:
        return self.upper - self.lower


def weighted_cdf(support: WeightedSupport, rho: float) -> float:
    """Right-continuous step CDF value at ``rho``."""
    return float(support.weights[support.residuals <= rho].sum())


def weighted_quantile(support: WeightedSupport, tau: float) -> float:
    """Smallest support residual whose cumulative weight reaches ``tau``.

    The infimum over the discrete support is taken literally: an exact hit
    on a cumulative-weight boundary includes that item. If rounding leaves
    the total marginally below ``tau`` the largest residual is returned.
    """
    tau = check_unit_interval(tau, "tau")
    order = np.argsort(support.residuals, kind="stable")
    cum = np.cumsum(support.weights[order])
    idx = int(np.searchsorted(cum, tau, side="left"))
    if idx >= cum.size:
        idx = cum.size - 1
    return float(support.residuals[order[idx]])


def build_interval(
    forecast: float, support: WeightedSupport, alpha: float
) -> PredictionInterval:
    """Two-sided interval from the weighted residual quantiles."""
    alpha = check_unit_interval(alpha, "alpha")
    lower = forecast + weighted_quantile(support, alpha / 2.0)
    upper = forecast + weighted_quantile(support, 1.0 - alpha / 2.0)
    return PredictionInterval(lower=lower, upper=upper, alpha_used=alpha)


def winkler_score(lower: float, upper: float, y: float, alpha: float) -> float:
    """Interval width plus (2/alpha)-scaled penalties for misses.

    Values exactly on an endpoint count as covered and incur no penalty.
    """
    alpha = check_unit_interval(alpha, "alpha")
    if lower > upper:
        raise DataError(f"interval bounds out of order: [{lower}, {upper}]")
    score = upper - lower
    if y < lower:
        score += (2.0 / alpha) * (lower - y)
    elif y > upper:
        score += (2.0 / alpha) * (y - upper)
    return score


@dataclass(frozen=True)
class AciState:
    """Online miscoverage level with its target, step size and clip bounds."""

    alpha_t: float
    alpha_target: float
    gamma: float
    alpha_min: float = 0.01
    alpha_max: float = 0.99

    def __post_init__(self):
        if not 0.0 < self.alpha_min < self.alpha_max < 1.0:
            raise DataError("require 0 < alpha_min < alpha_max < 1")
        check_unit_interval(self.alpha_target, "alpha_target")
        if not self.alpha_min <= self.alpha_t <= self.alpha_max:
            raise DataError("alpha_t must start inside the clip bounds")

    @classmethod
    def initial(
        cls,
        alpha_target: float,
        gamma: float,
        alpha_min: float = 0.01,
        alpha_max: float = 0.99,
    ) -> "AciState":
        return cls(
            alpha_t=alpha_target,
            alpha_target=alpha_target,
            gamma=gamma,
            alpha_min=alpha_min,
            alpha_max=alpha_max,
        )


def aci_update(state: AciState, covered: bool) -> AciState:
    """One online correction step: alpha += gamma * (target - err), clipped.

    ``err`` is 1 on a miss and 0 on a cover, so misses widen the next
    interval and covers tighten it. The interval at time t is built from
    the pre-update level; the update is applied after observing coverage.
    """
    err = 0.0 if covered else 1.0
    alpha_next = state.alpha_t + state.gamma * (state.alpha_target - err)
    alpha_next = min(max(alpha_next, state.alpha_min), state.alpha_max)
    return replace(state, alpha_t=alpha_next)


def baseline_weights(
    residuals, mode: str = "uniform", nexcp_lambda: float = 0.99
) -> WeightedSupport:
    """Classical weighting schemes over a calibration window.

    ``uniform`` assigns 1/n everywhere. ``nexcp`` decays geometrically with
    age (the last residual is the most recent, age 0), normalized to sum
    to one; ``nexcp_lambda = 1`` recovers uniform.
    """
    residuals = np.asarray(residuals, dtype=np.float64)
    if residuals.ndim != 1 or residuals.size == 0:
        raise DataError("baseline_weights needs a non-empty 1-D residual array")
    n = residuals.size
    if mode == "uniform":
        weights = np.full(n, 1.0 / n)
    elif mode == "nexcp":
        if not 0.0 < nexcp_lambda <= 1.0:
            raise DataError("nexcp_lambda must lie in (0, 1]")
        ages = np.arange(n - 1, -1, -1, dtype=np.float64)
        raw = nexcp_lambda**ages
        weights = raw / raw.sum()
    else:
        raise DataError(f"unknown weighting mode {mode!r}")
    return WeightedSupport(residuals, weights)
