"""Wald, likelihood-ratio, and score statistics with closed-form intervals.

All three statistics reduce to the same quadratic W(theta) =
(r'mu_hat(theta) - r'mu0)^2 / h(theta)^2 evaluated at different variance
estimates: the Wald statistic uses the unconstrained theta_hat, the score
statistic uses the null-constrained theta_tilde (same code path, so
S(theta_tilde) == W(theta_tilde) bit for bit), and the likelihood ratio is
LR = -2*delta + W(theta_tilde) with delta the profile gap.

The closed-form intervals hold theta_tilde and delta fixed at the values
obtained under the user-specified null mu0 rather than re-solving the
constrained fit at every candidate endpoint; that is exactly what makes
the LR/score intervals closed-form, and it differs from full profile
inversion. Centers for the LR/score intervals are the *unconstrained* GLS
estimate evaluated at theta_tilde, r'mu_hat(theta_tilde).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.stats import norm

from .estimation import FitResult, delta as _delta
from .likelihood import _Workspace
from .model import MarginalModel, NullSpec

__all__ = [
    "StatisticKind",
    "Adjustment",
    "ConfidenceInterval",
    "DegenerateIntervalError",
    "wald_statistic",
    "lr_statistic",
    "score_statistic",
    "naive_ci",
    "critical_z",
]


class StatisticKind(str, Enum):
    WALD = "wald"
    LR = "lr"
    SCORE = "score"


class Adjustment(str, Enum):
    NONE = "none"
    BARTLETT = "bartlett"
    BARTLETT_BOOTSTRAP = "bartlett+bootstrap"


class DegenerateIntervalError(RuntimeError):
    """The LR interval radicand went negative (delta too negative).

    Carries diagnostics instead of emitting an empty interval.
    """

    def __init__(self, radicand: float, delta_value: float, detail: str = ""):
        self.radicand = radicand
        self.delta_value = delta_value
        msg = (f"degenerate likelihood-ratio interval: radicand {radicand:.6g} < 0 "
               f"(delta = {delta_value:.6g})")
        super().__init__(msg + (f"; {detail}" if detail else ""))


@dataclass(frozen=True)
class ConfidenceInterval:
    contrast_index: int
    kind: StatisticKind
    adjustment: Adjustment
    lower: float
    upper: float
    level: float
    center: float
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must lie in (0, 1)")
        if not self.lower <= self.center <= self.upper:
            raise ValueError("interval must satisfy lower <= center <= upper")

    @property
    def half_width(self) -> float:
        return 0.5 * (self.upper - self.lower)

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def critical_z(alpha: float) -> float:
    """Two-sided critical value z_{alpha/2}; z^2 is the chi2(1) upper-alpha point."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    return float(norm.ppf(1.0 - alpha / 2.0))


def _wald_at(model: MarginalModel, theta: np.ndarray, null: NullSpec) -> float:
    """W(theta) = (r'mu_hat(theta) - r'mu0)^2 / h(theta)^2 (shared code path)."""
    ws = _Workspace(model, theta)
    gap = float(null.r @ ws.mu_hat) - null.value
    return gap * gap / ws.h2(null)


def wald_statistic(model: MarginalModel, fit_hat: FitResult, null: NullSpec) -> float:
    """Wald statistic at the unconstrained variance estimate."""
    if fit_hat.constrained:
        raise ValueError("wald_statistic needs the unconstrained fit")
    return _wald_at(model, fit_hat.theta, null)


def score_statistic(model: MarginalModel, fit_tilde: FitResult, null: NullSpec) -> float:
    """Score statistic: W evaluated at the null-constrained variance estimate."""
    if not fit_tilde.constrained:
        raise ValueError("score_statistic needs the null-constrained fit")
    return _wald_at(model, fit_tilde.theta, null)


def lr_statistic(
    model: MarginalModel,
    fit_hat: FitResult,
    fit_tilde: FitResult,
    null: NullSpec,
) -> float:
    """Likelihood-ratio statistic as -2*delta + W(theta_tilde)."""
    if fit_hat.kind is not fit_tilde.kind:
        raise ValueError("lr_statistic: fits use different likelihood kinds")
    d = _delta(model, fit_hat.kind, fit_hat, fit_tilde)
    return -2.0 * d + _wald_at(model, fit_tilde.theta, null)


def naive_ci(
    model: MarginalModel,
    kind: StatisticKind,
    null: NullSpec,
    alpha: float,
    fit_hat: FitResult | None = None,
    fit_tilde: FitResult | None = None,
) -> ConfidenceInterval:
    """Unadjusted closed-form interval for the selected statistic.

    Wald needs fit_hat; score needs fit_tilde; LR needs both (for delta).
    """
    z = critical_z(alpha)
    if kind is StatisticKind.WALD:
        if fit_hat is None:
            raise ValueError("Wald interval needs the unconstrained fit")
        ws = _Workspace(model, fit_hat.theta)
        center = float(null.r @ ws.mu_hat)
        half = z * np.sqrt(ws.h2(null))
    elif kind is StatisticKind.SCORE:
        if fit_tilde is None:
            raise ValueError("score interval needs the null-constrained fit")
        ws = _Workspace(model, fit_tilde.theta)
        center = float(null.r @ ws.mu_hat)
        half = z * np.sqrt(ws.h2(null))
    else:
        if fit_hat is None or fit_tilde is None:
            raise ValueError("LR interval needs both fits")
        d = _delta(model, fit_hat.kind, fit_hat, fit_tilde)
        radicand = z * z + 2.0 * d
        if radicand < 0:
            raise DegenerateIntervalError(radicand, d)
        ws = _Workspace(model, fit_tilde.theta)
        center = float(null.r @ ws.mu_hat)
        half = np.sqrt(radicand) * np.sqrt(ws.h2(null))
    return ConfidenceInterval(
        contrast_index=null.index,
        kind=kind,
        adjustment=Adjustment.NONE,
        lower=center - float(half),
        upper=center + float(half),
        level=1.0 - alpha,
        center=center,
    )
