"""GLS estimators, constrained estimators, and the four profile objectives.

For a marginal model y ~ N(X mu, Sigma(theta)) the mean profile is always
available in closed form: the GLS estimator mu_hat(theta) for the
unconstrained problem, and for the null r'mu = r'mu0 the Lagrange solution

    mu_tilde(theta) = mu_hat(theta)
        - (r'mu_hat - r'mu0) / h(theta)^2 * (X'Sigma^-1 X)^-1 r,

with h(theta)^2 = r'(X'Sigma^-1 X)^-1 r. Plugging the profiled mean back in
gives four objective functions (ML / restricted-ML, unconstrained /
null-constrained) that are maximized over theta only.

Conventions: the ML objective is C1 - ln|Sigma|/2 - quadratic/2 with
C1 = -(N/2) ln 2pi; the restricted objective is C2 - ln|X'Sigma^-1 X|/2
- ln|Sigma|/2 - quadratic/2 with C2 = -((N-p)/2) ln 2pi, computed in the
ln|X'Sigma^-1 X| form (no error-contrast matrix is ever materialized).
Constants cancel in every statistic; they only fix absolute values.
Critical values are two-sided: z_{alpha/2}, with z_{alpha/2}^2 equal to
the chi-square(1) upper-alpha point.

Everything here is a pure function of (model, theta); all determinants and
positive-definiteness checks go through Cholesky factorizations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .model import MarginalModel, ModelError, NullSpec

__all__ = [
    "LikelihoodKind",
    "ProfileObjective",
    "gls_mu_hat",
    "h_squared",
    "mu_tilde",
    "objective",
    "objective_gradient",
]


class LikelihoodKind(str, Enum):
    ML = "ml"
    REML = "reml"


class _Workspace:
    """Factorizations shared by all likelihood quantities at one theta."""

    def __init__(self, model: MarginalModel, theta: np.ndarray):
        theta = np.asarray(theta, dtype=float)
        if not model.structure.admissible(theta):
            raise ModelError(f"theta {theta} is not admissible for {model.structure.kind.value}")
        self.model = model
        self.theta = theta
        sig = model.R.copy()
        for t_k, dk in zip(theta, model._sigma_dots):
            sig += t_k * dk
        try:
            self.sig_cf = cho_factor(sig, lower=True)
        except (LinAlgError, np.linalg.LinAlgError):
            raise ModelError("Sigma(theta) is not positive definite") from None
        self.sigma = sig
        self.logdet_sigma = 2.0 * float(np.sum(np.log(np.diag(self.sig_cf[0]))))
        self.sigma_inv_X = cho_solve(self.sig_cf, model.X)      # Sigma^-1 X
        self.sigma_inv_y = cho_solve(self.sig_cf, model.y)      # Sigma^-1 y
        a = model.X.T @ self.sigma_inv_X                        # X'Sigma^-1 X
        try:
            self.a_cf = cho_factor(0.5 * (a + a.T), lower=True)
        except (LinAlgError, np.linalg.LinAlgError):
            raise ModelError("X'Sigma^-1 X is singular") from None
        self.a = a
        self.logdet_a = 2.0 * float(np.sum(np.log(np.diag(self.a_cf[0]))))
        self.mu_hat = cho_solve(self.a_cf, model.X.T @ self.sigma_inv_y)

    def a_inv_r(self, null: NullSpec) -> np.ndarray:
        return cho_solve(self.a_cf, null.r)

    def h2(self, null: NullSpec) -> float:
        return float(null.r @ self.a_inv_r(null))

    def mu_tilde(self, null: NullSpec) -> np.ndarray:
        air = self.a_inv_r(null)
        h2 = float(null.r @ air)
        gap = float(null.r @ self.mu_hat) - null.value
        return self.mu_hat - (gap / h2) * air

    def quad_form(self, mu: np.ndarray) -> float:
        resid = self.model.y - self.model.X @ mu
        return float(resid @ cho_solve(self.sig_cf, resid))


@dataclass(frozen=True)
class ProfileObjective:
    """One of the four profile objectives, evaluable at any admissible theta."""

    model: MarginalModel
    kind: LikelihoodKind
    constraint: NullSpec | None = None

    def value(self, theta: np.ndarray) -> float:
        return objective(self, theta)

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        return objective_gradient(self, theta)

    def value_and_gradient(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        ws = _Workspace(self.model, theta)
        return _value(self, ws), _gradient(self, ws)


def gls_mu_hat(model: MarginalModel, theta: np.ndarray) -> np.ndarray:
    """GLS solution (X'Sigma^-1 X)^-1 X'Sigma^-1 y via SPD factorizations."""
    return _Workspace(model, theta).mu_hat


def h_squared(model: MarginalModel, theta: np.ndarray, null: NullSpec) -> float:
    """h(theta)^2 = r'(X'Sigma^-1 X)^-1 r, the GLS variance of r'mu_hat."""
    h2 = _Workspace(model, theta).h2(null)
    if h2 <= 0:
        raise ModelError("h^2 is not positive; X'Sigma^-1 X is numerically singular")
    return h2


def mu_tilde(model: MarginalModel, theta: np.ndarray, null: NullSpec) -> np.ndarray:
    """Null-constrained mean estimate; satisfies r'mu_tilde = r'mu0 exactly."""
    return _Workspace(model, theta).mu_tilde(null)


def _value(obj: ProfileObjective, ws: _Workspace) -> float:
    model = obj.model
    mu = ws.mu_hat if obj.constraint is None else ws.mu_tilde(obj.constraint)
    quad = ws.quad_form(mu)
    if obj.kind is LikelihoodKind.ML:
        c = -0.5 * model.N * math.log(2.0 * math.pi)
        return c - 0.5 * ws.logdet_sigma - 0.5 * quad
    c = -0.5 * (model.N - model.p) * math.log(2.0 * math.pi)
    return c - 0.5 * ws.logdet_a - 0.5 * ws.logdet_sigma - 0.5 * quad


def _gradient(obj: ProfileObjective, ws: _Workspace) -> np.ndarray:
    """Analytic gradient of the profile objective in the theta parametrization.

    The profiled mean satisfies the envelope condition (for the constrained
    problem the Lagrange term is annihilated because r'mu_tilde is constant
    in theta), so only the explicit theta-dependence contributes:

        d/dtheta_k = -tr(Sigma^-1 Sigma_k)/2 + e'Sigma^-1 Sigma_k Sigma^-1 e/2
                     [+ tr(A^-1 X'Sigma^-1 Sigma_k Sigma^-1 X)/2 for REML]

    with e = y - X mu evaluated at the profiled mean.
    """
    model = obj.model
    mu = ws.mu_hat if obj.constraint is None else ws.mu_tilde(obj.constraint)
    resid = model.y - model.X @ mu
    w = cho_solve(ws.sig_cf, resid)          # Sigma^-1 e
    sigma_inv = cho_solve(ws.sig_cf, np.eye(model.N))
    grad = np.zeros(model.q)
    for k in range(model.q):
        dk = model.sigma_dot(k)
        grad[k] = -0.5 * float(np.sum(sigma_inv * dk)) + 0.5 * float(w @ dk @ w)
        if obj.kind is LikelihoodKind.REML:
            b = ws.sigma_inv_X.T @ dk @ ws.sigma_inv_X   # X'Sigma^-1 Sigma_k Sigma^-1 X
            grad[k] += 0.5 * float(np.trace(cho_solve(ws.a_cf, b)))
    return grad


def objective(obj: ProfileObjective, theta: np.ndarray) -> float:
    """Value of the selected profile objective at theta."""
    return _value(obj, _Workspace(obj.model, theta))


def objective_gradient(obj: ProfileObjective, theta: np.ndarray) -> np.ndarray:
    """Gradient of the selected profile objective at theta (interior points)."""
    return _gradient(obj, _Workspace(obj.model, theta))
