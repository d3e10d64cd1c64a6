"""Numerical maximization of the profile objectives.

Variance parameters are optimized on a transformed scale: elementwise log
for the nonnegative structures (compound symmetry, diagonal variants) and
log-Cholesky for the unstructured kind. The primary optimizer is L-BFGS-B
with the analytic gradient; when it fails to converge the fit falls back
to Nelder-Mead on the same transform. Every fit runs a small multi-start
(method-of-moments start and 0.1x / 10x scalings) and keeps the best
objective, breaking ties by smaller ||theta||.

A maximizer that walks to the theta >= 0 admissibility boundary is snapped
to the exact boundary point when the boundary objective is at least as
good, and flagged; downstream small-sample adjustments warn on flagged
fits because the expansion assumes an interior point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .likelihood import LikelihoodKind, ProfileObjective, _Workspace
from .model import MarginalModel, ModelError, NullSpec, StructureKind

__all__ = ["FitConfig", "FitResult", "FitError", "fit", "delta"]

_LOG_FLOOR = -46.0   # exp(-46) ~ 1e-20, effectively the zero boundary


class FitError(RuntimeError):
    """Estimation failed in a way that cannot be flagged and returned."""


@dataclass(frozen=True)
class FitConfig:
    """Optimizer settings for fit().

    initial_theta overrides the method-of-moments starting rule (useful for
    warm starts, e.g. bootstrap refits); restarts still scale it.
    """

    tolerance: float = 1e-8      # gradient-norm convergence target (theta scale)
    max_iterations: int = 500
    restarts: int = 3            # starts: {MoM, 0.1x, 10x}, truncated to this count
    initial_theta: np.ndarray | None = None
    boundary_tol: float = 1e-8   # theta below this scale is checked against the exact boundary

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be > 0")
        if self.max_iterations < 1 or self.restarts < 1:
            raise ValueError("max_iterations and restarts must be >= 1")


@dataclass(frozen=True)
class FitResult:
    """A maximized profile objective.

    theta is always in the element parametrization of V. mu is mu_hat(theta)
    for unconstrained fits and mu_tilde(theta) for constrained fits; h2 is
    populated only when a constraint is active.
    """

    theta: np.ndarray
    kind: LikelihoodKind
    constrained: bool
    objective_value: float
    mu: np.ndarray
    h2: float | None
    converged: bool
    iterations: int
    boundary_flag: bool
    null: NullSpec | None = field(default=None, repr=False)


class _Transform:
    """Bijection between unconstrained optimizer coordinates and theta."""

    def __init__(self, model: MarginalModel):
        self.kind = model.structure.kind
        self.p = model.structure.p
        self.q = model.structure.n_params

    def to_theta(self, gamma: np.ndarray) -> np.ndarray:
        if self.kind is not StructureKind.UNSTRUCTURED:
            return np.exp(np.maximum(gamma, _LOG_FLOOR))
        ell = self._l_matrix(gamma)
        v = ell @ ell.T
        return self._elements(v)

    def from_theta(self, theta: np.ndarray) -> np.ndarray:
        if self.kind is not StructureKind.UNSTRUCTURED:
            return np.log(np.maximum(theta, math.exp(_LOG_FLOOR)))
        v = np.zeros((self.p, self.p))
        idx = 0
        for i in range(self.p):
            v[i, i] = theta[idx]
            idx += 1
        for i in range(self.p):
            for j in range(i + 1, self.p):
                v[i, j] = v[j, i] = theta[idx]
                idx += 1
        w, u = np.linalg.eigh(v)
        v = (u * np.maximum(w, 1e-12)) @ u.T     # project to PD before Cholesky
        ell = np.linalg.cholesky(v)
        gamma = np.concatenate([np.log(np.diag(ell)),
                                ell[np.tril_indices(self.p, k=-1)]])
        return gamma

    def chain(self, gamma: np.ndarray) -> np.ndarray:
        """Jacobian dtheta/dgamma, shape (q, q)."""
        if self.kind is not StructureKind.UNSTRUCTURED:
            return np.diag(np.exp(np.maximum(gamma, _LOG_FLOOR)))
        ell = self._l_matrix(gamma)
        jac = np.zeros((self.q, self.q))
        for g in range(self.q):
            de = self._dl_dgamma(gamma, g, ell)
            dv = de @ ell.T + ell @ de.T
            jac[:, g] = self._elements(dv)
        return jac

    def _l_matrix(self, gamma: np.ndarray) -> np.ndarray:
        ell = np.zeros((self.p, self.p))
        np.fill_diagonal(ell, np.exp(np.clip(gamma[: self.p], _LOG_FLOOR, 46.0)))
        ell[np.tril_indices(self.p, k=-1)] = gamma[self.p:]
        return ell

    def _dl_dgamma(self, gamma: np.ndarray, g: int, ell: np.ndarray) -> np.ndarray:
        de = np.zeros((self.p, self.p))
        if g < self.p:
            de[g, g] = ell[g, g]                 # diag is exp(gamma_g)
        else:
            rows, cols = np.tril_indices(self.p, k=-1)
            de[rows[g - self.p], cols[g - self.p]] = 1.0
        return de

    def _elements(self, v: np.ndarray) -> np.ndarray:
        out = [v[i, i] for i in range(self.p)]
        for i in range(self.p):
            for j in range(i + 1, self.p):
                out.append(v[i, j])
        return np.asarray(out)


def _mom_start(model: MarginalModel) -> float:
    """Crude heterogeneity scale from OLS residuals minus within-study noise."""
    mu0, *_ = np.linalg.lstsq(model.X, model.y, rcond=None)
    resid = model.y - model.X @ mu0
    within = float(np.mean(np.diag(model.R)))
    scale = float(np.mean(resid**2)) - within
    floor = 1e-3 * (within + float(np.mean(resid**2))) + 1e-8
    return max(scale, floor)


def _start_thetas(model: MarginalModel, config: FitConfig) -> list[np.ndarray]:
    if config.initial_theta is not None:
        base = np.asarray(config.initial_theta, dtype=float)
        if base.shape != (model.q,):
            raise ValueError(f"initial_theta must have shape ({model.q},)")
        base = np.maximum(base, 1e-10)
    else:
        s = _mom_start(model)
        if model.structure.kind is StructureKind.UNSTRUCTURED:
            base = np.concatenate([np.full(model.p, s), np.zeros(model.q - model.p)])
        else:
            base = np.full(model.q, s)
    starts = [base, 0.1 * base, 10.0 * base]
    if model.structure.kind is StructureKind.UNSTRUCTURED:
        # keep off-diagonals at zero when scaling a generic start
        starts = [base]
        for f in (0.1, 10.0):
            s2 = base.copy()
            s2[: model.p] *= f
            starts.append(s2)
    return starts[: config.restarts]


def fit(
    model: MarginalModel,
    kind: LikelihoodKind,
    constraint: NullSpec | None = None,
    config: FitConfig | None = None,
) -> FitResult:
    """Maximize the selected profile objective over admissible theta.

    Returns a FitResult whose objective_value equals the profile objective
    at the returned theta; non-convergence is flagged on the result, never
    silently dropped.
    """
    config = config or FitConfig()
    obj = ProfileObjective(model=model, kind=kind, constraint=constraint)
    tf = _Transform(model)

    def neg(gamma: np.ndarray) -> tuple[float, np.ndarray]:
        theta = tf.to_theta(gamma)
        try:
            val, grad_theta = obj.value_and_gradient(theta)
        except ModelError:
            return 1e12, np.zeros_like(gamma)
        return -val, -(tf.chain(gamma).T @ grad_theta)

    best = None
    total_iter = 0
    for theta0 in _start_thetas(model, config):
        gamma0 = tf.from_theta(theta0)
        res = minimize(neg, gamma0, jac=True, method="L-BFGS-B",
                       options={"maxiter": config.max_iterations,
                                "ftol": 1e-14, "gtol": 1e-12})
        total_iter += int(res.nit)
        if not res.success or not np.isfinite(res.fun):
            # gradient unreliable (often near a boundary): bounded simplex fallback
            res2 = minimize(lambda g: neg(g)[0], res.x if np.all(np.isfinite(res.x)) else gamma0,
                            method="Nelder-Mead",
                            options={"maxiter": 4 * config.max_iterations,
                                     "xatol": 1e-12, "fatol": 1e-14})
            total_iter += int(res2.nit)
            if np.isfinite(res2.fun) and (not np.isfinite(res.fun) or res2.fun <= res.fun):
                res = res2
        theta_hat = tf.to_theta(res.x)
        try:
            val = obj.value(theta_hat)
        except ModelError:
            continue
        cand = (val, -float(np.linalg.norm(theta_hat)), theta_hat, bool(res.success))
        if best is None or (cand[0], cand[1]) > (best[0], best[1]):
            best = cand
    if best is None:
        raise FitError("objective undefined on the entire search region")

    val, _, theta_hat, ok = best
    # Snap to the exact theta=0 boundary if the optimizer piled up against it.
    boundary = False
    if model.structure.kind is not StructureKind.UNSTRUCTURED:
        scale = max(float(np.max(theta_hat)), _mom_start(model), 1e-12)
        low = theta_hat < config.boundary_tol * scale + 1e-300
        if np.any(low):
            theta_b = np.where(low, 0.0, theta_hat)
            try:
                val_b = obj.value(theta_b)
            except ModelError:
                val_b = -np.inf
            if val_b >= val - 1e-9 * (1.0 + abs(val)):
                theta_hat, val, boundary = theta_b, max(val_b, val), True
    else:
        v = model.structure.v_matrix(theta_hat)
        w = np.linalg.eigvalsh(v)
        if w.min() <= config.boundary_tol * max(1.0, w.max()):
            boundary = True

    # Interior convergence check on the gradient norm.
    converged = bool(ok)
    if not boundary:
        try:
            gnorm = float(np.linalg.norm(obj.gradient(theta_hat)))
            converged = converged and gnorm <= max(config.tolerance, 1e-6 * (1.0 + abs(val)))
        except ModelError:
            converged = False

    ws = _Workspace(model, theta_hat)
    if constraint is None:
        mu, h2 = ws.mu_hat, None
    else:
        mu, h2 = ws.mu_tilde(constraint), ws.h2(constraint)
    return FitResult(
        theta=theta_hat,
        kind=kind,
        constrained=constraint is not None,
        objective_value=val,
        mu=mu,
        h2=h2,
        converged=converged,
        iterations=total_iter,
        boundary_flag=boundary,
        null=constraint,
    )


def delta(
    model: MarginalModel,
    kind: LikelihoodKind,
    fit_hat: FitResult,
    fit_tilde: FitResult,
) -> float:
    """Profile-likelihood gap l(mu_hat(theta_tilde), theta_tilde) - l(mu_hat(theta_hat), theta_hat).

    Always <= 0 up to solver tolerance because theta_hat maximizes the
    unconstrained profile; it is the O(1/N) term entering the closed-form
    likelihood-ratio interval.
    """
    if fit_hat.kind is not kind or fit_tilde.kind is not kind:
        raise ValueError("delta: fits must both use the requested likelihood kind")
    if fit_hat.constrained or not fit_tilde.constrained:
        raise ValueError("delta: expected (unconstrained, constrained) fits")
    unconstrained = ProfileObjective(model=model, kind=kind, constraint=None)
    return unconstrained.value(fit_tilde.theta) - fit_hat.objective_value
