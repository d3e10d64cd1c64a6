"""Second-order bias terms and Bartlett-type adjusted confidence intervals.

The coverage error of the three statistics is O(1/N) and is driven by
three expectations evaluated at the true theta and plugged in at the
estimate: E[a1^2] (bias from estimating theta inside the GLS mean map),
E[c1^2] and E[c2] (first- and second-order bias of h(theta_hat)^2). With

    u   = Sigma^-1 X A^-1 r,             A = X'Sigma^-1 X,
    P   = Sigma^-1 - Sigma^-1 X A^-1 X'Sigma^-1,
    d_k = u'Sigma_k u                    (= dh^2/dtheta_k),
    K_ij = u'Sigma_i P Sigma_j u,
    d_ij = -2 K_ij + u'Sigma_ij u        (= d2h^2/dtheta_i dtheta_j),
    V   = inverse information of theta_hat
          (ML: [tr(Sigma^-1 Sigma_i Sigma^-1 Sigma_j)/2]^-1,
           REML: [tr(P Sigma_i P Sigma_j)/2]^-1),
    b   = second-order estimator bias
          (ML: V g with g_i = -tr(A^-1 X'Sigma^-1 Sigma_i Sigma^-1 X)/2,
           REML: 0 — the curvature corrections cancel exactly for
           covariance structures linear in theta),

the terms are

    E[a1^2] = sum_ij V_ij K_ij / h^2,
    E[c1^2] = d'V d / h^4,
    E[c2]   = -(b'd + sum_ij V_ij d_ij / 2) / h^2.

For the homoscedastic benchmark Sigma = theta*I these evaluate to
E[a1^2] = 0, E[c1^2] = 2/N (ML) or 2/(N-p) (REML), E[c2] = p/N (ML) or 0
(REML), which reproduces the *exact* expansions of the sampling
distributions (W = Z^2 N / chi2_{N-p} under ML, etc.) through order 1/N
for all six statistic/estimator pairs. A naive reading of the adjustment
arithmetic might suggest 1/(2N) for the homoscedastic E[c1^2]; the
Monte-Carlo oracle below certifies 2/N decisively (see the test suite).

The adjustment factors rescale the chi-square(1) critical point x:

    w_ad(x)  = 1 + E[a1^2] + E[c2] + (1+x) E[c1^2] / 4      (Wald)
    lr_ad    = 1 + E[c2] + E[c1^2] / 4                      (LR)
    s_ad(x)  = 1 - E[a1^2] + E[c2] + (1-x) E[c1^2] / 4      (score)

and the adjusted intervals replace the naive half-widths by
z h(theta_hat) sqrt(w_ad(z^2)), sqrt(z^2 lr_ad + 2 delta) h(theta_tilde),
and z h(theta_tilde) sqrt(s_ad(z^2)) respectively.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from .estimation import FitConfig, FitResult, delta as _delta, fit
from .intervals import (
    Adjustment,
    ConfidenceInterval,
    DegenerateIntervalError,
    StatisticKind,
    critical_z,
)
from .likelihood import LikelihoodKind, _Workspace
from .model import MarginalModel, ModelError, NullSpec, StructureKind

__all__ = [
    "BiasTerms",
    "OracleBiasTerms",
    "AdjustmentFactors",
    "bias_terms",
    "adjustment_factors",
    "adjusted_ci",
    "mc_bias_oracle",
    "OracleError",
]

_FACTOR_FLOOR = 1e-6


class OracleError(RuntimeError):
    """Monte-Carlo oracle failed (e.g. too many refit failures)."""


@dataclass(frozen=True)
class BiasTerms:
    """The three second-order expectations at a given theta."""

    e_a1_sq: float
    e_c1_sq: float
    e_c2: float
    kind: LikelihoodKind
    theta_at: np.ndarray
    boundary: bool = False

    def __post_init__(self):
        if self.e_a1_sq < -1e-10 or self.e_c1_sq < -1e-10:
            raise ValueError("E[a1^2] and E[c1^2] are expectations of squares; got negative values")


@dataclass(frozen=True)
class OracleBiasTerms:
    """Brute-force estimates of the bias terms with Monte-Carlo standard errors.

    e_c2 is the mean of the total relative error c of h^2 (the analytic c1
    is mean-zero by construction, so E[c] estimates E[c2] at the expansion's
    order); the raw means of the empirical c1/c2 split are kept as
    diagnostics.
    """

    e_a1_sq: float
    se_a1_sq: float
    e_c1_sq: float
    se_c1_sq: float
    e_c2: float
    se_c2: float
    mean_c1: float
    mean_c2_split: float
    kind: LikelihoodKind
    theta_at: np.ndarray
    replications: int
    failures: int
    wall_time: float


@dataclass(frozen=True)
class AdjustmentFactors:
    """Bartlett-type factors evaluated at the chi-square critical point x."""

    w_ad: float
    lr_ad: float
    s_ad: float
    x: float
    clamped: bool = False


class _DerivKit:
    """All theta-derivative quantities the bias terms need, at one theta."""

    def __init__(self, model: MarginalModel, theta: np.ndarray, null: NullSpec):
        ws = _Workspace(model, theta)
        self.ws = ws
        n_obs = model.N
        sigma_inv = cho_solve(ws.sig_cf, np.eye(n_obs))
        a_inv_r = ws.a_inv_r(null)
        self.h2 = float(null.r @ a_inv_r)
        u = sigma_inv @ (model.X @ a_inv_r)              # Sigma^-1 X A^-1 r
        self.P = sigma_inv - ws.sigma_inv_X @ cho_solve(ws.a_cf, ws.sigma_inv_X.T)
        q = model.q
        self.d = np.zeros(q)
        self.K = np.zeros((q, q))
        self.g = np.zeros(q)
        t_vecs = []
        m_mats = []      # Sigma^-1 Sigma_k, for the ML information
        n_mats = []      # P Sigma_k, for the REML information
        for k in range(q):
            dk = model.sigma_dot(k)
            tk = dk @ u
            t_vecs.append(tk)
            self.d[k] = float(u @ tk)
            b = ws.sigma_inv_X.T @ dk @ ws.sigma_inv_X
            self.g[k] = -0.5 * float(np.trace(cho_solve(ws.a_cf, b)))
            m_mats.append(sigma_inv @ dk)
            n_mats.append(self.P @ dk)
        for i in range(q):
            pti = self.P @ t_vecs[i]
            for j in range(i, q):
                self.K[i, j] = self.K[j, i] = float(t_vecs[j] @ pti)
        info_ml = np.zeros((q, q))
        info_reml = np.zeros((q, q))
        for i in range(q):
            for j in range(i, q):
                info_ml[i, j] = info_ml[j, i] = 0.5 * float(np.sum(m_mats[i] * m_mats[j].T))
                info_reml[i, j] = info_reml[j, i] = 0.5 * float(np.sum(n_mats[i] * n_mats[j].T))
        self.info_ml = info_ml
        self.info_reml = info_reml
        self.d2 = -2.0 * self.K          # + u'Sigma_ij u, zero for linear structures
        for i in range(q):
            for j in range(q):
                dij = model.sigma_dot2(i, j)
                if np.any(dij):
                    self.d2[i, j] += float(u @ dij @ u)


def bias_terms(
    model: MarginalModel,
    theta: np.ndarray,
    kind: LikelihoodKind,
    null: NullSpec,
    estimator_bias: np.ndarray | None = None,
) -> BiasTerms:
    """Analytic second-order expectations at theta (plug in theta_hat or theta_tilde).

    estimator_bias overrides the second-order bias vector of theta_hat
    (default: V g for ML, zero for REML). A boundary theta triggers a
    warning and best-effort evaluation slightly inside the region.
    """
    theta = np.asarray(theta, dtype=float)
    boundary = _near_boundary(model, theta)
    theta_eval = theta
    if boundary:
        warnings.warn("bias terms evaluated at an admissibility boundary; "
                      "the second-order expansion assumes an interior point",
                      RuntimeWarning, stacklevel=2)
        if model.structure.kind is not StructureKind.UNSTRUCTURED:
            bump = 1e-10 * (1.0 + float(np.mean(np.diag(model.R))))
            theta_eval = np.maximum(theta, bump)
    kit = _DerivKit(model, theta_eval, null)
    info = kit.info_ml if kind is LikelihoodKind.ML else kit.info_reml
    v = np.linalg.inv(info)
    if estimator_bias is not None:
        b = np.asarray(estimator_bias, dtype=float)
    elif kind is LikelihoodKind.ML:
        b = v @ kit.g
    else:
        b = np.zeros(model.q)
    h2 = kit.h2
    e_a1 = float(np.sum(v * kit.K)) / h2
    e_c1 = float(kit.d @ v @ kit.d) / h2**2
    e_c2 = -(float(b @ kit.d) + 0.5 * float(np.sum(v * kit.d2))) / h2
    if not (np.isfinite(e_a1) and np.isfinite(e_c1) and np.isfinite(e_c2)):
        raise ModelError("bias terms are not finite at this theta")
    return BiasTerms(
        e_a1_sq=max(e_a1, 0.0),
        e_c1_sq=max(e_c1, 0.0),
        e_c2=e_c2,
        kind=kind,
        theta_at=theta,
        boundary=boundary,
    )


def _near_boundary(model: MarginalModel, theta: np.ndarray) -> bool:
    scale = 1.0 + float(np.max(np.abs(theta)))
    if model.structure.kind is StructureKind.UNSTRUCTURED:
        w = np.linalg.eigvalsh(model.structure.v_matrix(theta))
        return bool(w.min() <= 1e-8 * scale)
    return bool(np.any(theta <= 1e-12 * scale))


def adjustment_factors(bias: BiasTerms, x: float) -> AdjustmentFactors:
    """The three displayed adjustment factors at critical point x.

    A nonpositive factor (pathological small-sample case) is clamped to
    1e-6 with a loud warning; the clamp is recorded on the result.
    """
    a1, c1, c2 = bias.e_a1_sq, bias.e_c1_sq, bias.e_c2
    w_ad = 1.0 + a1 + c2 + 0.25 * (1.0 + x) * c1
    lr_ad = 1.0 + c2 + 0.25 * c1
    s_ad = 1.0 - a1 + c2 + 0.25 * (1.0 - x) * c1
    clamped = False
    out = []
    for name, f in (("w_ad", w_ad), ("lr_ad", lr_ad), ("s_ad", s_ad)):
        if f <= 0.0:
            warnings.warn(f"adjustment factor {name} = {f:.6g} <= 0; clamped to {_FACTOR_FLOOR} "
                          "(pathological small-sample case)", RuntimeWarning, stacklevel=2)
            f = _FACTOR_FLOOR
            clamped = True
        out.append(f)
    return AdjustmentFactors(w_ad=out[0], lr_ad=out[1], s_ad=out[2], x=x, clamped=clamped)


def adjusted_ci(
    model: MarginalModel,
    kind: StatisticKind,
    null: NullSpec,
    alpha: float,
    fit_hat: FitResult | None = None,
    fit_tilde: FitResult | None = None,
    bias_at: str = "tilde",
    estimator_bias: np.ndarray | None = None,
) -> ConfidenceInterval:
    """Bartlett-type adjusted closed-form interval.

    Bias terms are plugged in at theta_hat for the Wald interval and at
    theta_tilde for LR/score (bias_at="hat" switches the LR/score plug-in).
    """
    z = critical_z(alpha)
    x = z * z
    notes: list[str] = []
    if kind is StatisticKind.WALD:
        if fit_hat is None:
            raise ValueError("adjusted Wald interval needs the unconstrained fit")
        bias = bias_terms(model, fit_hat.theta, fit_hat.kind, null, estimator_bias)
        fac = adjustment_factors(bias, x)
        ws = _Workspace(model, fit_hat.theta)
        center = float(null.r @ ws.mu_hat)
        half = z * np.sqrt(ws.h2(null) * fac.w_ad)
    else:
        if fit_tilde is None:
            raise ValueError("adjusted LR/score intervals need the null-constrained fit")
        at = fit_tilde if bias_at == "tilde" else fit_hat
        if at is None:
            raise ValueError("bias_at='hat' needs the unconstrained fit")
        bias = bias_terms(model, at.theta, fit_tilde.kind, null, estimator_bias)
        fac = adjustment_factors(bias, x)
        ws = _Workspace(model, fit_tilde.theta)
        center = float(null.r @ ws.mu_hat)
        if kind is StatisticKind.LR:
            if fit_hat is None:
                raise ValueError("adjusted LR interval needs both fits")
            d = _delta(model, fit_tilde.kind, fit_hat, fit_tilde)
            radicand = x * fac.lr_ad + 2.0 * d
            if radicand < 0:
                raise DegenerateIntervalError(radicand, d, detail="after Bartlett adjustment")
            half = np.sqrt(radicand * ws.h2(null))
        else:
            half = z * np.sqrt(ws.h2(null) * fac.s_ad)
    if bias.boundary:
        notes.append("expansion unreliable at boundary")
    if fac.clamped:
        notes.append("adjustment factor clamped")
    return ConfidenceInterval(
        contrast_index=null.index,
        kind=kind,
        adjustment=Adjustment.BARTLETT,
        lower=center - float(half),
        upper=center + float(half),
        level=1.0 - alpha,
        center=center,
        notes=tuple(notes),
    )


# ---------------------------------------------------------------------------
# Monte-Carlo oracle
# ---------------------------------------------------------------------------


def mc_bias_oracle(
    model: MarginalModel,
    theta: np.ndarray,
    kind: LikelihoodKind,
    null: NullSpec,
    replications: int,
    seed: int,
    cross_validate: int = 200,
) -> OracleBiasTerms:
    """Brute-force verification of the analytic bias terms.

    Simulates y ~ N(X mu, Sigma(theta)), refits theta_hat per replication,
    and empirically averages a^2 = ((r'mu_hat(theta_hat) - r'mu_hat(theta)) / h(theta))^2
    and c = -(h(theta_hat)^2 - h(theta)^2) / h(theta)^2, splitting c into
    c1 = -sum_k (theta_hat_k - theta_k) d_k / h^2 and c2 = c - c1 via the
    analytic d_k at the true theta. The mean-map part of a cancels, so the
    simulation mean is taken as zero without loss.

    Models whose Sigma is diagonal-affine in a single parameter use a
    vectorized refitter validated in-run against fit() on the first
    `cross_validate` replications; anything else falls back to per-
    replication fit() calls. Refit failures above 1% abort.
    """
    if replications < 10_000:
        raise ValueError("oracle needs at least 1e4 replications")
    from ._fastpath import batch_h2_and_gls, batch_refit, diagonal_weights

    theta = np.asarray(theta, dtype=float)
    t0 = time.perf_counter()
    kit = _DerivKit(model, theta, null)
    h2 = kit.h2
    d = kit.d
    ws = _Workspace(model, theta)
    chol = np.linalg.cholesky(ws.sigma)
    n_obs = model.N
    fast_w = diagonal_weights(model)
    d_diag = np.diag(model.R).copy() if fast_w is not None else None

    a_sq = np.zeros(replications)
    c1_arr = np.zeros(replications)
    c_arr = np.zeros(replications)
    failures = 0

    chunk = 100_000
    cfg = FitConfig(restarts=2, initial_theta=np.maximum(theta, 1e-8))
    pos = 0
    chunk_idx = 0
    theta_hi = 8.0 * float(max(theta.max(), 1e-3))
    while pos < replications:
        m = min(chunk, replications - pos)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(chunk_idx,)))
        ys = rng.standard_normal((m, n_obs)) @ chol.T
        if fast_w is not None:
            th = batch_refit(ys, model.X, d_diag, fast_w, kind, theta_hi)
            if pos == 0 and cross_validate > 0:
                _check_fast_path(model, kind, ys[:cross_validate], th[:cross_validate], cfg)
            h2_hat, r_mu_hat = batch_h2_and_gls(ys, th, model.X, d_diag, fast_w, null.r)
            th = th[:, None]
        else:
            th = np.zeros((m, model.q))
            h2_hat = np.zeros(m)
            r_mu_hat = np.zeros(m)
            keep = np.ones(m, dtype=bool)
            for i in range(m):
                mdl_i = _with_y(model, ys[i])
                try:
                    res = fit(mdl_i, kind, None, cfg)
                    th[i] = res.theta
                    ws_i = _Workspace(mdl_i, res.theta)
                    h2_hat[i] = ws_i.h2(null)
                    r_mu_hat[i] = float(null.r @ ws_i.mu_hat)
                except Exception:
                    keep[i] = False
            failures += int((~keep).sum())
            th, h2_hat, r_mu_hat, ys = th[keep], h2_hat[keep], r_mu_hat[keep], ys[keep]
            m = int(keep.sum())
        # r'mu_hat(theta) for each replication at the true theta
        air = ws.a_inv_r(null)
        u = cho_solve(ws.sig_cf, model.X @ air)
        r_mu_true = ys @ u                 # r'A^-1 X'Sigma^-1 y
        a = (r_mu_hat - r_mu_true) / np.sqrt(h2)
        c = -(h2_hat - h2) / h2
        c1 = -((th - theta[None, :]) @ d) / h2
        a_sq[pos:pos + m] = a * a
        c1_arr[pos:pos + m] = c1
        c_arr[pos:pos + m] = c
        pos += m
        chunk_idx += 1

    a_sq = a_sq[:pos]
    c1_arr = c1_arr[:pos]
    c_arr = c_arr[:pos]
    if failures > 0.01 * replications:
        raise OracleError(f"{failures} refit failures out of {replications} replications (> 1%)")

    def mean_se(x: np.ndarray) -> tuple[float, float]:
        return float(np.mean(x)), float(np.std(x, ddof=1) / np.sqrt(len(x)))

    e_a1, se_a1 = mean_se(a_sq)
    e_c1, se_c1 = mean_se(c1_arr**2)
    e_c, se_c = mean_se(c_arr)
    mean_c1 = float(np.mean(c1_arr))
    return OracleBiasTerms(
        e_a1_sq=e_a1, se_a1_sq=se_a1,
        e_c1_sq=e_c1, se_c1_sq=se_c1,
        e_c2=e_c, se_c2=se_c,
        mean_c1=mean_c1,
        mean_c2_split=e_c - mean_c1,
        kind=kind,
        theta_at=theta,
        replications=pos,
        failures=failures,
        wall_time=time.perf_counter() - t0,
    )


def _with_y(model: MarginalModel, y: np.ndarray):
    """Cheap view of the model with a replaced response vector."""
    import dataclasses

    y = np.asarray(y, dtype=float)
    y.setflags(write=False)
    return dataclasses.replace(model, y=y)


def _check_fast_path(model, kind, ys, th_fast, cfg):
    worst = 0.0
    for i in range(ys.shape[0]):
        res = fit(_with_y(model, ys[i]), kind, None, cfg)
        worst = max(worst, abs(float(res.theta[0]) - float(th_fast[i])))
    if worst > 1e-6 * (1.0 + float(np.max(np.abs(th_fast)))):
        raise OracleError(f"fast-path refitter disagrees with fit() by {worst:.3g}")
