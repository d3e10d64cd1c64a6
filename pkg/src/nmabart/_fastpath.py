"""Vectorized profile-score refits for diagonal-affine models.

When every study contributes a single contrast and the structure has one
parameter, Sigma(theta) = diag(d) + theta * w with w_i = x_i' B x_i, and a
batch of refits (bootstrap sets, oracle replications) reduces to a
bracketed bisection on the vectorized profile score. A nonpositive score
at the origin means the maximizer sits on the theta = 0 boundary.

Callers must cross-validate a few entries against fit(); this module is an
accelerator, not a second estimator definition.
"""

from __future__ import annotations

import numpy as np

from .likelihood import LikelihoodKind
from .model import MarginalModel


def diagonal_weights(model: MarginalModel) -> np.ndarray | None:
    """Per-row heterogeneity weights, or None when the fast path does not apply."""
    if model.q != 1:
        return None
    if any(sl.stop - sl.start != 1 for sl in model.study_slices):
        return None
    return np.diag(model.sigma_dot(0)).copy()


def batch_refit(
    ys: np.ndarray,
    x_mat: np.ndarray,
    d_diag: np.ndarray,
    w: np.ndarray,
    kind: LikelihoodKind,
    theta_hi: float,
    null_index: int | None = None,
    mu0: float = 0.0,
) -> np.ndarray:
    """Per-row maximizers of the (constrained) profile objective over theta >= 0.

    ys has shape (B, N); the return value has shape (B,). With null_index
    given, the residual uses the null-constrained mean (r'mu = mu0 for the
    selector at that index).
    """
    b = ys.shape[0]
    xxt = np.einsum("ni,nj->nij", x_mat, x_mat)
    p = x_mat.shape[1]
    r = None
    if null_index is not None:
        r = np.zeros(p)
        r[null_index] = 1.0

    def score(theta_vec: np.ndarray) -> np.ndarray:
        v = 1.0 / (d_diag[None, :] + theta_vec[:, None] * w[None, :])    # (B, N)
        a = np.einsum("bn,nij->bij", v, xxt)
        rhs = np.einsum("bn,ni,bn->bi", v, x_mat, ys)
        a_inv = np.linalg.inv(a)
        mu = np.einsum("bij,bj->bi", a_inv, rhs)
        if r is not None:
            a_inv_r = a_inv @ r
            h2 = a_inv_r[:, null_index]
            gap = mu[:, null_index] - mu0
            mu = mu - (gap / h2)[:, None] * a_inv_r
        resid = ys - mu @ x_mat.T
        vw = v * w[None, :]
        s = -0.5 * vw.sum(axis=1) + 0.5 * np.einsum("bn,bn->b", vw * v, resid**2)
        if kind is LikelihoodKind.REML:
            a2 = np.einsum("bn,nij->bij", vw * v, xxt)
            s += 0.5 * np.einsum("bij,bji->b", a_inv, a2)
        return s

    lo = np.zeros(b)
    hi = np.full(b, theta_hi)
    interior = score(np.full(b, 1e-12)) > 0.0
    for _ in range(60):
        need = interior & (score(hi) > 0.0)
        if not need.any():
            break
        hi[need] *= 4.0
    for _ in range(48):
        mid = 0.5 * (lo + hi)
        above = score(mid) > 0.0
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    out = 0.5 * (lo + hi)
    out[~interior] = 0.0
    return out


def batch_h2_and_gls(
    ys: np.ndarray,
    thetas: np.ndarray,
    x_mat: np.ndarray,
    d_diag: np.ndarray,
    w: np.ndarray,
    r: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """(h^2(theta_b), r'mu_hat(theta_b)) per row, on the fast path."""
    v = 1.0 / (d_diag[None, :] + thetas[:, None] * w[None, :])
    xxt = np.einsum("ni,nj->nij", x_mat, x_mat)
    a = np.einsum("bn,nij->bij", v, xxt)
    a_inv = np.linalg.inv(a)
    h2 = np.einsum("i,bij,j->b", r, a_inv, r)
    rhs = np.einsum("bn,ni,bn->bi", v, x_mat, ys)
    mu = np.einsum("bij,bj->bi", a_inv, rhs)
    return h2, mu @ r
