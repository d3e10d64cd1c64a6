"""Domain types and assembly of the marginal random-effects NMA model.

A network meta-analysis dataset is a collection of studies, each reporting
one or more treatment contrasts (differences on some effect scale, e.g.
log10 odds ratio) together with a within-study covariance matrix. The
marginal model collapses everything to

    y = X mu + eps,   eps ~ N(0, Sigma(theta)),   Sigma = R + G(theta),

where X is the contrast design matrix (+1 for the treatment column, -1 for
the comparator column, reference treatment has no column), R is the
block-diagonal within-study covariance, and G(theta) = Z diag(V,...,V) Z'
is the between-study (heterogeneity) part with Z = blockdiag(X_1,...,X_n).

All supported covariance structures for V(theta) are linear in theta,
V(theta) = sum_k theta_k B_k with constant basis matrices B_k, which
downstream code relies on (dSigma/dtheta_k is constant, d2Sigma = 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

__all__ = [
    "Study",
    "StructureKind",
    "CovarianceStructure",
    "MarginalModel",
    "NullSpec",
    "ModelError",
    "assemble",
    "sigma",
    "within_cov_from_arms",
    "study_from_arms",
]

_SYM_TOL = 1e-10
_PSD_TOL = 1e-10


class ModelError(ValueError):
    """Invalid input data or an inadmissible model/parameter."""


@dataclass(frozen=True)
class Study:
    """Per-study contrast data.

    id        : unique study identifier
    contrasts : (treatment, comparator) label pairs, one per reported contrast
    y         : contrast estimates, shape (p_i,)
    cov       : within-study covariance R_i, shape (p_i, p_i), symmetric PSD
    """

    id: str
    contrasts: tuple[tuple[str, str], ...]
    y: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "contrasts", tuple((str(t), str(c)) for t, c in self.contrasts))
        p_i = len(self.contrasts)
        if p_i < 1:
            raise ModelError(f"study {self.id!r}: needs at least one contrast")
        if y.shape != (p_i,):
            raise ModelError(f"study {self.id!r}: {p_i} contrasts but {y.shape} estimates")
        if cov.shape != (p_i, p_i):
            raise ModelError(f"study {self.id!r}: covariance shape {cov.shape}, expected ({p_i},{p_i})")
        for t, c in self.contrasts:
            if t == c:
                raise ModelError(f"study {self.id!r}: contrast {t!r} vs {c!r} must use distinct labels")
        if not np.all(np.abs(cov - cov.T) <= _SYM_TOL * (1.0 + np.abs(cov).max())):
            raise ModelError(f"study {self.id!r}: within-study covariance is not symmetric")
        w = np.linalg.eigvalsh(0.5 * (cov + cov.T))
        if w.min() < -_PSD_TOL * max(1.0, abs(w.max())):
            raise ModelError(f"study {self.id!r}: within-study covariance is not positive semidefinite")

    @property
    def p_i(self) -> int:
        return len(self.contrasts)

    @property
    def labels(self) -> set[str]:
        out: set[str] = set()
        for t, c in self.contrasts:
            out.add(t)
            out.add(c)
        return out


class StructureKind(str, Enum):
    """Between-study covariance structures for V(theta)."""

    COMPOUND_SYMMETRY = "compound-symmetry"      # diag theta, off-diag theta/2 (1 param)
    DIAGONAL_HOMOGENEOUS = "diagonal-homogeneous"  # theta * I_p (1 param)
    DIAGONAL = "diagonal"                        # diag(theta_1..theta_p) (p params)
    UNSTRUCTURED = "unstructured"                # full symmetric V (p(p+1)/2 params)


@dataclass(frozen=True)
class CovarianceStructure:
    """A covariance structure kind together with the contrast dimension p.

    The parameter vector theta is always the linear "element" parametrization:
    V(theta) = sum_k theta_k * basis()[k]. For UNSTRUCTURED the ordering is
    the p diagonal entries first, then off-diagonals (i<j) in row-major order,
    matching V = ((theta_1, theta_3), (theta_3, theta_2)) at p = 2.
    """

    kind: StructureKind
    p: int

    def __post_init__(self):
        if self.p < 1:
            raise ModelError("structure dimension p must be >= 1")

    @property
    def n_params(self) -> int:
        if self.kind in (StructureKind.COMPOUND_SYMMETRY, StructureKind.DIAGONAL_HOMOGENEOUS):
            return 1
        if self.kind is StructureKind.DIAGONAL:
            return self.p
        return self.p * (self.p + 1) // 2

    def basis(self) -> list[np.ndarray]:
        """Constant basis matrices B_k with V(theta) = sum_k theta_k B_k."""
        p = self.p
        if self.kind is StructureKind.COMPOUND_SYMMETRY:
            return [0.5 * (np.eye(p) + np.ones((p, p)))]
        if self.kind is StructureKind.DIAGONAL_HOMOGENEOUS:
            return [np.eye(p)]
        if self.kind is StructureKind.DIAGONAL:
            return [np.diag(e) for e in np.eye(p)]
        out = [np.diag(e) for e in np.eye(p)]
        for i in range(p):
            for j in range(i + 1, p):
                b = np.zeros((p, p))
                b[i, j] = b[j, i] = 1.0
                out.append(b)
        return out

    def v_matrix(self, theta: np.ndarray) -> np.ndarray:
        theta = self._check_theta(theta)
        v = np.zeros((self.p, self.p))
        for t_k, b_k in zip(theta, self.basis()):
            v += t_k * b_k
        return v

    def admissible(self, theta: np.ndarray) -> bool:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            return False
        if not np.all(np.isfinite(theta)):
            return False
        if self.kind is StructureKind.UNSTRUCTURED:
            v = np.zeros((self.p, self.p))
            for t_k, b_k in zip(theta, self.basis()):
                v += t_k * b_k
            return bool(np.linalg.eigvalsh(v).min() >= -_PSD_TOL * (1.0 + abs(theta).max()))
        return bool(np.all(theta >= 0.0))

    def _check_theta(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ModelError(f"theta has shape {theta.shape}, structure needs ({self.n_params},)")
        if not self.admissible(theta):
            raise ModelError(f"theta {theta} is not admissible for {self.kind.value}")
        return theta


@dataclass(frozen=True)
class NullSpec:
    """Null hypothesis r' mu = r' mu0 for a single contrast of interest.

    r must be a selector vector (exactly one entry 1, rest 0); only r' mu0
    is ever consumed from mu0.
    """

    r: np.ndarray
    mu0: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float)
        mu0 = np.asarray(self.mu0, dtype=float)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "mu0", mu0)
        nz = np.nonzero(r)[0]
        if len(nz) != 1 or r[nz[0]] != 1.0:
            raise ModelError("r must have exactly one nonzero entry, equal to 1")
        if mu0.shape != r.shape:
            raise ModelError("mu0 must have the same length as r")

    @classmethod
    def for_contrast(cls, index: int, p: int, value: float = 0.0) -> "NullSpec":
        r = np.zeros(p)
        r[index] = 1.0
        mu0 = np.zeros(p)
        mu0[index] = value
        return cls(r=r, mu0=mu0)

    @property
    def index(self) -> int:
        return int(np.nonzero(self.r)[0][0])

    @property
    def value(self) -> float:
        return float(self.r @ self.mu0)


@dataclass(frozen=True)
class MarginalModel:
    """Assembled marginal model y = X mu + eps, eps ~ N(0, R + G(theta)).

    Immutable after assembly; safe to share across concurrent readers.
    """

    y: np.ndarray                 # (N,)
    X: np.ndarray                 # (N, p)
    R: np.ndarray                 # (N, N) block diagonal
    Z: np.ndarray                 # (N, n*p) block diagonal of the X_i
    structure: CovarianceStructure
    labels: tuple[str, ...]       # p treatment labels (reference excluded)
    reference: str
    study_ids: tuple[str, ...]
    study_slices: tuple[slice, ...]
    contrast_names: tuple[str, ...]  # per X column, "T vs reference"
    _sigma_dots: tuple[np.ndarray, ...] = field(repr=False, default=())

    @property
    def n(self) -> int:
        return len(self.study_ids)

    @property
    def N(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.structure.n_params

    def sigma_dot(self, k: int) -> np.ndarray:
        """Constant dSigma/dtheta_k for the linear structures."""
        return self._sigma_dots[k]

    def sigma_dot2(self, i: int, j: int) -> np.ndarray:
        """d2Sigma/dtheta_i dtheta_j; zero for every linear structure."""
        return np.zeros((self.N, self.N))


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    a.setflags(write=False)
    return a


def assemble(
    studies: Sequence[Study],
    structure: CovarianceStructure | StructureKind | str,
    reference: str,
) -> MarginalModel:
    """Assemble the marginal model from per-study contrast data.

    X rows use the contrast convention +1 in the treatment column, -1 in the
    comparator column; the reference treatment has no column. Blocks of R
    and Z are ordered as the input studies. Non-reference labels are ordered
    alphabetically.

    Raises ModelError for duplicate study ids, a disconnected network,
    rank-deficient X, or a reference absent from the data.
    """
    if not studies:
        raise ModelError("at least one study is required")
    ids = [s.id for s in studies]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ModelError(f"duplicate study ids: {dup}")

    all_labels: set[str] = set()
    for s in studies:
        all_labels |= s.labels
    if reference not in all_labels:
        raise ModelError(f"reference {reference!r} does not appear in any study")
    labels = tuple(sorted(all_labels - {reference}))
    p = len(labels)
    col = {lab: k for k, lab in enumerate(labels)}

    # Connectivity: every non-reference treatment reachable from the
    # reference through shared-study contrast edges.
    adj: dict[str, set[str]] = {lab: set() for lab in all_labels}
    for s in studies:
        for t, c in s.contrasts:
            adj[t].add(c)
            adj[c].add(t)
    seen = {reference}
    stack = [reference]
    while stack:
        for nxt in adj[stack.pop()]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    if seen != all_labels:
        missing = sorted(all_labels - seen)
        raise ModelError(f"network is disconnected: {missing} unreachable from {reference!r}")

    if isinstance(structure, str) and not isinstance(structure, StructureKind):
        structure = StructureKind(structure)
    if isinstance(structure, StructureKind):
        structure = CovarianceStructure(kind=structure, p=p)
    if structure.p != p:
        raise ModelError(f"structure dimension {structure.p} != number of non-reference treatments {p}")

    n = len(studies)
    N = sum(s.p_i for s in studies)
    y = np.zeros(N)
    X = np.zeros((N, p))
    R = np.zeros((N, N))
    Z = np.zeros((N, n * p))
    slices = []
    pos = 0
    for si, s in enumerate(studies):
        sl = slice(pos, pos + s.p_i)
        y[sl] = s.y
        R[sl, sl] = s.cov
        for row, (t, c) in enumerate(s.contrasts):
            if t != reference:
                X[pos + row, col[t]] = 1.0
            if c != reference:
                X[pos + row, col[c]] = -1.0
        Z[sl, si * p:(si + 1) * p] = X[sl, :]
        slices.append(sl)
        pos += s.p_i

    if np.linalg.matrix_rank(X) < p:
        raise ModelError(f"design matrix is rank deficient (rank < p = {p}); "
                         "the declared contrasts do not identify every treatment effect")
    if N <= p:
        raise ModelError(f"need N > p (got N = {N}, p = {p})")

    # dSigma/dtheta_k = blockdiag(X_i B_k X_i'); constant because V is linear.
    dots = []
    for b_k in structure.basis():
        dk = np.zeros((N, N))
        for sl in slices:
            xi = X[sl, :]
            dk[sl, sl] = xi @ b_k @ xi.T
        dots.append(_freeze(dk))

    return MarginalModel(
        y=_freeze(y),
        X=_freeze(X),
        R=_freeze(R),
        Z=_freeze(Z),
        structure=structure,
        labels=labels,
        reference=reference,
        study_ids=tuple(ids),
        study_slices=tuple(slices),
        contrast_names=tuple(f"{lab} vs {reference}" for lab in labels),
        _sigma_dots=tuple(dots),
    )


def sigma(model: MarginalModel, theta: np.ndarray) -> np.ndarray:
    """Marginal covariance Sigma(theta) = R + Z diag(V,...,V) Z'.

    Raises ModelError for inadmissible theta or a result that is not
    positive definite (degenerate input).
    """
    theta = model.structure._check_theta(theta)
    out = model.R.copy()
    for t_k, dk in zip(theta, model._sigma_dots):
        out += t_k * dk
    try:
        np.linalg.cholesky(out)
    except np.linalg.LinAlgError:
        raise ModelError("Sigma(theta) is not positive definite for the given theta") from None
    return out


def within_cov_from_arms(
    arms: Sequence[tuple[str, int, int]],
    comparator: str,
    correction: float = 0.0,
    base: float = 10.0,
) -> tuple[tuple[tuple[str, str], ...], np.ndarray, np.ndarray]:
    """Contrast estimates and within-study covariance from arm-level counts.

    arms is a sequence of (label, events, total); each non-comparator arm
    contributes the contrast (label, comparator) with estimate
    log_base(odds_label / odds_comparator) and variance
    (1/a + 1/b + 1/c + 1/d) / ln(base)^2. When any cell of a contrast's
    2x2 table is zero, `correction` is added to all four cells of that
    table; a zero cell with correction = 0 is an error. Contrasts sharing
    the comparator arm get covariance s1*s2/2.

    Returns (contrasts, estimates, cov).
    """
    if correction < 0:
        raise ModelError("correction must be >= 0")
    if base <= 0 or base == 1.0:
        raise ModelError("log base must be positive and != 1")
    by_label = {}
    for label, events, total in arms:
        if total < 1:
            raise ModelError(f"arm {label!r}: total must be >= 1")
        if not 0 <= events <= total:
            raise ModelError(f"arm {label!r}: events must lie in [0, total]")
        if label in by_label:
            raise ModelError(f"duplicate arm label {label!r}")
        by_label[str(label)] = (float(events), float(total))
    if comparator not in by_label:
        raise ModelError(f"comparator {comparator!r} not among the arms")

    treatments = [lab for lab, _, _ in arms if lab != comparator]
    lnb = math.log(base)
    estimates = np.zeros(len(treatments))
    variances = np.zeros(len(treatments))
    for k, t in enumerate(treatments):
        et, nt = by_label[t]
        ec, nc = by_label[comparator]
        cells = (et, nt - et, ec, nc - ec)
        if min(cells) == 0.0:
            if correction == 0.0:
                raise ModelError(f"zero cell in contrast {t!r} vs {comparator!r} with correction = 0")
            a, b, c, d = (x + correction for x in cells)
        else:
            a, b, c, d = cells
        estimates[k] = (math.log(a / b) - math.log(c / d)) / lnb
        variances[k] = (1.0 / a + 1.0 / b + 1.0 / c + 1.0 / d) / lnb**2

    s = np.sqrt(variances)
    cov = np.outer(s, s) / 2.0
    np.fill_diagonal(cov, variances)
    contrasts = tuple((t, comparator) for t in treatments)
    return contrasts, estimates, cov


def study_from_arms(
    study_id: str,
    arms: Sequence[tuple[str, int, int]],
    comparator: str,
    correction: float = 0.0,
    base: float = 10.0,
) -> Study:
    """Build a Study directly from arm-level counts."""
    contrasts, est, cov = within_cov_from_arms(arms, comparator, correction, base)
    return Study(id=study_id, contrasts=contrasts, y=est, cov=cov)
