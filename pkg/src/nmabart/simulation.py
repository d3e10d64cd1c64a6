"""Data-generating process and coverage-probability studies.

A scenario draws, per study: a common per-arm subject count n ~ U(30, 300)
(rounded to an integer), a reference-arm event probability ~ U(0.05, 0.65),
study-level true effects beta ~ N(mu, V(theta)) on the log-odds-ratio scale
(base 10 by default), arm probabilities via odds_t = odds_ref * base^beta_t,
and binomial event counts. Contrast estimates and within-study covariances
come from the arm-level converter with continuity correction 0.5 applied to
all cells of any contrast table containing a zero cell.

Replications are independent with per-replication RNG streams derived from
(seed, replication index), so datasets are identical across runs and thread
counts, and all methods within a replication share the same dataset
(common random numbers).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .bartlett import adjusted_ci
from .bootstrap import BootstrapConfig, bootstrap_adjusted_ci
from .estimation import FitConfig, FitResult, fit
from .intervals import (
    Adjustment,
    ConfidenceInterval,
    DegenerateIntervalError,
    StatisticKind,
    naive_ci,
)
from .likelihood import LikelihoodKind
from .model import (
    CovarianceStructure,
    MarginalModel,
    NullSpec,
    StructureKind,
    Study,
    assemble,
    study_from_arms,
)

__all__ = [
    "ScenarioSpec",
    "MethodSpec",
    "CoverageRow",
    "CoverageReport",
    "CoverageError",
    "generate_dataset",
    "coverage_study",
    "simulation_one",
    "simulation_two",
    "scenario_from_mapping",
    "scenario_to_mapping",
]


class CoverageError(RuntimeError):
    """Coverage study aborted (per-replication failure rate too high)."""


@dataclass(frozen=True)
class ScenarioSpec:
    """Network design and generator settings for one coverage scenario.

    designs lists (labels..., count) entries where the last label is the
    comparator arm; two-arm entries are ((treatment, comparator), count).
    true_mu is ordered by the sorted non-reference labels, as in the
    assembled model.
    """

    designs: tuple[tuple[tuple[str, ...], int], ...]
    true_mu: np.ndarray
    theta_true: float
    reference: str = "P"
    subjects_range: tuple[float, float] = (30.0, 300.0)
    placebo_prob_range: tuple[float, float] = (0.05, 0.65)
    structure: StructureKind = StructureKind.COMPOUND_SYMMETRY
    null_values: np.ndarray | None = None   # defaults to true_mu
    replications: int = 1000
    seed: int = 0
    log_base: float = 10.0
    continuity_correction: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "true_mu", np.asarray(self.true_mu, dtype=float))
        if self.null_values is not None:
            object.__setattr__(self, "null_values", np.asarray(self.null_values, dtype=float))
        designs = tuple((tuple(labels), int(count)) for labels, count in self.designs)
        object.__setattr__(self, "designs", designs)
        if any(count < 1 for _, count in designs):
            raise ValueError("study counts must be >= 1")
        lo, hi = self.placebo_prob_range
        if not (0.0 < lo < hi < 1.0):
            raise ValueError("placebo probability range must lie within (0, 1)")

    @property
    def labels(self) -> tuple[str, ...]:
        out: set[str] = set()
        for labels, _ in self.designs:
            out |= set(labels)
        return tuple(sorted(out - {self.reference}))

    @property
    def p(self) -> int:
        return len(self.labels)

    @property
    def n_studies(self) -> int:
        return sum(c for _, c in self.designs)

    @property
    def nulls(self) -> np.ndarray:
        return self.true_mu if self.null_values is None else self.null_values


@dataclass(frozen=True)
class MethodSpec:
    """One (estimator, statistic, adjustment) combination to evaluate."""

    estimator: LikelihoodKind
    statistic: StatisticKind
    adjustment: Adjustment
    boot_m: int = 501
    bias_at: str = "tilde"

    @property
    def name(self) -> str:
        return f"{self.estimator.value}:{self.statistic.value}:{self.adjustment.value}"


@dataclass
class CoverageRow:
    estimator: str
    statistic: str
    adjustment: str
    contrast: str
    coverage: float          # percent
    mc_se: float             # percent
    mean_width: float
    replications: int
    failures: int
    wall_time: float


@dataclass
class CoverageReport:
    rows: list[CoverageRow]
    scenario_seed: int
    replications: int
    failures: int
    wall_time: float

    _COLS = ("estimator", "statistic", "adjustment", "contrast", "coverage",
             "mc_se", "mean_width", "replications", "failures", "wall_time")

    def to_tsv(self) -> str:
        lines = ["\t".join(self._COLS)]
        for r in self.rows:
            lines.append("\t".join(
                f"{getattr(r, c):.6g}" if isinstance(getattr(r, c), float) else str(getattr(r, c))
                for c in self._COLS))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        payload = {
            "seed": self.scenario_seed,
            "replications": self.replications,
            "failures": self.failures,
            "wall_time": self.wall_time,
            "rows": [{c: getattr(r, c) for c in self._COLS} for r in self.rows],
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def lookup(self, estimator: str, statistic: str, adjustment: str, contrast: str) -> CoverageRow:
        for r in self.rows:
            if (r.estimator, r.statistic, r.adjustment, r.contrast) == \
                    (estimator, statistic, adjustment, contrast):
                return r
        raise KeyError((estimator, statistic, adjustment, contrast))


def _psd_sqrt(v: np.ndarray) -> np.ndarray:
    w, u = np.linalg.eigh(v)
    return (u * np.sqrt(np.clip(w, 0.0, None))) @ u.T


def generate_dataset(spec: ScenarioSpec, rep_index: int) -> list[Study]:
    """One replication's studies; deterministic in (spec.seed, rep_index)."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed, spawn_key=(rep_index,)))
    labels = spec.labels
    pos = {lab: k for k, lab in enumerate(labels)}
    structure = CovarianceStructure(kind=spec.structure, p=spec.p)
    v_sqrt = _psd_sqrt(structure.v_matrix(np.array([spec.theta_true])))
    lo_n, hi_n = spec.subjects_range
    lo_p, hi_p = spec.placebo_prob_range
    studies: list[Study] = []
    counter = 0
    for arm_labels, count in spec.designs:
        comparator = arm_labels[-1]
        for _ in range(count):
            n = int(round(rng.uniform(lo_n, hi_n)))
            p_ref = rng.uniform(lo_p, hi_p)
            beta = spec.true_mu + v_sqrt @ rng.standard_normal(spec.p)
            odds_ref = p_ref / (1.0 - p_ref)
            arms = []
            for lab in arm_labels:
                b = 0.0 if lab == spec.reference else beta[pos[lab]]
                odds = odds_ref * spec.log_base**b
                prob = odds / (1.0 + odds)
                events = int(rng.binomial(n, prob))
                arms.append((lab, events, n))
            counter += 1
            studies.append(study_from_arms(
                f"{'-'.join(arm_labels)}-{counter}", arms, comparator,
                correction=spec.continuity_correction, base=spec.log_base))
    return studies


def _build_ci(
    method: MethodSpec,
    model: MarginalModel,
    null: NullSpec,
    alpha: float,
    fit_hat: FitResult,
    fit_tilde: FitResult | None,
    boot_seed: int,
) -> ConfidenceInterval:
    if method.adjustment is Adjustment.NONE:
        return naive_ci(model, method.statistic, null, alpha, fit_hat, fit_tilde)
    if method.adjustment is Adjustment.BARTLETT:
        return adjusted_ci(model, method.statistic, null, alpha, fit_hat, fit_tilde,
                           bias_at=method.bias_at)
    cfg = BootstrapConfig(m=method.boot_m, seed=boot_seed, alpha=alpha)
    return bootstrap_adjusted_ci(model, method.statistic, null, alpha,
                                 fit_hat, fit_tilde, cfg)


def coverage_study(
    spec: ScenarioSpec,
    methods: Sequence[MethodSpec],
    alpha: float = 0.05,
    fit_config: FitConfig | None = None,
    custom_methods: Sequence = (),
    parallel_width: int = 1,
    contrast_indices: Sequence[int] | None = None,
) -> CoverageReport:
    """Coverage probabilities of the requested interval methods.

    Per replication: generate a dataset, fit once per estimator (fits are
    shared across methods — common random numbers), build every method's
    interval per contrast at the scenario nulls, and record containment of
    the true value. A degenerate (empty) LR interval counts as non-covering
    with zero width. Replications where a fit raises are excluded and
    counted; more than 2% failures aborts. Results are independent of
    parallel_width (per-replication RNG streams, index-ordered aggregation);
    contrast_indices restricts evaluation to a subset of contrasts.

    custom_methods entries must expose `name` and
    `intervals(model, spec, rep_index) -> Sequence[ConfidenceInterval]`
    (calibration shims plug in here).
    """
    if not methods and not custom_methods:
        raise ValueError("at least one method is required")
    t0 = time.perf_counter()
    labels = spec.labels
    p = spec.p
    nulls = spec.nulls
    if len(nulls) != p:
        raise ValueError(f"null values have length {len(nulls)}, expected {p}")
    js = list(range(p)) if contrast_indices is None else [int(j) for j in contrast_indices]
    estimators = sorted({m.estimator for m in methods}, key=lambda k: k.value)
    need_tilde = {m.estimator for m in methods
                  if m.statistic in (StatisticKind.LR, StatisticKind.SCORE)
                  or m.adjustment is Adjustment.BARTLETT_BOOTSTRAP}
    cfg = fit_config or FitConfig()

    def one_rep(rep: int) -> list[tuple[str, int, bool, float]] | None:
        try:
            studies = generate_dataset(spec, rep)
            model = assemble(studies, CovarianceStructure(spec.structure, p), spec.reference)
            fits_hat = {est: fit(model, est, None, cfg) for est in estimators}
            fits_til: dict[tuple[LikelihoodKind, int], FitResult] = {}
            for est in need_tilde:
                for j in js:
                    null_j = NullSpec.for_contrast(j, p, float(nulls[j]))
                    fits_til[(est, j)] = fit(model, est, null_j, cfg)
            results: list[tuple[str, int, bool, float]] = []
            for m in methods:
                for j in js:
                    null_j = NullSpec.for_contrast(j, p, float(nulls[j]))
                    boot_seed = int(np.random.SeedSequence(
                        entropy=spec.seed, spawn_key=(0xB007, rep, j)).generate_state(1)[0])
                    try:
                        ci = _build_ci(m, model, null_j, alpha, fits_hat[m.estimator],
                                       fits_til.get((m.estimator, j)), boot_seed)
                        results.append((m.name, j, ci.contains(float(spec.true_mu[j])), ci.width))
                    except DegenerateIntervalError:
                        # empty interval: cannot contain the truth
                        results.append((m.name, j, False, 0.0))
            for cm in custom_methods:
                for ci in cm.intervals(model, spec, rep):
                    j = ci.contrast_index
                    results.append((cm.name, j, ci.contains(float(spec.true_mu[j])), ci.width))
            return results
        except Exception:
            return None

    if parallel_width > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=parallel_width) as pool:
            all_results = list(pool.map(one_rep, range(spec.replications)))
    else:
        all_results = [one_rep(rep) for rep in range(spec.replications)]

    hits: dict[tuple[str, int], int] = {}
    widths: dict[tuple[str, int], float] = {}
    counts: dict[tuple[str, int], int] = {}
    failures = sum(1 for r in all_results if r is None)
    if failures > max(0.02 * spec.replications, 1.0):
        raise CoverageError(f"{failures} failed replications out of "
                            f"{spec.replications} (> 2%)")
    for results in all_results:
        if results is None:
            continue
        for name, j, hit, width in results:
            key = (name, j)
            hits[key] = hits.get(key, 0) + int(hit)
            widths[key] = widths.get(key, 0.0) + width
            counts[key] = counts.get(key, 0) + 1

    wall = time.perf_counter() - t0
    rows: list[CoverageRow] = []
    names = [m.name for m in methods] + [cm.name for cm in custom_methods]
    for name in names:
        est, stat, adj = (name.split(":") + ["", ""])[:3]
        for j in range(p):
            # custom methods may report any contrast; standard ones only js
            key = (name, j)
            if key not in counts:
                continue
            nrep = counts[key]
            cov = hits[key] / nrep
            rows.append(CoverageRow(
                estimator=est,
                statistic=stat,
                adjustment=adj,
                contrast=f"{labels[j]} vs {spec.reference}",
                coverage=100.0 * cov,
                mc_se=100.0 * float(np.sqrt(cov * (1.0 - cov) / nrep)),
                mean_width=widths[key] / nrep,
                replications=nrep,
                failures=failures,
                wall_time=wall,
            ))
    return CoverageReport(rows=rows, scenario_seed=spec.seed,
                          replications=spec.replications, failures=failures,
                          wall_time=wall)


# ---------------------------------------------------------------------------
# Preset scenarios
# ---------------------------------------------------------------------------


def simulation_one(multiplier: int = 1, replications: int = 10_000, seed: int = 0) -> ScenarioSpec:
    """Three-comparison network: 10 two-arm studies (times `multiplier`)."""
    base = ((("A", "P"), 3), (("B", "P"), 2), (("C", "P"), 2),
            (("A", "B"), 2), (("A", "C"), 1))
    designs = tuple((labels, count * multiplier) for labels, count in base)
    return ScenarioSpec(
        designs=designs,
        true_mu=np.array([0.398, 0.702, 0.866]),
        theta_true=0.3,
        replications=replications,
        seed=seed,
    )


def simulation_two(total_studies: int = 20, replications: int = 1000, seed: int = 0) -> ScenarioSpec:
    """Six-comparison network with 20 or 30 two-arm studies."""
    counts = {
        20: (4, 2, 2, 4, 2, 2, 2, 2),
        30: (6, 3, 3, 6, 3, 3, 3, 3),
    }
    if total_studies not in counts:
        raise ValueError("total_studies must be 20 or 30")
    pairs = (("A", "P"), ("B", "P"), ("C", "P"), ("A", "B"),
             ("A", "C"), ("A", "D"), ("B", "E"), ("C", "F"))
    designs = tuple(zip(pairs, counts[total_studies]))
    return ScenarioSpec(
        designs=designs,
        true_mu=np.array([0.0, 0.093, 0.192, 0.301, 0.426, 0.577]),
        theta_true=0.3,
        replications=replications,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Scenario file mapping (YAML/JSON payloads)
# ---------------------------------------------------------------------------


def scenario_to_mapping(spec: ScenarioSpec) -> dict:
    return {
        "designs": [{"arms": list(labels), "count": count} for labels, count in spec.designs],
        "true_mu": [float(v) for v in spec.true_mu],
        "theta_true": spec.theta_true,
        "reference": spec.reference,
        "subjects_range": list(spec.subjects_range),
        "placebo_prob_range": list(spec.placebo_prob_range),
        "structure": spec.structure.value,
        "null_values": None if spec.null_values is None else [float(v) for v in spec.null_values],
        "replications": spec.replications,
        "seed": spec.seed,
        "log_base": spec.log_base,
        "continuity_correction": spec.continuity_correction,
    }


def scenario_from_mapping(data: dict) -> ScenarioSpec:
    designs = tuple((tuple(d["arms"]), int(d["count"])) for d in data["designs"])
    kwargs = dict(
        designs=designs,
        true_mu=np.asarray(data["true_mu"], dtype=float),
        theta_true=float(data["theta_true"]),
    )
    for key, cast in (("reference", str), ("replications", int), ("seed", int),
                      ("log_base", float), ("continuity_correction", float)):
        if key in data:
            kwargs[key] = cast(data[key])
    if "structure" in data:
        kwargs["structure"] = StructureKind(data["structure"])
    if data.get("subjects_range") is not None and "subjects_range" in data:
        kwargs["subjects_range"] = tuple(float(v) for v in data["subjects_range"])
    if data.get("placebo_prob_range") is not None and "placebo_prob_range" in data:
        kwargs["placebo_prob_range"] = tuple(float(v) for v in data["placebo_prob_range"])
    if data.get("null_values") is not None:
        kwargs["null_values"] = np.asarray(data["null_values"], dtype=float)
    return ScenarioSpec(**kwargs)
