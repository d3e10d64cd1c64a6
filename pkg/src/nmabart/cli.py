"""Command-line entry point: data ingestion, analysis runs, coverage studies.

Input formats
-------------
Contrast-level CSV with header
    study_id, treatment, comparator, estimate, std_error
plus an optional covariance companion CSV
    study_id, contrast_a, contrast_b, covariance
overriding the default shared-comparator rule (contrasts are referenced by
treatment label, or "treatment:comparator" when ambiguous). Arm-level CSV
    study_id, treatment, events, total
is detected by its header and converted through the arm-level converter.

Outputs: a per-contrast report (TSV or JSON), a forest-plot data file
(contrast, center, lower, upper, method), and a normalized copy of the
input that parses back to the identical model. Numbers are printed with 6
significant digits unless --full-precision is given. Exit codes: 0 ok,
2 input error, 3 non-converged fit (unless --allow-nonconverged).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .bartlett import adjusted_ci, adjustment_factors, bias_terms
from .bootstrap import BootstrapConfig, bootstrap_adjusted_ci, bootstrap_quantiles
from .estimation import FitConfig, fit, delta as profile_delta
from .intervals import (
    Adjustment,
    DegenerateIntervalError,
    StatisticKind,
    critical_z,
    naive_ci,
)
from .likelihood import LikelihoodKind
from .model import (
    ModelError,
    NullSpec,
    StructureKind,
    Study,
    assemble,
    study_from_arms,
)
from .simulation import (
    MethodSpec,
    coverage_study,
    scenario_from_mapping,
    simulation_one,
    simulation_two,
)

__all__ = ["AnalysisConfig", "parse_contrast_file", "run_analysis", "main",
           "emit_normalized", "CliInputError"]


class CliInputError(ValueError):
    """Malformed command-line input file or options."""


@dataclass(frozen=True)
class AnalysisConfig:
    estimator: LikelihoodKind = LikelihoodKind.REML
    statistics: tuple[StatisticKind, ...] = (StatisticKind.LR,)
    adjustment: Adjustment = Adjustment.BARTLETT
    alpha: float = 0.05
    nulls: dict[str, float] = field(default_factory=dict)   # label -> null value, default 0
    structure: StructureKind = StructureKind.COMPOUND_SYMMETRY
    boot_m: int = 1001
    seed: int = 0
    output_format: str = "tsv"
    log_base: float = 10.0
    reference: str | None = None
    full_precision: bool = False
    allow_nonconverged: bool = False

    def __post_init__(self):
        if not 0.0 < self.alpha < 0.5:
            raise CliInputError("alpha must lie in (0, 0.5)")
        if self.output_format not in ("tsv", "json"):
            raise CliInputError("format must be tsv or json")
        if not self.statistics:
            raise CliInputError("at least one statistic is required")


# ---------------------------------------------------------------------------
# Input parsing
# ---------------------------------------------------------------------------


def _read_rows(path: str | Path) -> tuple[list[str], list[tuple[int, dict]]]:
    path = Path(path)
    if not path.exists():
        raise CliInputError(f"input file {path} does not exist")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise CliInputError(f"{path}: empty file")
        header = [h.strip() for h in reader.fieldnames]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            rows.append((lineno, {(k or "").strip(): (v or "").strip()
                                  for k, v in row.items()}))
    if not rows:
        raise CliInputError(f"{path}: no data rows")
    return header, rows


def _float(row: dict, key: str, path, lineno: int) -> float:
    try:
        return float(row[key])
    except (KeyError, ValueError):
        raise CliInputError(f"{path}:{lineno}: bad or missing value for {key!r}") from None


def _int(row: dict, key: str, path, lineno: int) -> int:
    try:
        return int(row[key])
    except (KeyError, ValueError):
        raise CliInputError(f"{path}:{lineno}: bad or missing value for {key!r}") from None


def parse_contrast_file(
    path: str | Path,
    cov_path: str | Path | None = None,
    correction: float = 0.5,
    log_base: float = 10.0,
) -> list[Study]:
    """Parse contrast-level or arm-level CSV into studies.

    Errors carry file and line numbers. The optional covariance companion
    overrides the default shared-comparator covariance rule.
    """
    header, rows = _read_rows(path)
    contrast_cols = {"study_id", "treatment", "comparator", "estimate", "std_error"}
    arm_cols = {"study_id", "treatment", "events", "total"}
    if set(header) == arm_cols or (set(header) >= arm_cols and "estimate" not in header):
        return _parse_arm_rows(path, rows, correction, log_base)
    unknown = set(header) - contrast_cols
    if not set(header) >= contrast_cols:
        missing = sorted(contrast_cols - set(header))
        raise CliInputError(f"{path}: missing columns {missing}")
    if unknown:
        raise CliInputError(f"{path}: unknown columns {sorted(unknown)}")

    order: list[str] = []
    per_study: dict[str, list[tuple[str, str, float, float]]] = {}
    for lineno, row in rows:
        sid = row.get("study_id", "")
        if not sid:
            raise CliInputError(f"{path}:{lineno}: empty study_id")
        est = _float(row, "estimate", path, lineno)
        se = _float(row, "std_error", path, lineno)
        if se < 0:
            raise CliInputError(f"{path}:{lineno}: std_error must be >= 0")
        if sid not in per_study:
            per_study[sid] = []
            order.append(sid)
        per_study[sid].append((row["treatment"], row["comparator"], est, se))

    overrides = _parse_cov_overrides(cov_path) if cov_path else {}
    studies = []
    for sid in order:
        entries = per_study[sid]
        contrasts = tuple((t, c) for t, c, _, _ in entries)
        y = np.array([e for _, _, e, _ in entries])
        s = np.array([se for _, _, _, se in entries])
        cov = np.outer(s, s) / 2.0
        np.fill_diagonal(cov, s**2)
        # the default rule applies only to contrasts sharing the comparator
        for i in range(len(entries)):
            for j in range(i + 1, len(entries)):
                if entries[i][1] != entries[j][1]:
                    cov[i, j] = cov[j, i] = 0.0
        for (ca, cb), value in overrides.get(sid, {}).items():
            ia = _contrast_index(contrasts, ca, sid)
            ib = _contrast_index(contrasts, cb, sid)
            cov[ia, ib] = cov[ib, ia] = value
        try:
            studies.append(Study(id=sid, contrasts=contrasts, y=y, cov=cov))
        except ModelError as exc:
            raise CliInputError(f"{path}: study {sid!r}: {exc}") from None
    return studies


def _contrast_index(contrasts, token: str, sid: str) -> int:
    if ":" in token:
        t, c = token.split(":", 1)
        matches = [k for k, tc in enumerate(contrasts) if tc == (t, c)]
    else:
        matches = [k for k, (t, _) in enumerate(contrasts) if t == token]
    if len(matches) != 1:
        raise CliInputError(f"covariance file: contrast {token!r} is "
                            f"{'ambiguous' if matches else 'unknown'} in study {sid!r}")
    return matches[0]


def _parse_cov_overrides(path) -> dict[str, dict[tuple[str, str], float]]:
    header, rows = _read_rows(path)
    needed = {"study_id", "contrast_a", "contrast_b", "covariance"}
    if not set(header) >= needed:
        raise CliInputError(f"{path}: covariance file needs columns {sorted(needed)}")
    out: dict[str, dict[tuple[str, str], float]] = {}
    for lineno, row in rows:
        sid = row["study_id"]
        value = _float(row, "covariance", path, lineno)
        out.setdefault(sid, {})[(row["contrast_a"], row["contrast_b"])] = value
    return out


def _parse_arm_rows(path, rows, correction: float, log_base: float) -> list[Study]:
    order: list[str] = []
    per_study: dict[str, list[tuple[str, int, int]]] = {}
    for lineno, row in rows:
        sid = row.get("study_id", "")
        if not sid:
            raise CliInputError(f"{path}:{lineno}: empty study_id")
        arm = (row["treatment"], _int(row, "events", path, lineno),
               _int(row, "total", path, lineno))
        if sid not in per_study:
            per_study[sid] = []
            order.append(sid)
        per_study[sid].append(arm)
    studies = []
    for sid in order:
        arms = per_study[sid]
        if len(arms) < 2:
            raise CliInputError(f"{path}: study {sid!r} has fewer than two arms")
        comparator = arms[0][0]     # first-listed arm is the comparator
        try:
            studies.append(study_from_arms(sid, arms[1:] + arms[:1], comparator,
                                           correction=correction, base=log_base))
        except ModelError as exc:
            raise CliInputError(f"{path}: study {sid!r}: {exc}") from None
    return studies


def emit_normalized(studies: list[Study]) -> tuple[str, str]:
    """Canonical contrast CSV + covariance CSV that parse back identically."""
    lines = ["study_id,treatment,comparator,estimate,std_error"]
    cov_lines = ["study_id,contrast_a,contrast_b,covariance"]
    for s in studies:
        sd = np.sqrt(np.diag(s.cov))
        for k, (t, c) in enumerate(s.contrasts):
            lines.append(f"{s.id},{t},{c},{float(s.y[k])!r},{float(sd[k])!r}")
        for i in range(s.p_i):
            for j in range(i + 1, s.p_i):
                ti, ci = s.contrasts[i]
                tj, cj = s.contrasts[j]
                cov_lines.append(f"{s.id},{ti}:{ci},{tj}:{cj},{float(s.cov[i, j])!r}")
    return "\n".join(lines) + "\n", "\n".join(cov_lines) + "\n"


def _default_reference(studies: list[Study]) -> str:
    counts: dict[str, int] = {}
    for s in studies:
        for _, c in s.contrasts:
            counts[c] = counts.get(c, 0) + 1
    return max(sorted(counts), key=lambda lab: counts[lab])


# ---------------------------------------------------------------------------
# Analysis run
# ---------------------------------------------------------------------------


def _fmt(x, full: bool) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, float):
        return repr(x) if full else f"{x:.6g}"
    return str(x)


_REPORT_COLS = (
    "contrast", "statistic", "estimate", "null_value", "stat_value",
    "naive_lower", "naive_upper", "adj_lower", "adj_upper",
    "w_ad", "lr_ad", "s_ad", "z_star", "applied_factor",
    "theta_hat", "theta_tilde", "delta", "converged", "status",
)


def run_analysis(config: AnalysisConfig, input_path: str | Path,
                 cov_path: str | Path | None = None,
                 out_dir: str | Path | None = None) -> dict:
    """Run the configured analysis; returns the report payload.

    Writes report.{tsv|json}, forest.tsv, and the normalized input files
    when out_dir is given. Non-converged fits raise unless
    allow_nonconverged is set (they are still flagged in the report).
    """
    from .intervals import lr_statistic, score_statistic, wald_statistic

    studies = parse_contrast_file(input_path, cov_path, log_base=config.log_base)
    reference = config.reference or _default_reference(studies)
    model = assemble(studies, config.structure, reference)
    p = model.p
    nulls = np.zeros(p)
    for lab, value in config.nulls.items():
        if lab not in model.labels:
            raise CliInputError(f"--null {lab!r}: unknown treatment label "
                                f"(have {list(model.labels)})")
        nulls[model.labels.index(lab)] = value

    fit_cfg = FitConfig()
    fit_hat = fit(model, config.estimator, None, fit_cfg)
    nonconverged = not fit_hat.converged
    rows = []
    forest: list[tuple[str, float, float, float, str]] = []
    need_tilde = any(s in (StatisticKind.LR, StatisticKind.SCORE) for s in config.statistics) \
        or config.adjustment is not Adjustment.NONE

    for j in range(p):
        null_j = NullSpec.for_contrast(j, p, float(nulls[j]))
        fit_til = fit(model, config.estimator, null_j, fit_cfg) if need_tilde else None
        if fit_til is not None:
            nonconverged = nonconverged or not fit_til.converged
        d = profile_delta(model, config.estimator, fit_hat, fit_til) if fit_til else None
        x = critical_z(config.alpha) ** 2
        fac_hat = adjustment_factors(bias_terms(model, fit_hat.theta, config.estimator, null_j), x) \
            if config.adjustment is not Adjustment.NONE else None
        fac_til = adjustment_factors(bias_terms(model, fit_til.theta, config.estimator, null_j), x) \
            if (config.adjustment is not Adjustment.NONE and fit_til is not None) else None
        quantiles = None
        if config.adjustment is Adjustment.BARTLETT_BOOTSTRAP:
            bcfg = BootstrapConfig(m=config.boot_m, seed=config.seed, alpha=config.alpha)
            quantiles = bootstrap_quantiles(model, fit_hat, fit_til, null_j,
                                            config.statistics, bcfg)

        for stat in config.statistics:
            status = "ok"
            if stat is StatisticKind.WALD:
                stat_value = wald_statistic(model, fit_hat, null_j)
            elif stat is StatisticKind.SCORE:
                stat_value = score_statistic(model, fit_til, null_j)
            else:
                stat_value = lr_statistic(model, fit_hat, fit_til, null_j)
            try:
                ci_naive = naive_ci(model, stat, null_j, config.alpha, fit_hat, fit_til)
            except DegenerateIntervalError:
                ci_naive = None
                status = "degenerate"
            ci_adj = None
            applied = None
            if config.adjustment is not Adjustment.NONE and status == "ok":
                fac = fac_hat if stat is StatisticKind.WALD else fac_til
                try:
                    if config.adjustment is Adjustment.BARTLETT:
                        ci_adj = adjusted_ci(model, stat, null_j, config.alpha,
                                             fit_hat, fit_til)
                        applied = {StatisticKind.WALD: fac.w_ad,
                                   StatisticKind.LR: fac.lr_ad,
                                   StatisticKind.SCORE: fac.s_ad}[stat]
                    else:
                        bcfg = BootstrapConfig(m=config.boot_m, seed=config.seed,
                                               alpha=config.alpha)
                        ci_adj = bootstrap_adjusted_ci(model, stat, null_j, config.alpha,
                                                       fit_hat, fit_til, bcfg, quantiles)
                        z_star = quantiles.for_kind(stat)
                        applied = {StatisticKind.WALD: z_star * fac.w_ad / x,
                                   StatisticKind.LR: z_star * fac.lr_ad / x,
                                   StatisticKind.SCORE: z_star * fac.s_ad / x}[stat]
                except DegenerateIntervalError:
                    status = "degenerate"
            row = {
                "contrast": model.contrast_names[j],
                "statistic": stat.value,
                "estimate": float(ci_naive.center) if ci_naive else float(null_j.r @ fit_hat.mu),
                "null_value": float(nulls[j]),
                "stat_value": float(stat_value),
                "naive_lower": ci_naive.lower if ci_naive else None,
                "naive_upper": ci_naive.upper if ci_naive else None,
                "adj_lower": ci_adj.lower if ci_adj else None,
                "adj_upper": ci_adj.upper if ci_adj else None,
                "w_ad": fac_hat.w_ad if fac_hat else None,
                "lr_ad": fac_til.lr_ad if fac_til else None,
                "s_ad": fac_til.s_ad if fac_til else None,
                "z_star": quantiles.for_kind(stat) if quantiles else None,
                "applied_factor": applied,
                "theta_hat": ";".join(repr(float(v)) for v in fit_hat.theta),
                "theta_tilde": ";".join(repr(float(v)) for v in fit_til.theta) if fit_til else "",
                "delta": d,
                "converged": fit_hat.converged and (fit_til.converged if fit_til else True),
                "status": status,
            }
            rows.append(row)
            if ci_naive:
                forest.append((model.contrast_names[j], ci_naive.center,
                               ci_naive.lower, ci_naive.upper, f"{stat.value}:naive"))
            if ci_adj:
                forest.append((model.contrast_names[j], ci_adj.center,
                               ci_adj.lower, ci_adj.upper,
                               f"{stat.value}:{config.adjustment.value}"))

    payload = {
        "estimator": config.estimator.value,
        "adjustment": config.adjustment.value,
        "alpha": config.alpha,
        "structure": config.structure.value,
        "reference": reference,
        "seed": config.seed,
        "nonconverged": nonconverged,
        "rows": rows,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if config.output_format == "json":
            (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        else:
            (out / "report.tsv").write_text(_rows_to_tsv(rows, config.full_precision))
        forest_lines = ["contrast\tcenter\tlower\tupper\tmethod"]
        for name, center, lo, hi, method in forest:
            forest_lines.append("\t".join([name, _fmt(center, config.full_precision),
                                           _fmt(lo, config.full_precision),
                                           _fmt(hi, config.full_precision), method]))
        (out / "forest.tsv").write_text("\n".join(forest_lines) + "\n")
        norm, norm_cov = emit_normalized(studies)
        (out / "input_normalized.csv").write_text(norm)
        (out / "input_normalized_cov.csv").write_text(norm_cov)
    return payload


def _rows_to_tsv(rows: list[dict], full: bool) -> str:
    lines = ["\t".join(_REPORT_COLS)]
    for row in rows:
        lines.append("\t".join(_fmt(row[c], full) for c in _REPORT_COLS))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# argparse wiring
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nmabart",
        description="Random-effects network meta-analysis with closed-form and "
                    "small-sample adjusted confidence intervals.")
    sub = parser.add_subparsers(dest="command", required=True)

    pa = sub.add_parser("analyze", help="analyze a contrast-level or arm-level CSV")
    pa.add_argument("input", help="input CSV path")
    pa.add_argument("--cov", help="covariance companion CSV")
    pa.add_argument("--estimator", choices=["ml", "reml"], default="reml")
    pa.add_argument("--stat", default="lr",
                    help="comma-separated subset of wald,lr,score (default lr)")
    pa.add_argument("--adjust", choices=["none", "bartlett", "bootstrap"], default="bartlett")
    pa.add_argument("--alpha", type=float, default=0.05)
    pa.add_argument("--null", action="append", default=[], metavar="LABEL=VALUE",
                    help="null value for a treatment label (repeatable; default 0)")
    pa.add_argument("--structure", default="compound-symmetry",
                    choices=[k.value for k in StructureKind])
    pa.add_argument("--boot-m", type=int, default=1001)
    pa.add_argument("--seed", type=int, default=0)
    pa.add_argument("--base", choices=["10", "e"], default="10",
                    help="log base of the effect scale (arm-level conversion)")
    pa.add_argument("--reference", help="reference treatment label")
    pa.add_argument("--out", help="output directory")
    pa.add_argument("--format", choices=["tsv", "json"], default="tsv")
    pa.add_argument("--full-precision", action="store_true")
    pa.add_argument("--allow-nonconverged", action="store_true")

    pc = sub.add_parser("coverage", help="run a coverage study from a scenario file")
    pc.add_argument("scenario", nargs="?", help="scenario YAML/JSON file")
    pc.add_argument("--preset", choices=["sim1", "sim1x3", "sim2-20", "sim2-30"],
                    help="built-in scenario instead of a file")
    pc.add_argument("--methods", default="reml:lr:bartlett",
                    help="comma-separated estimator:statistic:adjustment triples")
    pc.add_argument("--reps", type=int, help="override replication count")
    pc.add_argument("--seed", type=int, help="override scenario seed")
    pc.add_argument("--alpha", type=float, default=0.05)
    pc.add_argument("--boot-m", type=int, default=501)
    pc.add_argument("--out", help="output directory")
    pc.add_argument("--format", choices=["tsv", "json"], default="tsv")
    return parser


def _cmd_analyze(args) -> int:
    stats = tuple(StatisticKind(s.strip()) for s in args.stat.split(",") if s.strip())
    nulls = {}
    for item in args.null:
        if "=" not in item:
            raise CliInputError(f"--null expects LABEL=VALUE, got {item!r}")
        lab, val = item.split("=", 1)
        try:
            nulls[lab.strip()] = float(val)
        except ValueError:
            raise CliInputError(f"--null {item!r}: value is not a number") from None
    config = AnalysisConfig(
        estimator=LikelihoodKind(args.estimator),
        statistics=stats,
        adjustment={"none": Adjustment.NONE, "bartlett": Adjustment.BARTLETT,
                    "bootstrap": Adjustment.BARTLETT_BOOTSTRAP}[args.adjust],
        alpha=args.alpha,
        nulls=nulls,
        structure=StructureKind(args.structure),
        boot_m=args.boot_m,
        seed=args.seed,
        output_format=args.format,
        log_base=10.0 if args.base == "10" else math.e,
        reference=args.reference,
        full_precision=args.full_precision,
        allow_nonconverged=args.allow_nonconverged,
    )
    payload = run_analysis(config, args.input, args.cov, args.out)
    if config.output_format == "json":
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(_rows_to_tsv(payload["rows"], config.full_precision), end="")
    if payload["nonconverged"] and not config.allow_nonconverged:
        print(json.dumps({"error": "nonconverged",
                          "detail": "an estimation step did not converge; "
                                    "pass --allow-nonconverged to accept"}),
              file=sys.stderr)
        return 3
    return 0


def _cmd_coverage(args) -> int:
    if args.preset:
        spec = {"sim1": lambda: simulation_one(1),
                "sim1x3": lambda: simulation_one(3),
                "sim2-20": lambda: simulation_two(20),
                "sim2-30": lambda: simulation_two(30)}[args.preset]()
    elif args.scenario:
        text = Path(args.scenario).read_text()
        spec = scenario_from_mapping(yaml.safe_load(text))
    else:
        raise CliInputError("coverage needs a scenario file or --preset")
    import dataclasses

    if args.reps is not None:
        spec = dataclasses.replace(spec, replications=args.reps)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    methods = []
    for token in args.methods.split(","):
        parts = token.strip().split(":")
        if len(parts) != 3:
            raise CliInputError(f"--methods entry {token!r} is not estimator:statistic:adjustment")
        adj = {"none": Adjustment.NONE, "bartlett": Adjustment.BARTLETT,
               "bootstrap": Adjustment.BARTLETT_BOOTSTRAP}[parts[2]]
        methods.append(MethodSpec(LikelihoodKind(parts[0]), StatisticKind(parts[1]),
                                  adj, boot_m=args.boot_m))
    report = coverage_study(spec, methods, alpha=args.alpha)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "coverage.tsv").write_text(report.to_tsv())
        (out / "coverage.json").write_text(report.to_json())
    print(report.to_tsv() if args.format == "tsv" else report.to_json(), end="")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "analyze":
            return _cmd_analyze(args)
        return _cmd_coverage(args)
    except (CliInputError, ModelError, FileNotFoundError) as exc:
        print(json.dumps({"error": "input", "detail": str(exc)}), file=sys.stderr)
        return 2
    except DegenerateIntervalError as exc:
        print(json.dumps({"error": "degenerate_interval", "detail": str(exc)}), file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
