import dataclasses

import numpy as np
import pytest

from nmabart.estimation import FitConfig, fit, delta
from nmabart.likelihood import LikelihoodKind, ProfileObjective
from nmabart.model import NullSpec, Study, StructureKind, assemble

from conftest import random_small_model

ML, REML = LikelihoodKind.ML, LikelihoodKind.REML


def test_diagonal_closed_forms(diagonal_model):
    assert fit(diagonal_model, ML).theta[0] == pytest.approx(3.5, abs=1e-7)
    assert fit(diagonal_model, REML).theta[0] == pytest.approx(14 / 3, abs=1e-7)


def test_constrained_closed_form(diagonal_model):
    null = NullSpec.for_contrast(0, 1, 0.0)
    res = fit(diagonal_model, ML, null)
    assert res.theta[0] == pytest.approx(12.5, abs=1e-6)
    assert res.constrained and abs(res.mu[0]) < 1e-12
    assert res.h2 == pytest.approx(12.5 / 4, rel=1e-6)


def test_objective_value_consistency(diagonal_model):
    res = fit(diagonal_model, REML)
    obj = ProfileObjective(model=diagonal_model, kind=REML)
    assert res.objective_value == pytest.approx(obj.value(res.theta), abs=1e-8)


def test_boundary_fit_zero_heterogeneity():
    # y = Xc exactly with positive-definite R: maximizer at theta = 0
    studies = [Study(id=f"s{i}", contrasts=[("A", "P")], y=[0.4], cov=[[0.3]])
               for i in range(4)]
    m = assemble(studies, StructureKind.DIAGONAL_HOMOGENEOUS, "P")
    res = fit(m, ML)
    assert res.boundary_flag
    assert res.theta[0] == 0.0


def test_delta_inactive_constraint(diagonal_model):
    f_hat = fit(diagonal_model, ML)
    null = NullSpec.for_contrast(0, 1, float(f_hat.mu[0]))
    f_til = fit(diagonal_model, ML, null)
    d = delta(diagonal_model, ML, f_hat, f_til)
    assert abs(d) < 1e-9
    assert f_til.theta[0] == pytest.approx(f_hat.theta[0], abs=1e-6)


def test_delta_closed_form(diagonal_model):
    f_hat = fit(diagonal_model, ML)
    f_til = fit(diagonal_model, ML, NullSpec.for_contrast(0, 1, 0.0))
    d = delta(diagonal_model, ML, f_hat, f_til)
    expected = (-2 * np.log(12.5) - 14 / 25) - (-2 * np.log(3.5) - 2.0)
    assert d == pytest.approx(expected, abs=1e-6)
    assert d == pytest.approx(-1.10593, abs=1e-5)


def test_delta_kind_mismatch(diagonal_model):
    f_hat = fit(diagonal_model, ML)
    f_til = fit(diagonal_model, REML, NullSpec.for_contrast(0, 1, 0.0))
    with pytest.raises(ValueError, match="kind"):
        delta(diagonal_model, ML, f_hat, f_til)
    with pytest.raises(ValueError, match="constrained"):
        delta(diagonal_model, ML, f_hat, f_hat)


def test_delta_shrinks_with_replication(rng):
    """Median |delta| decays roughly like 1/N under k-fold replication."""
    base = [Study(id=f"s{i}", contrasts=[("A", "P")], y=[v], cov=[[0.1]])
            for i, v in enumerate([0.2, 0.9, 0.4, 1.3, 0.6, 0.1])]
    med = {}
    for k in (1, 4):
        deltas = []
        for trial in range(40):
            studies = []
            for rep in range(k):
                for s in base:
                    y = float(s.y[0] + rng.normal(0, 0.6))
                    studies.append(Study(id=f"{s.id}-{rep}-{trial}",
                                         contrasts=s.contrasts, y=[y], cov=s.cov))
            m = assemble(studies, StructureKind.DIAGONAL_HOMOGENEOUS, "P")
            f_hat = fit(m, ML)
            f_til = fit(m, ML, NullSpec.for_contrast(0, 1, 0.55))
            deltas.append(abs(delta(m, ML, f_hat, f_til)))
        med[k] = float(np.median(deltas))
    assert med[4] < med[1]          # decreasing in N
    assert med[4] < 0.55 * med[1]   # roughly 1/N rate (4x replication)


def test_delta_nonpositive_and_dominance(rng):
    for _ in range(25):
        m = random_small_model(rng)
        kind = ML if rng.random() < 0.5 else REML
        f_hat = fit(m, kind)
        null = NullSpec.for_contrast(int(rng.integers(0, m.p)), m.p, float(rng.normal()))
        f_til = fit(m, kind, null)
        assert delta(m, kind, f_hat, f_til) <= 1e-8
        assert f_hat.objective_value >= f_til.objective_value - 1e-8


def test_restart_monotone_improvement(diagonal_model):
    obj = ProfileObjective(model=diagonal_model, kind=ML)
    res = fit(diagonal_model, ML)
    for start in (0.35, 3.5, 35.0):
        assert res.objective_value >= obj.value(np.array([start])) - 1e-10


def test_determinism_bitwise(rng):
    m = random_small_model(rng)
    r1 = fit(m, REML)
    r2 = fit(m, REML)
    assert r1.theta.tobytes() == r2.theta.tobytes()
    assert r1.objective_value == r2.objective_value


def test_scale_consistency(rng):
    for _ in range(6):
        m = random_small_model(rng)
        s = 3.7
        y2 = s * m.y
        y2.setflags(write=False)
        r2 = (s ** 2) * m.R
        r2.setflags(write=False)
        m2 = dataclasses.replace(m, y=y2, R=r2)
        null = NullSpec.for_contrast(0, m.p, 0.123)
        null2 = NullSpec.for_contrast(0, m.p, s * 0.123)
        for kind in (ML, REML):
            f1, f2 = fit(m, kind), fit(m2, kind)
            assert f2.theta[0] == pytest.approx(s ** 2 * f1.theta[0], rel=1e-6, abs=1e-10)
            from nmabart.intervals import lr_statistic, score_statistic, wald_statistic

            t1, t2 = fit(m, kind, null), fit(m2, kind, null2)
            assert wald_statistic(m2, f2, null2) == pytest.approx(
                wald_statistic(m, f1, null), rel=1e-6, abs=1e-8)
            assert score_statistic(m2, t2, null2) == pytest.approx(
                score_statistic(m, t1, null), rel=1e-6, abs=1e-8)
            assert lr_statistic(m2, f2, t2, null2) == pytest.approx(
                lr_statistic(m, f1, t1, null), rel=1e-6, abs=1e-8)


def test_unstructured_fit_runs(three_study_model):
    m = three_study_model
    res = fit(m, REML)
    assert res.theta.shape == (3,)
    v = m.structure.v_matrix(res.theta)
    assert np.linalg.eigvalsh(v).min() >= -1e-9


def test_fit_config_validation():
    with pytest.raises(ValueError):
        FitConfig(tolerance=0.0)
    with pytest.raises(ValueError):
        FitConfig(restarts=0)


def test_warm_start_config(diagonal_model):
    cfg = FitConfig(restarts=1, initial_theta=np.array([3.0]))
    res = fit(diagonal_model, ML, None, cfg)
    assert res.theta[0] == pytest.approx(3.5, abs=1e-6)
