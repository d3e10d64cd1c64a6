import dataclasses
import json

import numpy as np
import pytest

from nmabart.intervals import Adjustment, StatisticKind
from nmabart.likelihood import LikelihoodKind
from nmabart.simulation import (
    CoverageError,
    MethodSpec,
    ScenarioSpec,
    coverage_study,
    generate_dataset,
    scenario_from_mapping,
    scenario_to_mapping,
    simulation_one,
    simulation_two,
)

ML, REML = LikelihoodKind.ML, LikelihoodKind.REML
W, LR, S = StatisticKind.WALD, StatisticKind.LR, StatisticKind.SCORE


def test_simulation_one_design_counts():
    spec = simulation_one(1)
    studies = generate_dataset(spec, 0)
    assert len(studies) == 10
    assert all(s.p_i == 1 for s in studies)      # all two-arm
    pair_counts = {}
    for s in studies:
        pair_counts[s.contrasts[0]] = pair_counts.get(s.contrasts[0], 0) + 1
    assert pair_counts == {("A", "P"): 3, ("B", "P"): 2, ("C", "P"): 2,
                           ("A", "B"): 2, ("A", "C"): 1}
    assert simulation_one(3).n_studies == 30


def test_simulation_two_designs():
    assert simulation_two(20).n_studies == 20
    assert simulation_two(30).n_studies == 30
    assert simulation_two(20).p == 6
    with pytest.raises(ValueError):
        simulation_two(25)


def test_generate_dataset_deterministic():
    spec = simulation_one(1, seed=31)
    a = generate_dataset(spec, 7)
    b = generate_dataset(spec, 7)
    for sa, sb in zip(a, b):
        assert sa.id == sb.id
        np.testing.assert_array_equal(sa.y, sb.y)
        np.testing.assert_array_equal(sa.cov, sb.cov)
    c = generate_dataset(spec, 8)
    assert any(not np.array_equal(sa.y, sc.y) for sa, sc in zip(a, c))


def test_generate_dataset_degenerate_limit():
    """theta = 0 and enormous n: contrast estimates approach the true effects."""
    spec = ScenarioSpec(
        designs=((("A", "P"), 2), (("B", "P"), 2), (("A", "B"), 1)),
        true_mu=np.array([0.3, 0.5]),
        theta_true=0.0,
        subjects_range=(5e6, 5e6 + 1),
        placebo_prob_range=(0.3, 0.4),
        seed=2,
    )
    truth = {("A", "P"): 0.3, ("B", "P"): 0.5, ("A", "B"): -0.2}
    for s in generate_dataset(spec, 0):
        assert s.y[0] == pytest.approx(truth[s.contrasts[0]], abs=5e-3)


def test_scenario_validation():
    with pytest.raises(ValueError, match="counts"):
        ScenarioSpec(designs=((("A", "P"), 0),), true_mu=np.array([0.1]), theta_true=0.1)
    with pytest.raises(ValueError, match="probability range"):
        ScenarioSpec(designs=((("A", "P"), 1),), true_mu=np.array([0.1]),
                     theta_true=0.1, placebo_prob_range=(0.0, 1.5))


def test_scenario_mapping_round_trip():
    spec = simulation_two(30, replications=55, seed=99)
    data = scenario_to_mapping(spec)
    back = scenario_from_mapping(json.loads(json.dumps(data)))
    assert scenario_to_mapping(back) == data
    np.testing.assert_array_equal(back.true_mu, spec.true_mu)
    assert back.designs == spec.designs


def test_exact_normal_shim_covers_95():
    from conftest import ExactNormalShim

    spec = dataclasses.replace(simulation_one(1, seed=17), replications=2000)
    report = coverage_study(spec, methods=[], custom_methods=[ExactNormalShim()])
    for j, lab in enumerate(("A", "B", "C")):
        row = report.lookup("shim", "exact-normal", "none", f"{lab} vs P")
        assert abs(row.coverage - 95.0) <= 2 * row.mc_se
        assert row.replications == 2000


def test_coverage_study_basic_run_and_reports(tmp_path):
    spec = dataclasses.replace(simulation_one(1, seed=3), replications=25)
    report = coverage_study(spec, [MethodSpec(ML, W, Adjustment.NONE)])
    assert report.failures == 0
    row = report.lookup("ml", "wald", "none", "A vs P")
    assert 0.0 <= row.coverage <= 100.0
    assert row.mc_se == pytest.approx(
        100 * np.sqrt(row.coverage / 100 * (1 - row.coverage / 100) / row.replications))
    tsv = report.to_tsv()
    assert tsv.splitlines()[0].startswith("estimator\tstatistic")
    assert len(tsv.splitlines()) == 1 + 3
    payload = json.loads(report.to_json())
    assert payload["replications"] == 25
    assert len(payload["rows"]) == 3


def test_coverage_study_determinism():
    spec = dataclasses.replace(simulation_one(1, seed=12), replications=15)
    r1 = coverage_study(spec, [MethodSpec(REML, LR, Adjustment.NONE)])
    r2 = coverage_study(spec, [MethodSpec(REML, LR, Adjustment.NONE)])
    assert r1.to_tsv().split("wall_time")[0] == r2.to_tsv().split("wall_time")[0]
    rows1 = [(r.coverage, r.mean_width) for r in r1.rows]
    rows2 = [(r.coverage, r.mean_width) for r in r2.rows]
    assert rows1 == rows2


def test_coverage_study_failure_abort():
    class Explode:
        name = "x:y:z"

        def intervals(self, model, spec, rep_index):
            raise RuntimeError("boom")

    spec = dataclasses.replace(simulation_one(1, seed=3), replications=30)
    with pytest.raises(CoverageError):
        coverage_study(spec, [], custom_methods=[Explode()])


def test_coverage_study_needs_methods():
    with pytest.raises(ValueError):
        coverage_study(simulation_one(1), [])
