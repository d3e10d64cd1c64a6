import numpy as np
import pytest

from nmabart.model import NullSpec, Study, StructureKind, assemble


@pytest.fixture
def diagonal_model():
    """Four single-contrast studies with R = 0, so Sigma(theta) = theta*I_4."""
    studies = [Study(id=f"s{i}", contrasts=[("A", "P")], y=[v], cov=[[0.0]])
               for i, v in enumerate([1.0, 2.0, 3.0, 6.0])]
    return assemble(studies, StructureKind.DIAGONAL_HOMOGENEOUS, "P")


@pytest.fixture
def three_study_model():
    """Two-treatment network: one two-arm-contrast study plus two singles."""
    s1 = Study(id="s1", contrasts=[("A", "P"), ("B", "P")],
               y=[0.5, 0.8],
               cov=[[0.09, 0.3 * 0.4 / 2], [0.3 * 0.4 / 2, 0.16]])
    s2 = Study(id="s2", contrasts=[("A", "P")], y=[0.4], cov=[[0.09]])
    s3 = Study(id="s3", contrasts=[("B", "P")], y=[1.0], cov=[[0.16]])
    return assemble([s1, s2, s3], StructureKind.UNSTRUCTURED, "P")


def make_homoscedastic_model(n_rows: int, pairs=None):
    """All-two-arm CS network with R = 0: Sigma(theta) = theta * I exactly."""
    pairs = pairs or [("A", "P")] * n_rows
    studies = [Study(id=f"s{i}", contrasts=[pr], y=[0.0], cov=[[0.0]])
               for i, pr in enumerate(pairs)]
    kind = StructureKind.COMPOUND_SYMMETRY if len({p for pr in pairs for p in pr}) > 2 \
        else StructureKind.DIAGONAL_HOMOGENEOUS
    return assemble(studies, kind, "P")


def random_small_model(rng: np.random.Generator):
    """A random connected small network with diagonal within-study noise."""
    n_treat = int(rng.integers(1, 4))
    labels = ["A", "B", "C"][:n_treat]
    pairs = [(lab, "P") for lab in labels]
    extra = int(rng.integers(2, 7))
    for _ in range(extra):
        t = labels[int(rng.integers(0, n_treat))]
        others = [lab for lab in labels + ["P"] if lab != t]
        c = others[int(rng.integers(0, len(others)))]
        pairs.append((t, c))
    studies = []
    for i, pr in enumerate(pairs):
        var = float(rng.uniform(0.02, 0.5))
        y = float(rng.normal(0.0, 1.0))
        studies.append(Study(id=f"s{i}", contrasts=[pr], y=[y], cov=[[var]]))
    return assemble(studies, StructureKind.COMPOUND_SYMMETRY, "P")


@pytest.fixture
def rng():
    return np.random.default_rng(20240101)


class ExactNormalShim:
    """Known-Sigma Wald interval on exactly normal responses: coverage is 95%.

    Evaluated through coverage_study as a custom method; no estimation step,
    so it calibrates interval construction and containment counting alone.
    """

    name = "shim:exact-normal:none"

    def __init__(self, alpha=0.05):
        self.alpha = alpha

    def intervals(self, model, spec, rep_index):
        import dataclasses

        from nmabart.intervals import (
            Adjustment,
            ConfidenceInterval,
            StatisticKind,
            critical_z,
        )
        from nmabart.likelihood import _Workspace

        rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed ^ 0x5A5A,
                                                           spawn_key=(rep_index,)))
        theta = np.array([spec.theta_true])
        ws = _Workspace(model, theta)
        y = model.X @ spec.true_mu + np.linalg.cholesky(ws.sigma) @ rng.standard_normal(model.N)
        y.setflags(write=False)
        ws2 = _Workspace(dataclasses.replace(model, y=y), theta)
        z = critical_z(self.alpha)
        out = []
        for j in range(model.p):
            null = NullSpec.for_contrast(j, model.p)
            center = float(null.r @ ws2.mu_hat)
            half = z * np.sqrt(ws2.h2(null))
            out.append(ConfidenceInterval(
                contrast_index=j, kind=StatisticKind.WALD, adjustment=Adjustment.NONE,
                lower=center - half, upper=center + half, level=1 - self.alpha,
                center=center))
        return out
