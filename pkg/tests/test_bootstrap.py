import numpy as np
import pytest
from scipy.stats import chi2

from nmabart.bartlett import adjusted_ci
from nmabart.bootstrap import (
    BootstrapConfig,
    BootstrapError,
    BootstrapQuantiles,
    bootstrap_adjusted_ci,
    bootstrap_quantiles,
    quantile_index,
)
from nmabart.estimation import fit
from nmabart.intervals import Adjustment, StatisticKind, critical_z
from nmabart.likelihood import LikelihoodKind
from nmabart.model import NullSpec

ML, REML = LikelihoodKind.ML, LikelihoodKind.REML
W, LR, S = StatisticKind.WALD, StatisticKind.LR, StatisticKind.SCORE


@pytest.fixture
def diag_fits(diagonal_model):
    null = NullSpec.for_contrast(0, 1, 0.0)
    return fit(diagonal_model, ML), fit(diagonal_model, ML, null), null


def test_quantile_index_convention():
    assert quantile_index(19, 0.05) == 19          # ceil(0.95*20), the maximum
    assert quantile_index(1001, 0.05) == 952
    assert quantile_index(99, 0.05) == 95
    with pytest.raises(BootstrapError, match="too small"):
        quantile_index(10, 0.05)


def test_config_validation():
    with pytest.raises(ValueError, match="m must be"):
        BootstrapConfig(m=50)
    with pytest.raises(ValueError):
        BootstrapConfig(alpha=0.0)
    with pytest.raises(ValueError):
        BootstrapConfig(parallel_width=0)
    with pytest.raises(ValueError):
        BootstrapConfig(generate_at="nowhere")


def test_chi_square_shim_quantile(diagonal_model, diag_fits):
    """An exact chi-square(1) statistic recovers the 3.8415 critical point."""
    f_hat, f_til, null = diag_fits

    def shim(model, y_star, rng):
        value = float(rng.chisquare(1))
        return {W: value}

    cfg = BootstrapConfig(m=20_001, seed=7, alpha=0.05)
    q = bootstrap_quantiles(diagonal_model, f_hat, f_til, null, [W], cfg,
                            statistic_fn=shim)
    # MC SE of the 95th percentile at m = 2e4 is ~0.05
    assert q.z_star_w == pytest.approx(chi2.ppf(0.95, df=1), abs=0.2)
    assert q.failures == 0 and q.m_effective == 20_001


def test_seed_and_parallel_width_determinism(diagonal_model, diag_fits):
    f_hat, f_til, null = diag_fits
    kinds = [W, LR, S]
    q1 = bootstrap_quantiles(diagonal_model, f_hat, f_til, null, kinds,
                             BootstrapConfig(m=99, seed=42, parallel_width=1))
    q8 = bootstrap_quantiles(diagonal_model, f_hat, f_til, null, kinds,
                             BootstrapConfig(m=99, seed=42, parallel_width=8))
    assert (q1.z_star_w, q1.z_star_lr, q1.z_star_s) == (q8.z_star_w, q8.z_star_lr, q8.z_star_s)


def test_bootstrap_ci_reproducible_bitwise(diagonal_model, diag_fits):
    f_hat, f_til, null = diag_fits
    cfg = BootstrapConfig(m=99, seed=42)
    ci1 = bootstrap_adjusted_ci(diagonal_model, LR, null, 0.05, f_hat, f_til, cfg)
    ci2 = bootstrap_adjusted_ci(diagonal_model, LR, null, 0.05, f_hat, f_til, cfg)
    assert (ci1.lower, ci1.upper) == (ci2.lower, ci2.upper)
    assert ci1.adjustment is Adjustment.BARTLETT_BOOTSTRAP


def test_reduction_to_analytic_adjustment_when_quantile_equals_z2(diagonal_model, diag_fits):
    f_hat, f_til, null = diag_fits
    z2 = critical_z(0.05) ** 2
    q = BootstrapQuantiles(z_star_w=z2, z_star_lr=z2, z_star_s=z2,
                           m_effective=1001, failures=0)
    cfg = BootstrapConfig(m=1001, seed=0)
    for kind in (W, LR, S):
        ci_boot = bootstrap_adjusted_ci(diagonal_model, kind, null, 0.05,
                                        f_hat, f_til, cfg, quantiles=q)
        ci_t1 = adjusted_ci(diagonal_model, kind, null, 0.05, f_hat, f_til)
        assert ci_boot.lower == pytest.approx(ci_t1.lower, rel=1e-12)
        assert ci_boot.upper == pytest.approx(ci_t1.upper, rel=1e-12)


def test_bootstrap_wald_symmetric(diagonal_model, diag_fits):
    f_hat, f_til, null = diag_fits
    cfg = BootstrapConfig(m=99, seed=9)
    ci = bootstrap_adjusted_ci(diagonal_model, W, null, 0.05, f_hat, f_til, cfg)
    assert ci.upper - ci.center == pytest.approx(ci.center - ci.lower, rel=1e-12)


def test_quantile_monotone_in_index(diagonal_model, diag_fits):
    f_hat, f_til, null = diag_fits

    def shim(model, y_star, rng):
        return {W: float(rng.chisquare(1))}

    values = []
    for alpha in (0.20, 0.10, 0.05):
        cfg = BootstrapConfig(m=999, seed=3, alpha=alpha)
        q = bootstrap_quantiles(diagonal_model, f_hat, f_til, null, [W], cfg,
                                statistic_fn=shim)
        values.append(q.z_star_w)
    assert values == sorted(values)


def test_failure_rate_abort(diagonal_model, diag_fits):
    f_hat, f_til, null = diag_fits

    def flaky(model, y_star, rng):
        return None if rng.random() < 0.2 else {W: float(rng.chisquare(1))}

    with pytest.raises(BootstrapError, match="> 2%"):
        bootstrap_quantiles(diagonal_model, f_hat, f_til, null, [W],
                            BootstrapConfig(m=199, seed=1), statistic_fn=flaky)


def test_generate_at_switch(diagonal_model, diag_fits):
    f_hat, f_til, null = diag_fits
    q_hat = bootstrap_quantiles(diagonal_model, f_hat, f_til, null, [S],
                                BootstrapConfig(m=99, seed=11, generate_at="hat"))
    q_til = bootstrap_quantiles(diagonal_model, f_hat, f_til, null, [S],
                                BootstrapConfig(m=99, seed=11, generate_at="tilde"))
    assert q_hat.z_star_s != q_til.z_star_s      # different generating models


def test_real_pipeline_small_run(diagonal_model, diag_fits):
    f_hat, f_til, null = diag_fits
    cfg = BootstrapConfig(m=99, seed=5)
    q = bootstrap_quantiles(diagonal_model, f_hat, f_til, null, [W, LR, S], cfg)
    for v in (q.z_star_w, q.z_star_lr, q.z_star_s):
        assert v >= 0.0 and np.isfinite(v)
    assert q.failures <= 1
