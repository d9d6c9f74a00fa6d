import math

import numpy as np
import pytest
from scipy import stats
from scipy.special import expit, logit

from errors import ConfigError, SamplingError
from model import CoefVector
from priors import (
    DataPriorRecord,
    PriorPanel,
    PriorSpec,
    data_prior_loglik,
    gauge,
    logf_density,
    normal_from_limits,
    penalty,
    penalty_slope,
    penalty_term,
    prior_interval,
    sample_prior,
    sum_prior,
    to_data_prior,
)


def test_penalty_zero_at_prior_means(misclassification_panel):
    means = {p.target: p.mean for p in misclassification_panel.specs}
    assert penalty(misclassification_panel, CoefVector(**means)) == pytest.approx(0.0, abs=1e-15)


def test_penalty_at_zero(misclassification_panel):
    assert penalty(misclassification_panel, CoefVector()) == pytest.approx(57.3, abs=0.1)


def test_penalty_single_normal():
    panel = PriorPanel.of(PriorSpec.normal("beta_XY", 0.0, 0.5))
    assert penalty(panel, {"beta_XY": 0.5}) == pytest.approx(0.5)


def test_penalty_missing_coefficient(misclassification_panel):
    with pytest.raises(ConfigError, match="missing"):
        penalty(misclassification_panel, {"beta_T": 0.0})


def test_laplace_and_logf_penalties_vanish_at_mode():
    lap = PriorSpec.laplace("beta_TY", 0.3, 0.5)
    assert penalty_term(lap, 0.3) == 0.0
    assert penalty_term(lap, 0.8) == pytest.approx(2.0)
    f = PriorSpec.logf("beta_TY", 0.5, 2.0, 0.3, 4.0)
    assert penalty_term(f, f.mode) == pytest.approx(0.0, abs=1e-12)
    assert penalty_slope(f, f.mode) == pytest.approx(0.0, abs=1e-12)
    grid = np.linspace(f.mode - 3, f.mode + 3, 61)
    assert np.all(penalty_term(f, grid) >= -1e-12)


def test_normal_penalty_matches_density():
    p = PriorSpec.normal("beta_TY", 0.4, 0.3)
    grid = np.linspace(-3, 3, 100)
    ratio = np.exp(-0.5 * penalty_term(p, grid)) / stats.norm.pdf(grid, 0.4, math.sqrt(0.3))
    assert np.allclose(ratio, ratio[0], rtol=1e-10, atol=0)


@pytest.mark.parametrize(
    "mean,variance,b,n",
    [(0.0, 0.50, 4.0, 8.0), (float(logit(0.1)), 0.16, 12.5, 25.0), (0.0, 0.125, 16.0, 32.0)],
)
def test_to_data_prior(mean, variance, b, n):
    rec = to_data_prior(PriorSpec.normal("beta_TY", mean, variance))
    assert rec.b == pytest.approx(b, abs=1e-9)
    assert rec.n == pytest.approx(n, abs=1e-9)
    assert rec.offset == -mean


def test_to_data_prior_normal_only():
    with pytest.raises(ConfigError, match="Normal"):
        to_data_prior(PriorSpec.laplace("beta_TY", 0.0, 1.0))


def test_data_prior_record_bounds():
    with pytest.raises(ConfigError):
        DataPriorRecord(target="beta_TY", b=8.0, n=8.0, offset=0.0)


def test_data_prior_loglik_shape():
    rec = to_data_prior(PriorSpec.normal("beta_TY", 0.7, 0.5))
    h = 1e-3
    curvature = (data_prior_loglik(rec, 0.7 + h) - 2 * data_prior_loglik(rec, 0.7) + data_prior_loglik(rec, 0.7 - h)) / h**2
    assert curvature == pytest.approx(-1.0 / 0.5, rel=1e-6)
    grid = np.linspace(-2, 3, 201)
    assert grid[np.argmax(data_prior_loglik(rec, grid))] == pytest.approx(0.7, abs=0.025)


def test_data_prior_loglik_value():
    rec = to_data_prior(PriorSpec.normal("beta_TY", 0.0, 0.5))
    diff = data_prior_loglik(rec, 1.0) - data_prior_loglik(rec, 0.0)
    assert diff == pytest.approx(4.0 - 8.0 * math.log((1.0 + math.e) / 2.0), rel=1e-12)
    assert diff == pytest.approx(-0.961, abs=0.001)


def test_data_prior_matches_logf():
    m, r, n = 0.4, 0.3, 6.0
    p = PriorSpec.logf("beta_TY", m, 1.0, r, n)
    rec = DataPriorRecord(target="beta_TY", b=n * r, n=n, offset=float(logit(r)) - m)
    grid = np.linspace(-4, 4, 81)
    gap = data_prior_loglik(rec, grid) - np.log(logf_density(p, grid))
    assert np.allclose(gap, gap[0], atol=1e-10)


def test_logf_density_logistic():
    p = PriorSpec.logf("beta_TY", 0.0, 1.0, 0.5, 2.0)
    assert logf_density(p, 0.0) == pytest.approx(0.25)
    grid = np.linspace(-5, 5, 41)
    assert np.allclose(logf_density(p, grid), stats.logistic.pdf(grid), rtol=1e-12)


def test_logf_density_mode_and_curvature():
    p = PriorSpec.logf("beta_TY", 0.3, 1.7, 0.5, 9.0)
    grid = np.linspace(-3, 3.6, 331)
    assert grid[np.argmax(logf_density(p, grid))] == pytest.approx(0.3, abs=1e-9)

    q = PriorSpec.logf("beta_TY", 0.0, 1.0, 0.5, 32.0)
    h = 1e-3
    logd = lambda x: float(np.log(logf_density(q, x)))  # noqa: E731
    assert (logd(h) - 2 * logd(0.0) + logd(-h)) / h**2 == pytest.approx(-8.0, rel=1e-5)


def test_logf_density_needs_logf():
    with pytest.raises(ConfigError):
        logf_density(PriorSpec.normal("beta_TY", 0.0, 1.0), 0.0)


def test_prior_interval_table_values():
    tx = PriorSpec.normal("beta_TX", math.log(13.5), 0.25)
    lo, hi = prior_interval(tx, 0.95, "exp")
    assert lo == pytest.approx(5.0, abs=0.1) and hi == pytest.approx(36.0, abs=0.5)
    t = PriorSpec.normal("beta_T", float(logit(0.1)), 0.16)
    lo, hi = prior_interval(t, 0.95, "expit")
    assert lo == pytest.approx(0.05, abs=0.005) and hi == pytest.approx(0.20, abs=0.005)
    sum_tx = PriorSpec.normal("beta_TX+beta_TXY", math.log(13.5), 0.375)
    lo, hi = prior_interval(sum_tx, 0.95, "exp")
    assert lo == pytest.approx(4.1, abs=0.05) and hi == pytest.approx(45.0, abs=0.5)


def test_prior_interval_flat():
    with pytest.raises(ConfigError, match="quantiles"):
        prior_interval(PriorSpec.flat("beta_TY"))


def test_prior_interval_widens_with_level():
    for p in (
        PriorSpec.normal("beta_TY", 0.1, 0.4),
        PriorSpec.laplace("beta_TY", 0.1, 0.4),
        PriorSpec.logf("beta_TY", 0.1, 1.0, 0.3, 5.0),
    ):
        widths = [np.diff(prior_interval(p, level))[0] for level in (0.5, 0.8, 0.9, 0.95, 0.99, 0.999)]
        assert np.all(np.diff(widths) > 0)


def test_sample_normal_moments():
    rng = np.random.default_rng(11)
    draws = sample_prior(PriorSpec.normal("beta_TY", 0.0, 0.5), rng, 1_000_000)
    assert draws.mean() == pytest.approx(0.0, abs=0.003)
    assert draws.var() == pytest.approx(0.5, abs=0.01)


def test_sample_logistic_percentiles():
    rng = np.random.default_rng(12)
    draws = sample_prior(PriorSpec.logf("beta_TY", 0.0, 1.0, 0.5, 2.0), rng, 1_000_000)
    lo, hi = np.quantile(draws, [0.025, 0.975])
    assert lo == pytest.approx(math.log(0.025 / 0.975), abs=0.02)
    assert hi == pytest.approx(math.log(0.975 / 0.025), abs=0.02)


def test_sample_logf_histogram_matches_density():
    p = PriorSpec.logf("beta_TY", 0.2, 1.3, 0.3, 6.0)
    rng = np.random.default_rng(13)
    draws = sample_prior(p, rng, 200_000)

    fine = np.linspace(-12, 12, 48_001)
    dens = logf_density(p, fine)
    dens = dens / np.trapezoid(dens, fine)

    edges = np.linspace(*np.quantile(draws, [0.005, 0.995]), 41)
    counts, _ = np.histogram(draws, bins=edges)
    hist = counts / (len(draws) * np.diff(edges))
    expected = np.array(
        [dens[(fine >= a) & (fine < b)].mean() for a, b in zip(edges[:-1], edges[1:])]
    )
    assert np.max(np.abs(hist - expected)) < 0.02


def test_sample_logf_ks_against_beta_cdf():
    m, s, r, n = -0.4, 0.8, 0.7, 5.0
    p = PriorSpec.logf("beta_TY", m, s, r, n)
    draws = sample_prior(p, np.random.default_rng(14), 100_000)

    def cdf(theta):
        z = (theta + logit(r) - m) / s
        return stats.beta.cdf(expit(z), n * r, n * (1 - r))

    assert stats.kstest(draws, cdf).pvalue > 1e-3


def test_logf_approaches_normal():
    grid = np.linspace(-4, 4, 4001)
    variance = 0.5
    distances = []
    for n in (8, 32, 128):
        s = math.sqrt(n * variance / 4.0)
        z = grid / s
        logf_cdf = stats.beta.cdf(expit(z), n / 2.0, n / 2.0)
        distances.append(np.max(np.abs(logf_cdf - stats.norm.cdf(grid, 0.0, math.sqrt(variance)))))
    assert distances[0] > distances[1] > distances[2]

    rng = np.random.default_rng(15)
    draws = sample_prior(PriorSpec.logf("beta_TY", 0.0, math.sqrt(128 * variance / 4.0), 0.5, 128.0), rng, 100_000)
    assert stats.kstest(draws, "norm", args=(0.0, math.sqrt(variance))).statistic < 0.01


def test_sample_laplace():
    draws = sample_prior(PriorSpec.laplace("beta_TY", 0.2, 0.7), np.random.default_rng(16), 100_000)
    assert stats.kstest(draws, "laplace", args=(0.2, 0.7)).pvalue > 1e-3


def test_sample_flat_fails():
    with pytest.raises(SamplingError):
        sample_prior(PriorSpec.flat("beta_TY"), np.random.default_rng(0))


def test_normal_from_limits():
    p = normal_from_limits("beta_TY", 0.25, 4.0)
    assert p.mean == pytest.approx(0.0, abs=1e-12)
    assert p.variance == pytest.approx(0.5, abs=1e-3)
    lo, hi = prior_interval(p, 0.95, "exp")
    assert lo == pytest.approx(0.25, rel=1e-9) and hi == pytest.approx(4.0, rel=1e-9)
    wide = normal_from_limits("beta_TY", 0.125, 8.0)
    assert wide.variance == pytest.approx((math.log(64.0) / (2 * 1.959964)) ** 2, rel=1e-5)
    with pytest.raises(ConfigError):
        normal_from_limits("beta_TY", 4.0, 0.25)


def test_sum_prior():
    s = sum_prior("beta_TX+beta_TXY", [PriorSpec.normal("beta_TX", 1.0, 0.25), PriorSpec.normal("beta_TXY", 0.5, 0.125)])
    assert s.mean == 1.5 and s.variance == 0.375
    with pytest.raises(ConfigError):
        sum_prior("x", [PriorSpec.laplace("beta_TX", 0.0, 1.0)])


def test_gauge_reports_trials(misclassification_panel):
    trials = [gauge(p).n_trials for p in misclassification_panel.specs]
    assert trials == pytest.approx([25.0, 16.0, 8.0, 32.0], abs=1e-9)
    g = gauge(PriorSpec.normal("beta_XY", 0.0, 0.5))
    assert g.scale == "exp"
    assert g.limits == pytest.approx((0.25, 4.0), abs=0.01)
    assert gauge(PriorSpec.laplace("beta_TY", 0.0, 1.0)).data_prior is None


@pytest.mark.parametrize(
    "kwargs",
    [
        {"dist": "normal", "mean": 0.0, "variance": 0.0},
        {"dist": "normal", "mean": 0.0},
        {"dist": "laplace", "mean": 0.0, "scale": -1.0},
        {"dist": "logf", "m": 0.0, "s": 1.0, "r": 1.0, "n": 2.0},
        {"dist": "flat", "mean": 0.0},
    ],
)
def test_prior_spec_validation(kwargs):
    with pytest.raises(ConfigError):
        PriorSpec(target="beta_TY", **kwargs)


def test_panel_rules():
    with pytest.raises(ConfigError, match="no prior"):
        PriorPanel.of(PriorSpec.normal("beta_Y", 0.0, 1.0))
    cohort = PriorPanel.of(PriorSpec.normal("beta_Y", 0.0, 1.0), design="cohort")
    assert cohort.get("beta_Y").dist == "normal"
    with pytest.raises(ConfigError, match="More than one"):
        PriorPanel.of(PriorSpec.normal("beta_TY", 0.0, 1.0), PriorSpec.normal("beta_TY", 0.0, 2.0))
    panel = PriorPanel.of(PriorSpec.normal("beta_TY", 0.0, 1.0))
    assert panel.get("beta_T").is_flat
    with pytest.raises(ConfigError, match="not in the model"):
        panel.restricted(("beta_0", "beta_X", "beta_Y", "beta_XY"))
    assert panel.with_spec(PriorSpec.normal("beta_TY", 1.0, 1.0)).get("beta_TY").mean == 1.0
