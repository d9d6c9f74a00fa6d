import itertools
import math

import numpy as np
import pytest
from scipy import stats

from errors import ConfigError, DataError, SamplingError
from mc import (
    KINDS,
    SamplerConfig,
    confounder_draw,
    draw_identified,
    ignorance_interval,
    misclass_draw,
    run_sampler,
    selection_draw,
    summarize,
)
from model import CoefVector, SelectionCoefs, expected_counts
from priors import PriorPanel, PriorSpec
from tables import load_table
from workflows import prior_box

RECALL_XY = [[663.0, 602.0], [134.0, 173.0]]
PRIOR_MEANS = (math.log(0.1 / 0.9), math.log(13.5), 0.0, 0.0)


def _cfg(**kw) -> SamplerConfig:
    base = {"draws": 20_000, "seed": 11, "chunk": 4096}
    base.update(kw)
    return SamplerConfig(**base)


def test_dirichlet_draw_mean(recall_table):
    draws = draw_identified(recall_table, _cfg(), np.random.default_rng(1), size=200_000)
    assert draws.shape == (200_000, 2, 2)
    assert np.allclose(draws.sum(axis=-2), [797.0, 775.0])
    assert draws[:, 1, 1].mean() == pytest.approx(174.0 / 777.0 * 775.0, abs=0.1)


def test_bootstrap_keeps_stratum_totals(recall_table):
    draws = draw_identified(recall_table, _cfg(identified_mode="bootstrap"), np.random.default_rng(2), size=5000)
    assert np.all(draws.sum(axis=-2) == [797.0, 775.0])
    assert np.all(draws == np.round(draws))
    assert draws[:, 1, 1].mean() == pytest.approx(173.0, abs=0.5)


def test_single_draw_shape(recall_table):
    assert draw_identified(recall_table, _cfg(), np.random.default_rng(3)).shape == (2, 2)


def test_degenerate_stratum():
    cells = [
        {"index": {"X": 1, "Y": 1}, "count": 10},
        {"index": {"X": 0, "Y": 1}, "count": 0},
        {"index": {"X": 1, "Y": 0}, "count": 5},
        {"index": {"X": 0, "Y": 0}, "count": 5},
    ]
    table = load_table(cells)
    boot = draw_identified(table, _cfg(identified_mode="bootstrap"), np.random.default_rng(4), size=100)
    assert np.all(boot[:, 0, 1] == 0) and np.all(boot[:, 1, 1] == 10)
    haldane = draw_identified(table, _cfg(dirichlet_prior=0.0), np.random.default_rng(4), size=100)
    assert np.allclose(haldane[:, 1, 1], 10.0)


def test_identified_axes_must_end_in_y(recall_table):
    with pytest.raises(ConfigError, match="stratified by Y"):
        draw_identified(recall_table, _cfg(), np.random.default_rng(5), axes=("Y", "X"))
    with pytest.raises(DataError):
        draw_identified(recall_table, _cfg(), np.random.default_rng(5), axes=("T", "Y"))


def test_misclass_draw_examples():
    assert misclass_draw(RECALL_XY, PRIOR_MEANS) == pytest.approx(1.19, abs=0.005)
    assert misclass_draw(RECALL_XY, (0, 0, 0, 0)) == pytest.approx(1.0, rel=1e-12)
    with pytest.raises(DataError):
        misclass_draw([[1.0, 0.0], [1.0, 1.0]], PRIOR_MEANS)


def test_confounder_draw_matches_brute_force():
    rng = np.random.default_rng(6)
    for _ in range(50):
        bt, btx, bty, bxy = rng.normal(0.0, 1.0, 4)
        e = expected_counts(CoefVector(beta_T=bt, beta_TX=btx, beta_TY=bty, beta_XY=bxy))
        assert confounder_draw(e.xy_margin, (bt, btx, bty)) == pytest.approx(math.exp(bxy), rel=1e-10)


def test_selection_draw_examples():
    assert selection_draw([[2, 1], [1, 2]], SelectionCoefs(beta_STY=math.log(2.0))) == pytest.approx(2.0)
    assert selection_draw([[2, 1], [1, 2]]) == pytest.approx(4.0)
    assert selection_draw([[29, 21], [22, 12]]) == pytest.approx(29 * 12 / (21 * 22))
    assert selection_draw([[2, 1], [1, 2]], mode="stratum", beta_X_star=(0.3, 1.2, 0.0, 0.0)) == pytest.approx(4.0)


def test_sampler_is_thread_independent(recall_table, misclassification_panel):
    one = run_sampler("misclassification", recall_table, misclassification_panel, _cfg(draws=10_000, chunk=1000))
    four = run_sampler(
        "misclassification", recall_table, misclassification_panel, _cfg(draws=10_000, chunk=1000, threads=4)
    )
    assert np.array_equal(one.log_target, four.log_target)
    assert np.array_equal(one.bias, four.bias)
    other = run_sampler(
        "misclassification", recall_table, misclassification_panel, _cfg(draws=10_000, chunk=1000, seed=12)
    )
    assert not np.array_equal(one.log_target, other.log_target)


def test_sampler_draw_set_shape(recall_table, misclassification_panel):
    draws = run_sampler("misclassification", recall_table, misclassification_panel, _cfg(draws=5000))
    assert len(draws) == 5000 and draws.requested == 5000 and draws.dropped == 0
    assert draws.bias.shape == (5000, 4)
    assert draws.bias_names == ("beta_T", "beta_TX", "beta_TY", "beta_TXY")
    assert draws.index.tolist() == list(range(5000))
    assert np.allclose(draws.log_target, draws.identified - draws.log_factor)


def test_bias_draws_are_not_updated(recall_table, misclassification_panel):
    draws = run_sampler("misclassification", recall_table, misclassification_panel, _cfg(draws=100_000))
    for j, name in enumerate(draws.bias_names):
        p = misclassification_panel.get(name)
        res = stats.kstest(draws.bias[:, j], "norm", args=(p.mean, math.sqrt(p.variance)))
        assert res.statistic < 0.01


def test_sampler_needs_proper_bias_priors(recall_table):
    panel = PriorPanel.of(PriorSpec.normal("beta_T", -2.2, 0.16))
    with pytest.raises(SamplingError, match="proper priors"):
        run_sampler("misclassification", recall_table, panel, _cfg())
    with pytest.raises(ConfigError, match="Unknown sampler kind"):
        run_sampler("recall", recall_table, panel, _cfg())


def test_confounder_sampler(recall_table):
    panel = PriorPanel.of(
        PriorSpec.normal("beta_T", math.log(0.25 / 0.75), 0.25),
        PriorSpec.normal("beta_TX", math.log(2.0), 0.25),
        PriorSpec.normal("beta_TY", 0.0, 1e-12),
    )
    draws = run_sampler("confounder", recall_table, panel, _cfg())
    assert np.array_equal(draws.log_target, draws.identified - draws.log_factor)
    assert np.allclose(draws.log_target, draws.identified, atol=1e-5)


def test_selection_density_variance(selection_table):
    panel = PriorPanel.of(PriorSpec.normal("beta_STY", 0.0, 0.5))
    draws = run_sampler("selection-density", selection_table, panel, _cfg(draws=100_000))
    assert np.var(draws.log_target) == pytest.approx(np.var(draws.identified) + 0.5, rel=0.02)
    assert np.allclose(draws.log_factor, -draws.bias[:, 0])


def test_summarize_order_statistics():
    s = summarize(np.arange(1, 101, dtype=float))
    assert s.percentiles == {"2.5": 3.0, "97.5": 98.0}
    assert s.median == 50.0
    assert s.n == 100
    assert summarize([1.0, 2.0, 3.0]).median == 2.0
    assert summarize(np.arange(1, 101, dtype=float), levels=(0.1, 0.9)).percentiles == {"10": 10.0, "90": 90.0}


def test_summarize_variance_ratio():
    values = np.exp(np.random.default_rng(7).normal(0.0, 2.0, 50_000))
    s = summarize(values, crude_log_var=1.0)
    assert s.log_variance == pytest.approx(4.0, rel=0.03)
    assert s.variance_ratio == pytest.approx(0.25, rel=0.03)
    with pytest.raises(SamplingError, match="zero variance"):
        summarize(np.full(100, 1.3), crude_log_var=1.0)


def test_summarize_drop_limit():
    values = np.ones(1000)
    values[:500] = 2.0
    values[0] = np.nan
    assert summarize(values).n == 999
    values[1] = np.inf
    with pytest.raises(SamplingError, match="non-finite"):
        summarize(values)
    with pytest.raises(ConfigError):
        summarize(np.arange(1, 11, dtype=float), levels=(0.0, 0.5))


def test_ignorance_interval_covers_grid(misclassification_panel):
    box = prior_box(misclassification_panel, KINDS["misclassification"].bias)
    region = ignorance_interval(RECALL_XY, box, "misclassification")
    axes = [np.linspace(*box[n], 41) for n in KINDS["misclassification"].bias]
    e = np.array(RECALL_XY)
    lo, hi = math.inf, -math.inf
    for first in axes[0]:
        points = np.array([(first,) + rest for rest in itertools.product(*axes[1:])])
        values = KINDS["misclassification"].compute(np.broadcast_to(e, (len(points), 2, 2)), points)[2]
        lo, hi = min(lo, values.min()), max(hi, values.max())
    assert region.bounded
    assert region.lo <= math.exp(lo) * 1.005
    assert region.hi >= math.exp(hi) * 0.995
    assert region.lo < 1.19 < region.hi
    assert set(region.argmin) == set(box)


def test_ignorance_interval_degenerate_box():
    box = {name: (v, v) for name, v in zip(KINDS["misclassification"].bias, PRIOR_MEANS)}
    region = ignorance_interval(RECALL_XY, box)
    assert region.lo == pytest.approx(misclass_draw(RECALL_XY, PRIOR_MEANS), rel=1e-12)
    assert region.hi == pytest.approx(region.lo, rel=1e-12)


def test_ignorance_interval_unbounded():
    box = {name: (v, v) for name, v in zip(KINDS["misclassification"].bias, PRIOR_MEANS)}
    box["beta_TY"] = (-math.inf, math.inf)
    region = ignorance_interval(RECALL_XY, box)
    assert region.hi is None
    assert region.lo == 0.0
    assert not region.bounded


def test_ignorance_interval_box_checks():
    with pytest.raises(ConfigError, match="misses"):
        ignorance_interval(RECALL_XY, {"beta_T": (0.0, 1.0)})
    box = {name: (0.0, 1.0) for name in KINDS["misclassification"].bias}
    box["beta_T"] = (1.0, 0.0)
    with pytest.raises(ConfigError, match="lo <= hi"):
        ignorance_interval(RECALL_XY, box)
