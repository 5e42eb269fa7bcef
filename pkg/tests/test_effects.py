import math

import numpy as np
import pytest

from cffe.dgp import DgpSpec, TwoGroup, generate_panel
from cffe.effects import (AttCurve, AttPoint, counterfactual_predict, country_trajectories,
                          cumulative_effects, dynamic_att, group_att, median_split)
from cffe.errors import DimensionMismatch, EmptyGroup, EmptyHorizon, GapInSupport
from cffe.forest import ForestConfig, fit_forest


@pytest.fixture(scope="module")
def noiseless_model(noiseless_panel):
    ds, _ = noiseless_panel
    return fit_forest(ds, ForestConfig(n_trees=50, seed=2))


def flat_curve(value, n=21, se=0.1):
    return AttCurve({k: AttPoint(value, se, 11) for k in range(n)}, (0, n - 1))


def product_loop(values):
    level = 1.0
    for v in values:
        level = level * (1.0 + v / 100.0)
    return (level - 1.0) * 100.0


def test_constant_curve_is_flat(noiseless_model, noiseless_panel):
    ds, _ = noiseless_panel
    curve = dynamic_att(noiseless_model, ds)
    assert curve.ks == list(range(25))
    assert np.abs(curve.att() + 0.35).max() <= 1e-6
    assert all(p.n_k == 11 for p in curve.by_k.values())
    assert curve.by_k[0].forest_se <= 1e-4


def test_unsupported_horizons_are_omitted(noiseless_model, noiseless_panel):
    ds, _ = noiseless_panel
    curve = dynamic_att(noiseless_model, ds, horizons=[0, 24, 25])
    assert curve.ks == [0, 24]
    with pytest.raises(EmptyHorizon):
        dynamic_att(noiseless_model, ds, horizons=[25])


@pytest.fixture(scope="module")
def two_group():
    ds, truth = generate_panel(DgpSpec(seed=4, sigma_eps=0.1, cate=TwoGroup(-0.53, -0.31)))
    return ds, truth, fit_forest(ds, ForestConfig(n_trees=100, seed=4))


def test_dynamic_att_is_the_weighted_mean_of_groups(two_group):
    ds, truth, model = two_group
    whole = dynamic_att(model, ds, with_forest_se=False)
    for feature in ds.feature_names:
        parts = group_att(model, ds, median_split(ds, feature), with_forest_se=False)
        for k in whole.ks:
            n = sum(c.by_k[k].n_k for c in parts.values())
            mixed = sum(c.by_k[k].n_k * c.by_k[k].att for c in parts.values()) / n
            assert mixed == pytest.approx(whole.by_k[k].att, abs=1e-10)


def test_true_threshold_separates_groups(two_group):
    ds, truth, model = two_group
    cut = truth.cate_kind.threshold
    curves = group_att(model, ds, lambda row: row["gdp_pc"] >= cut)
    high, low = curves[True].by_k[10].att, curves[False].by_k[10].att
    assert high - low >= 0.1
    assert abs(high + 0.31) < 0.1 and abs(low + 0.53) < 0.1


def test_grouping_sees_only_pre_treatment_features(small_forest, small_panel):
    ds, _ = small_panel
    seen = []

    def grouping(row):
        seen.append(set(row.index))
        return row["gdp_pc"] > 0

    group_att(small_forest, ds, grouping, with_forest_se=False)
    assert all(s == set(ds.feature_names) for s in seen)
    with pytest.raises(KeyError):
        group_att(small_forest, ds, lambda row: row["outcome"] > 0)
    with pytest.raises(EmptyGroup):
        group_att(small_forest, ds, lambda row: True)


def test_irrelevant_split_is_indistinguishable():
    ds, _ = generate_panel(DgpSpec(seed=6))
    model = fit_forest(ds, ForestConfig(n_trees=100, seed=6))
    curves = group_att(model, ds, median_split(ds, "human_capital"))
    a, b = curves[True].by_k[10], curves[False].by_k[10]
    assert abs(a.att - b.att) < 2 * math.hypot(a.forest_se, b.forest_se) + 2 * math.hypot(a.se, b.se)


def test_cumulative_constant_curve():
    cum = cumulative_effects(flat_curve(-0.35)).by_horizon[20]
    assert cum.simple_sum == pytest.approx(-7.35, abs=1e-12)
    assert cum.compounded == pytest.approx(product_loop([-0.35] * 21), abs=1e-12)
    assert cum.compounded == pytest.approx(-7.10, abs=0.01)
    assert abs(cum.compounded) < abs(cum.simple_sum)


def test_cumulative_matches_product_loop(rng):
    values = rng.normal(-0.4, 0.3, 15)
    curve = AttCurve({k: AttPoint(v, 0.2, 5) for k, v in enumerate(values)}, (0, 14))
    cum = cumulative_effects(curve)
    for h, point in cum.by_horizon.items():
        assert point.compounded == pytest.approx(product_loop(values[: h + 1]), abs=1e-12)
        assert point.simple_sum == pytest.approx(values[: h + 1].sum(), abs=1e-12)


def test_cumulative_zero_curve():
    for p in cumulative_effects(flat_curve(0.0)).by_horizon.values():
        assert p.simple_sum == 0 and p.compounded == 0


def test_cumulative_delta_method_interval():
    cum = cumulative_effects(flat_curve(-1.0, n=2, se=0.5)).by_horizon[1]
    # d/da0 of (1+a0/100)(1+a1/100) = (1+a1/100), times 100/100
    grad = np.array([0.99, 0.99])
    se = math.sqrt(np.sum((grad * 0.5) ** 2))
    assert cum.ci_high - cum.compounded == pytest.approx(1.959963984540054 * se)
    assert cum.simple_ci_high - cum.simple_sum == pytest.approx(1.959963984540054 * math.sqrt(0.5))


def test_cumulative_gaps():
    curve = AttCurve({0: AttPoint(-1, 0.1, 3), 1: AttPoint(-1, 0.1, 3), 3: AttPoint(-1, 0.1, 3)}, (0, 3))
    assert list(cumulative_effects(curve).by_horizon) == [0, 1]
    with pytest.raises(GapInSupport, match="k = 2"):
        cumulative_effects(curve, horizons=[3])
    with pytest.raises(GapInSupport):
        cumulative_effects(AttCurve({1: AttPoint(-1, 0.1, 3)}, (1, 1)))


def test_country_trajectories(noiseless_model, noiseless_panel):
    ds, _ = noiseless_panel
    traj = country_trajectories(noiseless_model, ds.restrict_years(1970, 2002))
    assert set(traj) == set(ds.treated_countries)
    t = traj["T01"]
    assert t.curve.ks == [0, 1, 2, 3]
    assert t.post_average == pytest.approx(-0.35, abs=1e-6)


def test_counterfactual(two_group):
    ds, truth, model = two_group
    x = ds.country_features.loc["T03"].to_numpy()
    path = counterfactual_predict(model, x, (0, 30))
    own = country_trajectories(model, ds)["T03"].curve
    for k in own.ks:
        assert path.by_k[k].att == pytest.approx(own.by_k[k].att, abs=1e-12)
    assert not path.by_k[24].extrapolative and path.by_k[25].extrapolative
    median = ds.country_features.loc[list(ds.control_countries)].median().to_numpy()
    mid = counterfactual_predict(model, median, (0, 20)).by_k[10].att
    assert -0.53 - 0.05 <= mid <= -0.31 + 0.05
    with pytest.raises(DimensionMismatch):
        counterfactual_predict(model, [1.0])
