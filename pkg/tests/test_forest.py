import dataclasses

import numpy as np
import pytest

from cffe.dgp import DgpSpec, TwoGroup, generate_panel
from cffe.errors import DimensionMismatch, InsufficientData, InvalidSpec, NoSplits, TooFewTrees
from cffe.forest import (ForestConfig, ForestModel, _train_data, _tree_rows, feature_importance,
                         fit_forest, forest_variance, functional_variance, grouped_variance, grow_tree,
                         predict_cate, residualize_node, twoway_residuals)

from conftest import small_spec


def dummy_ols_residuals(z, country, year):
    """Oracle: least squares on explicit country and year indicator columns."""
    cu = np.unique(country)
    tu = np.unique(year)
    X = np.column_stack([np.ones(len(z))]
                        + [(country == c).astype(float) for c in cu[1:]]
                        + [(year == t).astype(float) for t in tu[1:]])
    beta, *_ = np.linalg.lstsq(X, z, rcond=None)
    return z - X @ beta


def test_three_by_three_node_matches_dummy_ols():
    country = np.array([0, 0, 0, 1, 1, 1, 2, 2, 2])
    year = np.array([0, 1, 2] * 3)
    y = np.array([1.0, 2.5, -0.3, 0.7, 4.0, 2.2, -1.0, 0.1, 3.3])
    d = np.array([0, 1, 1, 0, 0, 1, 0, 0, 0], float)
    res = residualize_node(y, d, country, year)
    assert not res.degenerate and res.mode == "two-way"
    np.testing.assert_allclose(res.y, dummy_ols_residuals(y, country, year), atol=1e-12)
    np.testing.assert_allclose(res.d, dummy_ols_residuals(d, country, year), atol=1e-12)


@pytest.mark.parametrize("n_c, n_t", [(3, 9), (12, 4), (7, 7)])
def test_unbalanced_node_matches_dummy_ols_and_is_orthogonal(rng, n_c, n_t):
    country = np.repeat(np.arange(n_c), n_t)
    year = np.tile(np.arange(n_t), n_c)
    keep = rng.random(len(country)) > 0.25
    keep[:n_t] = True
    keep[::n_t] = True
    country, year = country[keep], year[keep]
    z = rng.standard_normal((len(country), 2))
    out, mode = twoway_residuals(z, country, year)
    assert mode == "two-way"
    np.testing.assert_allclose(out, dummy_ols_residuals(z, country, year), atol=1e-10)
    for c in np.unique(country):
        assert abs(out[country == c].sum(axis=0)).max() <= 1e-10
    for t in np.unique(year):
        assert abs(out[year == t].sum(axis=0)).max() <= 1e-10


def test_additive_effects_residualize_to_zero():
    country = np.repeat(np.arange(4), 5)
    year = np.tile(np.arange(5), 4)
    y = np.array([1.0, -2.0, 0.5, 3.0])[country] + np.linspace(0, 1, 5)[year]
    res, _ = twoway_residuals(y, country, year)
    assert np.abs(res).max() < 1e-12


def test_single_country_node_is_year_demeaned():
    y = np.array([1.0, 2.0, 4.0])
    res = residualize_node(y, np.array([0, 1, 1.0]), np.zeros(3, int), np.arange(3))
    assert res.degenerate and res.mode == "year-only"
    # one row per year: demeaning by year leaves nothing
    assert np.allclose(res.y, 0)
    res = residualize_node(y, np.array([0, 1, 1.0]), np.arange(3), np.zeros(3, int))
    assert res.mode == "country-only" and np.allclose(res.y, 0)


def test_noiseless_leaves_equal_tau(noiseless_panel):
    ds, _ = noiseless_panel
    model = fit_forest(ds, ForestConfig(n_trees=20, seed=1))
    effects = []

    def walk(node):
        if node.is_leaf:
            effects.append(node.leaf_effect)
        else:
            walk(node.children[0]), walk(node.children[1])

    for t in model.trees:
        walk(t)
    assert len(effects) >= 20  # constant effect: stumps are expected
    assert max(abs(e + 0.35) for e in effects) < 1e-6
    assert predict_cate(model, 7, ds.x[0]) == pytest.approx(-0.35, abs=1e-6)


def test_no_treated_rows_is_insufficient(small_panel):
    ds, _ = small_panel
    with pytest.raises(InsufficientData):
        fit_forest(ds.drop_countries(ds.treated_countries), ForestConfig(n_trees=2))


def test_config_validation():
    for kw in ({"n_trees": 0}, {"min_leaf": 0}, {"honesty_fraction": 1.0}, {"subsample_fraction": 0}):
        with pytest.raises(InvalidSpec):
            ForestConfig(**kw)


def test_depth_zero_forest_predicts_constant(small_panel):
    ds, _ = small_panel
    model = fit_forest(ds, ForestConfig(n_trees=10, max_depth=0, seed=2))
    roots = np.array([t.leaf_effect for t in model.trees])
    q = np.column_stack([np.arange(5), np.random.default_rng(0).standard_normal((5, 4))])
    np.testing.assert_allclose(model.predict(q), roots.mean())
    with pytest.raises(NoSplits):
        feature_importance(model)


def test_importance_proportions(small_forest):
    imp = feature_importance(small_forest)
    assert list(imp) == ["event_time", "gdp_pc", "trade_open", "invest_share", "human_capital"]
    assert sum(p for p, _ in imp.values()) == pytest.approx(1.0, abs=1e-15)
    assert sum(c for _, c in imp.values()) == small_forest.split_counts.sum()


def test_dimension_checks(small_forest):
    with pytest.raises(DimensionMismatch):
        predict_cate(small_forest, 0, [1.0, 2.0])
    with pytest.raises(DimensionMismatch):
        small_forest.predict(np.zeros((2, 3)))


def test_fit_is_deterministic_across_threads(small_panel):
    ds, _ = small_panel
    cfg = ForestConfig(n_trees=24, min_leaf=10, seed=9)
    a = fit_forest(ds, cfg, n_jobs=1).to_json()
    assert fit_forest(ds, cfg, n_jobs=4).to_json() == a
    assert fit_forest(ds, dataclasses.replace(cfg, seed=10)).to_json() != a


def test_json_round_trip(small_forest):
    back = ForestModel.from_json(small_forest.to_json())
    q = np.column_stack([np.arange(6), np.linspace(-1, 1, 24).reshape(6, 4)])
    np.testing.assert_array_equal(back.predict(q), small_forest.predict(q))
    assert back.k_support == small_forest.k_support
    with pytest.raises(ValueError):
        ForestModel.from_json('{"format": "other"}')


def _structure(node):
    if node.is_leaf:
        return None
    return (node.split_feature, node.split_threshold, _structure(node.children[0]),
            _structure(node.children[1]))


def test_estimation_half_outcomes_do_not_move_splits(small_panel, rng):
    ds, _ = small_panel
    cfg = ForestConfig(min_leaf=10)
    data = _train_data(ds)
    for i in range(5):
        split_rows, est_rows = _tree_rows(len(data.y), cfg, i)
        tree = grow_tree(data, split_rows, est_rows, cfg)
        y = data.y.copy()
        y[est_rows] = rng.permutation(y[est_rows]) + 100.0
        shuffled = grow_tree(dataclasses.replace(data, y=y), split_rows, est_rows, cfg)
        assert _structure(shuffled) is not None or _structure(tree) is None
        # pruning uses only counts, never outcomes, so the shape is identical
        assert _structure(shuffled) == _structure(tree)


def test_subsamples_respect_group_halves():
    cfg = ForestConfig(seed=4)
    a_split, a_est = _tree_rows(1000, cfg, 0)
    b_split, b_est = _tree_rows(1000, cfg, 1)
    assert not set(a_split) & set(a_est)
    pool_a = set(a_split) | set(a_est)
    pool_b = set(b_split) | set(b_est)
    assert len(pool_a) == len(pool_b) == 500


def test_grouped_variance_oracle():
    # two groups of two trees: group means 1 and 3, within variances 0.5 and 2
    vals = np.array([[0.5], [1.5], [2.0], [4.0]])
    between = ((1 - 2) ** 2 + (3 - 2) ** 2) / 2
    within = (0.5 + 2.0) / 2 / 2
    assert grouped_variance(vals, 2)[0] == pytest.approx(between - within)
    assert grouped_variance(np.ones((6, 3)), 2).tolist() == [0, 0, 0]


def test_noiseless_forest_variance_vanishes(noiseless_panel):
    ds, _ = noiseless_panel
    model = fit_forest(ds, ForestConfig(n_trees=50, seed=3))
    assert forest_variance(model, 5, ds.x[0]) <= 1e-8
    assert functional_variance(model, np.column_stack([np.arange(3), ds.x[:3]])) <= 1e-8


def test_variance_requires_enough_trees(small_forest, small_panel):
    ds, _ = small_panel
    forest_variance(small_forest, 3, ds.x[0])  # 60 trees is enough
    few = fit_forest(ds, ForestConfig(n_trees=20, min_leaf=10))
    with pytest.raises(TooFewTrees):
        forest_variance(few, 3, ds.x[0])


def test_variance_shrinks_with_more_trees(small_panel):
    ds, _ = small_panel
    q = np.column_stack([np.arange(0, 12), np.tile(ds.x[:6], (2, 1))])
    small = fit_forest(ds, ForestConfig(n_trees=50, min_leaf=10, ci_group_size=2, seed=5))
    large = fit_forest(ds, ForestConfig(n_trees=400, min_leaf=10, ci_group_size=2, seed=5))
    v_small = [forest_variance(small, int(r[0]), r[1:]) for r in q]
    v_large = [forest_variance(large, int(r[0]), r[1:]) for r in q]
    assert min(v_small + v_large) >= 0
    assert np.median(v_large) < np.median(v_small)


def test_two_group_split_on_the_group_feature():
    first = []
    ordering = 0
    for seed in range(5):
        ds, truth = generate_panel(DgpSpec(seed=seed, sigma_eps=0.1, cate=TwoGroup(-1.0, 1.0)))
        model = fit_forest(ds, ForestConfig(n_trees=60, seed=seed))
        first += [t.split_feature for t in model.trees if not t.is_leaf]
        x_hi = truth.features.loc[list(ds.treated_countries)].max().to_numpy()
        x_lo = x_hi.copy()
        x_hi[0], x_lo[0] = 2.0, -2.0
        ordering += predict_cate(model, 5, x_hi) > predict_cate(model, 5, x_lo)
    assert np.mean(np.array(first) == 1) >= 0.9
    assert ordering == 5
