import numpy as np
import pandas as pd
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cffe.dsge import DsgeCalibration, Shock, build_system, solve_irf
from cffe.effects import AttCurve, AttPoint, cumulative_effects
from cffe.forest import grouped_variance, twoway_residuals
from cffe.inference import cluster_robust_var
from cffe.panel import PanelDataset, PanelSchema, compute_event_time, load_panel
from cffe.reporting import export_panel, infer_schema

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@st.composite
def unbalanced_cells(draw):
    n_c = draw(st.integers(2, 6))
    n_t = draw(st.integers(2, 6))
    mask = draw(hnp.arrays(bool, (n_c, n_t)))
    mask[:, 0] = True
    mask[0, :] = True
    c, t = np.nonzero(mask)
    z = draw(hnp.arrays(float, (len(c), 2), elements=finite))
    return z, c, t


@given(unbalanced_cells())
@settings(max_examples=60, deadline=None)
def test_residuals_orthogonal_to_indicators(cells):
    z, c, t = cells
    res, mode = twoway_residuals(z, c, t)
    assert mode == "two-way"
    scale = 1.0 + np.abs(z).max()
    for codes in (c, t):
        sums = np.array([res[codes == g].sum(axis=0) for g in np.unique(codes)])
        assert np.abs(sums).max() <= 1e-9 * scale * len(z)


@given(st.lists(st.tuples(finite, st.integers(0, 4)), min_size=2, max_size=30),
       st.integers(1, 4))
@settings(max_examples=80, deadline=None)
def test_cluster_var_duplication_invariance(rows, reps):
    tau = np.array([r[0] for r in rows])
    countries = np.array([r[1] for r in rows])
    assume(len(np.unique(countries)) >= 2)
    v = cluster_robust_var(tau, countries)
    assert v >= 0
    dup = cluster_robust_var(np.repeat(tau, reps), np.repeat(countries, reps))
    assert np.isclose(dup, v, rtol=1e-9, atol=1e-9 * (1 + np.abs(tau).max()) ** 2)


def _curve(values):
    return AttCurve({k: AttPoint(v, 0.1, 3) for k, v in enumerate(values)}, (0, len(values) - 1))


@given(st.lists(st.floats(0.0, 99.0), min_size=1, max_size=25), st.sampled_from([-1.0, 1.0]))
@settings(max_examples=100, deadline=None)
def test_compounding_bound(magnitudes, sign):
    values = [sign * m for m in magnitudes]
    for h, p in cumulative_effects(_curve(values)).by_horizon.items():
        loop = 1.0
        for v in values[: h + 1]:
            loop *= 1.0 + v / 100.0
        assert np.isclose(p.compounded, (loop - 1.0) * 100.0, rtol=1e-12, atol=1e-12)
        if sign < 0:
            assert abs(p.compounded) <= abs(p.simple_sum) + 1e-9
        else:
            # growth compounds upward: the level effect is at least the sum
            assert p.compounded >= p.simple_sum - 1e-9


@given(hnp.arrays(float, st.tuples(st.integers(2, 12).map(lambda n: 2 * n), st.integers(1, 4)),
                  elements=finite))
@settings(max_examples=60, deadline=None)
def test_grouped_variance_nonnegative(values):
    assert (grouped_variance(values, 2) >= 0).all()


@st.composite
def small_panels(draw):
    n = draw(st.integers(2, 5))
    years = list(range(2000, 2000 + draw(st.integers(2, 6))))
    rows = []
    for i in range(n):
        adopt = draw(st.one_of(st.none(), st.sampled_from(years)))
        x = draw(finite)
        for y in years:
            rows.append((f"c{i}", y, draw(finite), adopt, x))
    f = pd.DataFrame(rows, columns=["country", "year", "outcome", "adoption_year", "x1"])
    f["adoption_year"] = pd.array(f["adoption_year"], dtype="Int64")
    return PanelDataset(f, ("x1",))


@given(small_panels())
@settings(max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow])
def test_event_time_and_csv_round_trip(ds):
    assert compute_event_time(ds) == ds
    f = ds.frame
    has = f["adoption_year"].notna()
    assert (f.loc[has, "event_time"] == f.loc[has, "year"] - f.loc[has, "adoption_year"]).all()
    assert f.loc[~has, "event_time"].isna().all()
    raw = export_panel(ds)
    assert load_panel(raw, infer_schema(raw)) == ds


@given(st.floats(-0.05, 0.05).filter(lambda s: abs(s) > 1e-6),
       st.sampled_from(["g_H", "g_F", "u_F", "z_rn_H"]), st.sampled_from(["union", "float"]))
@settings(max_examples=12, deadline=None)
def test_irf_is_linear_in_shock_size(size, shock, regime):
    system = build_system(DsgeCalibration(), regime)
    base = solve_irf(system, Shock(shock, 0.01), horizon=150, check_horizon=False)
    scaled = solve_irf(system, Shock(shock, size), horizon=150, check_horizon=False)
    for v, path in base.paths.items():
        np.testing.assert_allclose(scaled.paths[v], path * (size / 0.01),
                                   atol=1e-10 * max(1.0, np.abs(path).max() * abs(size) / 0.01))
