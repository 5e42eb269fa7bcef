import numpy as np
import pandas as pd
import pytest

from cffe.errors import (DuplicateKey, EmptyGroup, InvalidPanel, InvalidSpec, MalformedCsv,
                         SchemaMismatch, YearOutOfRange)
from cffe.panel import (PanelDataset, PanelSchema, balance_table, compute_event_time, load_panel,
                        parse_key_value, summary_stats)

SCHEMA = PanelSchema(features=("gdp_pc",))

CSV = b"""country,year,outcome,adoption_year,gdp_pc
AUT,1997,1.5,1999,10
AUT,1998,2.0,1999,10
AUT,1999,0.5,1999,10
AUT,2000,1.0,1999,10
DNK,1997,2.5,,12
DNK,1998,3.0,,12
DNK,1999,2.0,,12
DNK,2000,2.5,,12
"""


def test_load_panel_derives_event_time_and_treatment():
    ds = load_panel(CSV, SCHEMA)
    f = ds.frame
    aut = f[f.country == "AUT"]
    assert aut["event_time"].tolist() == [-2, -1, 0, 1]
    assert aut["treated"].tolist() == [False, False, True, True]
    dnk = f[f.country == "DNK"]
    assert dnk["event_time"].isna().all() and not dnk["treated"].any()
    assert ds.treated_countries == ("AUT",) and ds.control_countries == ("DNK",)
    assert ds.adoption_years == {"AUT": 1999, "DNK": None}


def test_event_time_is_idempotent():
    ds = load_panel(CSV, SCHEMA)
    assert compute_event_time(compute_event_time(ds)) == ds


def test_missing_outcome_rows_are_dropped_and_counted():
    raw = CSV.replace(b"AUT,1998,2.0,", b"AUT,1998,,")
    ds = load_panel(raw, SCHEMA)
    assert len(ds) == 7 and ds.n_dropped == 1
    assert any("missing outcome" in w for w in ds.warnings)


def test_varying_feature_keeps_first_value_with_warning():
    raw = CSV.replace(b"DNK,2000,2.5,,12", b"DNK,2000,2.5,,13")
    ds = load_panel(raw, SCHEMA)
    assert ds.country_features.loc["DNK", "gdp_pc"] == 12
    assert any("varies within DNK" in w for w in ds.warnings)


@pytest.mark.parametrize("raw, exc, fragment", [
    (CSV.replace(b"AUT,1998,2.0", b"AUT,1998,abc"), MalformedCsv, "row 3"),
    (CSV.replace(b"AUT,1998", b"AUT,1997"), DuplicateKey, "AUT"),
    (CSV.replace(b"gdp_pc\n", b"gdp\n", 1), SchemaMismatch, "gdp_pc"),
    (CSV.replace(b"AUT,2000,1.0,1999", b"AUT,2000,1.0,1998"), MalformedCsv, "inconsistent"),
    (b"", MalformedCsv, "header"),
    (b"\xff\xfe", MalformedCsv, "UTF-8"),
])
def test_malformed_inputs(raw, exc, fragment):
    with pytest.raises(exc, match=fragment):
        load_panel(raw, SCHEMA)


def test_malformed_csv_reports_row_and_column():
    with pytest.raises(MalformedCsv) as info:
        load_panel(CSV.replace(b"DNK,1999,2.0", b"DNK,1999,two"), SCHEMA)
    assert info.value.row == 8 and info.value.column == "outcome"


def test_adoption_after_sample_is_rejected():
    with pytest.raises(InvalidPanel, match="after the last sample year"):
        load_panel(CSV.replace(b"1999,10", b"2010,10"), SCHEMA)


def test_derived_datasets(small_panel):
    ds, _ = small_panel
    sub = ds.restrict_years(1995, 2005)
    assert sub.year_range == (1995, 2005)
    dropped = ds.drop_countries(["T01"])
    assert "T01" not in dropped.countries and len(dropped) == len(ds) - 23
    moved = ds.with_adoption({"C01": 2004})
    assert "C01" in moved.treated_countries
    stacked = ds.relabel_countries(["T01", "T01", "C02"])
    assert stacked.countries == ("C02#0", "T01#0", "T01#1")
    assert np.allclose(stacked.frame.query("country == 'T01#1'")["outcome"].to_numpy(),
                       ds.frame.query("country == 'T01'")["outcome"].to_numpy())


def test_extra_outcome_swap():
    raw = CSV.replace(b"gdp_pc\n", b"gdp_pc,invest\n", 1)
    lines = raw.decode().splitlines()
    raw = "\n".join([lines[0]] + [ln + ("," if i == 2 else ",0.5") for i, ln in enumerate(lines[1:], 1)])
    ds = load_panel(raw.encode(), PanelSchema(features=("gdp_pc",), extra_outcomes=("invest",)))
    swapped = ds.with_outcome("invest")
    assert len(swapped) == 7 and (swapped.y == 0.5).all()
    with pytest.raises(SchemaMismatch):
        ds.with_outcome("nope")


def test_summary_stats_matches_pandas(small_panel):
    ds, _ = small_panel
    table = summary_stats(ds).table
    f = ds.frame
    treated = f[f.adoption_year.notna()]
    assert table.loc["outcome", ("treated", "mean")] == pytest.approx(treated["outcome"].mean())
    assert table.loc["outcome", ("full", "std")] == pytest.approx(f["outcome"].std(ddof=1))


def test_summary_stats_needs_both_groups():
    ds = load_panel(CSV, SCHEMA).drop_countries(["DNK"])
    with pytest.raises(EmptyGroup):
        summary_stats(ds)


def test_balance_table(small_panel):
    ds, _ = small_panel
    t = balance_table(ds, ["T01", "T02"], ["C01", "C02", "C03"], 1998).table
    f = ds.frame.query("year == 1998").set_index("country")
    left = f.loc[["T01", "T02"], "gdp_pc"].mean()
    right = f.loc[["C01", "C02", "C03"], "gdp_pc"].mean()
    assert t.loc["gdp_pc", ("diff", "")] == pytest.approx(left - right)
    with pytest.raises(YearOutOfRange):
        balance_table(ds, ["T01"], ["C01"], 1900)


def test_parse_key_value():
    assert parse_key_value("a = 1\n# comment\nb=x, y  # trailing\n") == {"a": "1", "b": "x, y"}
    with pytest.raises(InvalidSpec):
        parse_key_value("a = 1\na = 2\n")


def test_frame_is_a_copy(small_panel):
    ds, _ = small_panel
    f = ds.frame
    f.loc[0, "outcome"] = 1e9
    assert ds.frame.loc[0, "outcome"] != 1e9
