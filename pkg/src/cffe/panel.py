"""Long-format country-year panels: ingestion, event time and descriptive tables.

A :class:`PanelDataset` wraps a pandas frame sorted by ``(country, year)``
with the reserved columns

``country``, ``year``, ``outcome``, ``adoption_year``, ``treated``, ``event_time``

followed by the feature columns and any extra outcome columns.  Adoption
year and event time are nullable integers: never-treated rows carry
``pd.NA``, never a numeric placeholder.
"""

from __future__ import annotations

import configparser
import csv
import io
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import BinaryIO, Iterable, Iterator, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import (
    DuplicateKey,
    EmptyGroup,
    InvalidPanel,
    InvalidSpec,
    MalformedCsv,
    SchemaMismatch,
    YearOutOfRange,
)

logger = logging.getLogger(__name__)

RESERVED = ("country", "year", "outcome", "adoption_year", "treated", "event_time")


@dataclass(frozen=True)
class Observation:
    country_id: str
    year: int
    outcome: float
    treated: bool
    adoption_year: int | None
    features: tuple[float, ...]
    extra_outcomes: Mapping[str, float | None]
    event_time: int | None = None


@dataclass(frozen=True)
class PanelSchema:
    """Column-name configuration for :func:`load_panel`."""

    features: tuple[str, ...] = ()
    extra_outcomes: tuple[str, ...] = ()
    country: str = "country"
    year: str = "year"
    outcome: str = "outcome"
    adoption_year: str = "adoption_year"

    @classmethod
    def from_config(cls, text: str) -> "PanelSchema":
        """Parse ``key=value`` lines, e.g. ``features = gdp_pc, trade_open``."""
        values = parse_key_value(text)
        kwargs: dict = {}
        for key in ("features", "extra_outcomes"):
            if key in values:
                kwargs[key] = tuple(v.strip() for v in values.pop(key).split(",") if v.strip())
        for key in ("country", "year", "outcome", "adoption_year"):
            if key in values:
                kwargs[key] = values.pop(key).strip()
        if values:
            raise SchemaMismatch(f"unknown schema keys: {sorted(values)}")
        return cls(**kwargs)


def parse_key_value(text: str) -> dict[str, str]:
    """Flat ``key=value`` config parsing; ``#`` starts a comment line."""
    parser = configparser.ConfigParser(
        delimiters=("=",), comment_prefixes=("#",), inline_comment_prefixes=("#",),
        interpolation=None,
    )
    parser.optionxform = str  # keep key case
    try:
        parser.read_string("[root]\n" + text)
    except configparser.Error as exc:
        raise InvalidSpec(f"malformed key=value config: {' '.join(str(exc).split())}") from None
    return dict(parser["root"])


class PanelDataset:
    """Validated, immutable country-year panel.

    Parameters
    ----------
    frame : pd.DataFrame
        Must contain ``country``, ``year``, ``outcome``, ``adoption_year`` and
        every name in ``feature_names`` / ``extra_names``.  ``treated`` and
        ``event_time`` are derived and overwritten.
    feature_names, extra_names : sequence of str
    warnings : sequence of str
        Messages recorded during ingestion (feature conflicts, dropped rows).
    n_dropped : int
        Rows dropped for a missing outcome.
    """

    def __init__(
        self,
        frame: pd.DataFrame,
        feature_names: Sequence[str],
        extra_names: Sequence[str] = (),
        warnings: Sequence[str] = (),
        n_dropped: int = 0,
    ):
        self.feature_names = tuple(feature_names)
        self.extra_names = tuple(extra_names)
        self.warnings = tuple(warnings)
        self.n_dropped = int(n_dropped)
        self._frame = _validate_frame(frame, self.feature_names, self.extra_names)

    # -- views -------------------------------------------------------------
    @property
    def frame(self) -> pd.DataFrame:
        """A copy of the underlying frame (the dataset itself never mutates)."""
        return self._frame.copy()

    def __len__(self) -> int:
        return len(self._frame)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PanelDataset):
            return NotImplemented
        return (
            self.feature_names == other.feature_names
            and self.extra_names == other.extra_names
            and self._frame.equals(other._frame)
        )

    def __repr__(self) -> str:
        return (
            f"PanelDataset(n_obs={len(self)}, n_countries={self.n_countries}, "
            f"years={self.year_range}, features={list(self.feature_names)})"
        )

    def observations(self) -> Iterator[Observation]:
        f = self._frame
        feats = f[list(self.feature_names)].to_numpy(float)
        for j, row in enumerate(f.itertuples(index=False)):
            extras = {name: _opt_float(f[name].iat[j]) for name in self.extra_names}
            yield Observation(
                country_id=row.country,
                year=int(row.year),
                outcome=float(row.outcome),
                treated=bool(row.treated),
                adoption_year=_opt_int(row.adoption_year),
                features=tuple(float(v) for v in feats[j]),
                extra_outcomes=extras,
                event_time=_opt_int(row.event_time),
            )

    @cached_property
    def countries(self) -> tuple[str, ...]:
        return tuple(pd.unique(self._frame["country"]))

    @property
    def n_countries(self) -> int:
        return len(self.countries)

    @cached_property
    def country_index(self) -> dict[str, np.ndarray]:
        codes = self.country_codes
        return {c: np.flatnonzero(codes == i) for i, c in enumerate(self.countries)}

    @cached_property
    def year_range(self) -> tuple[int, int]:
        years = self._frame["year"]
        return int(years.min()), int(years.max())

    @cached_property
    def adoption_years(self) -> dict[str, int | None]:
        first = self._frame.groupby("country", sort=False)["adoption_year"].first()
        return {c: _opt_int(first[c]) for c in self.countries}

    @property
    def treated_countries(self) -> tuple[str, ...]:
        return tuple(c for c, a in self.adoption_years.items() if a is not None)

    @property
    def control_countries(self) -> tuple[str, ...]:
        return tuple(c for c, a in self.adoption_years.items() if a is None)

    @cached_property
    def country_features(self) -> pd.DataFrame:
        """One row of (constant) features per country, in country order."""
        f = self._frame.groupby("country", sort=False)[list(self.feature_names)].first()
        return f.loc[list(self.countries)]

    # -- numpy views used by the estimators --------------------------------
    @cached_property
    def country_codes(self) -> np.ndarray:
        codes = pd.Categorical(self._frame["country"], categories=self.countries).codes
        return np.asarray(codes, dtype=np.intp)

    @cached_property
    def year_codes(self) -> np.ndarray:
        return (self._frame["year"].to_numpy(np.int64) - self.year_range[0]).astype(np.intp)

    @cached_property
    def years(self) -> np.ndarray:
        return self._frame["year"].to_numpy(np.int64)

    @cached_property
    def y(self) -> np.ndarray:
        return self._frame["outcome"].to_numpy(float)

    @cached_property
    def d(self) -> np.ndarray:
        return self._frame["treated"].to_numpy(bool).astype(float)

    @cached_property
    def event_time_mask(self) -> np.ndarray:
        """True where an event time exists (rows of ever-treated countries)."""
        return ~self._frame["event_time"].isna().to_numpy()

    def event_time_values(self) -> np.ndarray:
        """Integer event times of the rows that have one (see ``event_time_mask``)."""
        return self._frame["event_time"].to_numpy()[self.event_time_mask].astype(np.int64)

    @cached_property
    def x(self) -> np.ndarray:
        return self._frame[list(self.feature_names)].to_numpy(float)

    # -- derived datasets --------------------------------------------------
    def _derive(self, frame: pd.DataFrame, warnings: Iterable[str] = ()) -> "PanelDataset":
        return PanelDataset(
            frame, self.feature_names, self.extra_names,
            warnings=self.warnings + tuple(warnings), n_dropped=self.n_dropped,
        )

    def subset_rows(self, mask: np.ndarray) -> "PanelDataset":
        return self._derive(self._frame.loc[np.asarray(mask, bool)])

    def keep_countries(self, countries: Iterable[str]) -> "PanelDataset":
        keep = set(countries)
        return self.subset_rows(self._frame["country"].isin(keep).to_numpy())

    def drop_countries(self, countries: Iterable[str]) -> "PanelDataset":
        drop = set(countries)
        return self.subset_rows(~self._frame["country"].isin(drop).to_numpy())

    def restrict_years(self, start: int | None = None, end: int | None = None) -> "PanelDataset":
        years = self.years
        mask = np.ones(len(self), bool)
        if start is not None:
            mask &= years >= start
        if end is not None:
            mask &= years <= end
        return self.subset_rows(mask)

    def with_adoption(self, mapping: Mapping[str, int | None]) -> "PanelDataset":
        """Return a copy with the adoption year of the listed countries replaced."""
        f = self._frame.copy()
        for country, year in mapping.items():
            if country not in self.country_index:
                raise InvalidPanel(f"unknown country {country!r}")
            f.loc[f["country"] == country, "adoption_year"] = pd.NA if year is None else int(year)
        return self._derive(f)

    def with_outcome(self, column: str) -> "PanelDataset":
        """Swap in an extra outcome column as the outcome; rows missing it are dropped."""
        if column == "outcome":
            return self
        if column not in self.extra_names:
            raise SchemaMismatch(f"unknown outcome column {column!r}")
        f = self._frame.copy()
        f["outcome"] = f[column].astype(float)
        missing = f["outcome"].isna()
        note = [f"dropped {int(missing.sum())} rows missing {column}"] if missing.any() else []
        return self._derive(f.loc[~missing], note)

    def relabel_countries(self, draws: Sequence[str], suffix_fmt: str = "{country}#{j}") -> "PanelDataset":
        """Stack the listed countries (with repetition), giving duplicates fresh ids."""
        pieces = []
        seen: dict[str, int] = {}
        for country in draws:
            j = seen.get(country, 0)
            seen[country] = j + 1
            block = self._frame.iloc[self.country_index[country]].copy()
            block["country"] = suffix_fmt.format(country=country, j=j)
            pieces.append(block)
        return self._derive(pd.concat(pieces, ignore_index=True))


def _opt_int(v) -> int | None:
    return None if v is pd.NA or v is None or (isinstance(v, float) and math.isnan(v)) else int(v)


def _opt_float(v) -> float | None:
    return None if v is pd.NA or v is None or (isinstance(v, float) and math.isnan(v)) else float(v)


def _validate_frame(frame: pd.DataFrame, features: tuple[str, ...], extras: tuple[str, ...]) -> pd.DataFrame:
    required = ["country", "year", "outcome", "adoption_year", *features, *extras]
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise SchemaMismatch(f"missing columns: {missing}")
    overlap = set(features + extras) & set(RESERVED)
    if overlap:
        raise SchemaMismatch(f"feature/extra names collide with reserved columns: {sorted(overlap)}")
    if len(frame) == 0:
        raise InvalidPanel("empty panel")

    f = pd.DataFrame({
        "country": frame["country"].astype(str).to_numpy(),
        "year": frame["year"].astype(np.int64).to_numpy(),
        "outcome": frame["outcome"].astype(float).to_numpy(),
        "adoption_year": pd.array(frame["adoption_year"], dtype="Int64"),
    })
    for name in features:
        f[name] = frame[name].astype(float).to_numpy()
    for name in extras:
        f[name] = frame[name].astype(float).to_numpy()
    if f["outcome"].isna().any():
        raise InvalidPanel("outcome has missing values")

    dup = f.duplicated(["country", "year"], keep="first")
    if dup.any():
        row = f.loc[dup].iloc[0]
        raise DuplicateKey(row["country"], int(row["year"]))
    f = f.sort_values(["country", "year"], kind="mergesort").reset_index(drop=True)

    g = f.groupby("country", sort=False)
    if (g["adoption_year"].nunique(dropna=False) > 1).any():
        raise InvalidPanel("adoption_year varies within a country")
    if features:
        if f[list(features)].isna().any().any():
            raise InvalidPanel("missing feature values")
        if (g[list(features)].nunique() > 1).any().any():
            raise InvalidPanel("features must be constant within a country")
    max_year = int(f["year"].max())
    adopt = f["adoption_year"].dropna()
    if len(adopt) and int(adopt.max()) > max_year:
        raise InvalidPanel(f"adoption year {int(adopt.max())} after the last sample year {max_year}")
    return _annotate(f)


def _annotate(f: pd.DataFrame) -> pd.DataFrame:
    adopt = f["adoption_year"]
    event = pd.array(f["year"].to_numpy(np.int64), dtype="Int64") - adopt
    f = f.copy()
    f["event_time"] = event
    f["treated"] = (event >= 0).fillna(False).astype(bool)
    cols = list(RESERVED) + [c for c in f.columns if c not in RESERVED]
    return f[cols]


def compute_event_time(dataset: PanelDataset) -> PanelDataset:
    """Re-derive ``event_time = year - adoption_year`` (absent for never-treated).

    Idempotent: the result equals the input for any valid dataset.
    """
    f = dataset.frame.drop(columns=["event_time", "treated"])
    return PanelDataset(
        _annotate(f), dataset.feature_names, dataset.extra_names,
        warnings=dataset.warnings, n_dropped=dataset.n_dropped,
    )


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def _parse_number(text: str, kind, row: int, column: str):
    try:
        value = float(text)
    except ValueError:
        raise MalformedCsv(f"row {row}, column {column!r}: cannot parse {text!r}", row, column) from None
    if kind is int:
        if not value.is_integer():
            raise MalformedCsv(f"row {row}, column {column!r}: expected an integer, got {text!r}", row, column)
        return int(value)
    if not math.isfinite(value):
        raise MalformedCsv(f"row {row}, column {column!r}: non-finite value {text!r}", row, column)
    return value


def load_panel(csv_source: bytes | BinaryIO, schema: PanelSchema | None = None) -> PanelDataset:
    """Read a panel from UTF-8 CSV bytes.

    Rows with an empty outcome are dropped and counted.  A feature that
    varies within a country keeps its first non-missing value (by year) and
    a warning is recorded on the dataset.

    Raises
    ------
    SchemaMismatch
        A declared column is absent from the header.
    MalformedCsv
        A cell cannot be parsed; the message names row (1-based, header is
        row 1) and column.
    DuplicateKey
        A ``(country, year)`` pair repeats.
    """
    schema = schema or PanelSchema()
    raw = csv_source if isinstance(csv_source, (bytes, bytearray)) else csv_source.read()
    try:
        text = bytes(raw).decode("utf-8-sig")
    except UnicodeDecodeError as exc:
        raise MalformedCsv(f"input is not valid UTF-8: {exc}") from None
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise MalformedCsv("empty input: header row required") from None

    declared = [schema.country, schema.year, schema.outcome, schema.adoption_year,
                *schema.features, *schema.extra_outcomes]
    absent = [c for c in declared if c not in header]
    if absent:
        raise SchemaMismatch(f"declared columns missing from header: {absent}")
    pos = {name: header.index(name) for name in declared}

    records = []
    seen: set[tuple[str, int]] = set()
    n_dropped = 0
    for lineno, cells in enumerate(reader, start=2):
        if not cells or all(not c.strip() for c in cells):
            continue
        if len(cells) != len(header):
            raise MalformedCsv(f"row {lineno}: expected {len(header)} cells, got {len(cells)}", lineno)
        get = lambda name: cells[pos[name]].strip()  # noqa: E731
        country = get(schema.country)
        if not country:
            raise MalformedCsv(f"row {lineno}, column {schema.country!r}: empty country", lineno, schema.country)
        year = _parse_number(get(schema.year), int, lineno, schema.year)
        key = (country, year)
        if key in seen:
            raise DuplicateKey(country, year)
        seen.add(key)
        out_text = get(schema.outcome)
        if out_text == "":
            n_dropped += 1
            continue
        outcome = _parse_number(out_text, float, lineno, schema.outcome)
        adopt_text = get(schema.adoption_year)
        adoption = None if adopt_text == "" else _parse_number(adopt_text, int, lineno, schema.adoption_year)
        rec = {"country": country, "year": year, "outcome": outcome, "adoption_year": adoption}
        for name in (*schema.features, *schema.extra_outcomes):
            cell = get(name)
            rec[name] = math.nan if cell == "" else _parse_number(cell, float, lineno, name)
        rec["_line"] = lineno
        records.append(rec)

    if not records:
        raise InvalidPanel("no usable rows")
    frame = pd.DataFrame.from_records(records)
    frame["adoption_year"] = pd.array(
        [pd.NA if a is None else a for a in frame["adoption_year"]], dtype="Int64")

    warnings: list[str] = []
    if n_dropped:
        warnings.append(f"dropped {n_dropped} rows with missing outcome")

    adopt_conflict = frame.groupby("country")["adoption_year"].nunique(dropna=False) > 1
    if adopt_conflict.any():
        country = adopt_conflict[adopt_conflict].index[0]
        line = int(frame.loc[frame["country"] == country, "_line"].iloc[0])
        raise MalformedCsv(f"country {country!r} has inconsistent adoption_year", line, schema.adoption_year)

    frame = frame.sort_values(["country", "year"], kind="mergesort")
    for name in schema.features:
        firsts = frame.groupby("country", sort=False)[name].transform("first")
        if firsts.isna().any():
            country = frame.loc[firsts.isna(), "country"].iloc[0]
            raise MalformedCsv(f"country {country!r} has no value for feature {name!r}", None, name)
        conflict = frame[name].notna() & (frame[name] != firsts)
        for country in pd.unique(frame.loc[conflict, "country"]):
            msg = f"feature {name!r} varies within {country}; kept first non-missing value"
            warnings.append(msg)
            logger.warning(msg)
        frame[name] = firsts

    frame = frame.drop(columns="_line")
    for w in warnings:
        logger.info(w)
    return PanelDataset(frame, schema.features, schema.extra_outcomes, warnings, n_dropped)


# ---------------------------------------------------------------------------
# Descriptive tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SummaryTable:
    table: pd.DataFrame
    n_obs: dict[str, int] = field(default_factory=dict)
    n_countries: dict[str, int] = field(default_factory=dict)


def _variables(dataset: PanelDataset) -> list[str]:
    return ["outcome", *dataset.feature_names, *dataset.extra_names]


def summary_stats(dataset: PanelDataset) -> SummaryTable:
    """Mean and sample std (ddof=1) by ever-treated status, plus the full sample.

    Groups are defined at the country level: "treated" is every country with
    an adoption year, "control" every never-treated country.
    """
    f = dataset.frame
    ever = f["adoption_year"].notna().to_numpy()
    groups = {"treated": ever, "control": ~ever, "full": np.ones(len(f), bool)}
    cols = {}
    n_obs, n_countries = {}, {}
    for label, mask in groups.items():
        if not mask.any():
            raise EmptyGroup(f"group {label!r} has no observations")
        sub = f.loc[mask, _variables(dataset)].astype(float)
        cols[(label, "mean")] = sub.mean(skipna=True)
        cols[(label, "std")] = sub.std(ddof=1, skipna=True)
        n_obs[label] = int(mask.sum())
        n_countries[label] = int(f.loc[mask, "country"].nunique())
    table = pd.DataFrame(cols)
    table.columns = pd.MultiIndex.from_tuples(table.columns, names=["group", "stat"])
    return SummaryTable(table, n_obs, n_countries)


def balance_table(
    dataset: PanelDataset, left: Iterable[str], right: Iterable[str], as_of: int
) -> SummaryTable:
    """Cross-sectional means/stds of two country sets in year ``as_of`` and their difference."""
    lo, hi = dataset.year_range
    if not lo <= as_of <= hi:
        raise YearOutOfRange(f"year {as_of} outside panel range {lo}-{hi}")
    f = dataset.frame
    f = f.loc[f["year"] == as_of]
    cols = {}
    n_countries = {}
    for label, members in (("left", set(left)), ("right", set(right))):
        if not members:
            raise EmptyGroup(f"{label} country set is empty")
        sub = f.loc[f["country"].isin(members), _variables(dataset)].astype(float)
        if len(sub) == 0:
            raise EmptyGroup(f"no {label}-group observations in {as_of}")
        cols[(label, "mean")] = sub.mean()
        cols[(label, "std")] = sub.std(ddof=1)
        n_countries[label] = len(sub)
    table = pd.DataFrame(cols)
    table[("diff", "")] = table[("left", "mean")] - table[("right", "mean")]
    table.columns = pd.MultiIndex.from_tuples(table.columns, names=["group", "stat"])
    return SummaryTable(table, dict(n_countries), n_countries)
