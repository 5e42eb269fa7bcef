"""Aggregate forest predictions into effect curves.

Effects are in percentage points of annual growth.  Horizons run over
post-adoption event times ``k >= 0``; pre-adoption rows carry ``D = 0``
and act as comparisons inside the forest, so the forest has no
pre-period effect to report.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import (DimensionMismatch, EmptyGroup, EmptyHorizon, GapInSupport,
                     SingleCluster, TooFewTrees)
from .forest import ForestModel, forest_variance, functional_variance
from .inference import cluster_robust_var
from .panel import PanelDataset


@dataclass(frozen=True)
class AttPoint:
    att: float
    se: float
    n_k: int
    forest_se: float = math.nan
    extrapolative: bool = False


@dataclass
class AttCurve:
    by_k: dict[int, AttPoint]
    k_range: tuple[int, int]
    label: str = "att"

    def __post_init__(self):
        bad = [k for k, p in self.by_k.items() if p.n_k < 1]
        if bad:
            raise ValueError(f"horizons without observations: {bad}")

    @property
    def ks(self) -> list[int]:
        return sorted(self.by_k)

    def att(self) -> np.ndarray:
        return np.array([self.by_k[k].att for k in self.ks])

    def se(self) -> np.ndarray:
        return np.array([self.by_k[k].se for k in self.ks])

    def to_frame(self) -> pd.DataFrame:
        rows = [(k, p.att, p.se, p.n_k, p.forest_se, p.extrapolative) for k, p in sorted(self.by_k.items())]
        return pd.DataFrame(rows, columns=["k", "att", "se", "n_k", "forest_se", "extrapolative"])


def _post_rows(model: ForestModel, dataset: PanelDataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(event time, query matrix, country code) for every treated post-adoption row."""
    if model.n_features != len(dataset.feature_names) + 1:
        raise DimensionMismatch(
            f"model has {model.n_features - 1} features, dataset has {len(dataset.feature_names)}")
    k = np.full(len(dataset), np.nan)
    k[dataset.event_time_mask] = dataset.event_time_values()
    sel = dataset.d == 1
    q = np.column_stack([k, dataset.x])[sel]
    return k[sel].astype(np.int64), q, dataset.country_codes[sel]


def _curve_from_rows(model: ForestModel, ks: np.ndarray, q: np.ndarray, codes: np.ndarray,
                     label: str, horizons: Iterable[int] | None, with_forest_se: bool) -> AttCurve:
    preds = model.predict(q) if len(q) else np.empty(0)
    wanted = sorted(set(int(v) for v in ks)) if horizons is None else sorted(set(horizons))
    by_k = {}
    for h in wanted:
        m = ks == h
        if not m.any():
            continue   # unsupported horizons are omitted, not zero-filled
        try:
            se = math.sqrt(cluster_robust_var(preds[m], codes[m]))
        except SingleCluster:
            se = math.nan
        fse = math.nan
        if with_forest_se:
            try:
                fse = math.sqrt(functional_variance(model, q[m]))
            except TooFewTrees:
                pass
        by_k[h] = AttPoint(float(preds[m].mean()), se, int(m.sum()), fse)
    if not by_k:
        raise EmptyHorizon(f"no treated rows at the requested horizons for {label!r}")
    return AttCurve(by_k, (min(by_k), max(by_k)), label)


def dynamic_att(model: ForestModel, dataset: PanelDataset, horizons: Iterable[int] | None = None,
                with_forest_se: bool = True) -> AttCurve:
    """Average predicted effect over the treated rows at each event time.

    ``se`` is the within-country clustered dispersion of the predictions
    (:func:`cluster_robust_var`); ``forest_se`` is the forest's own
    half-sample variance of the horizon average.
    """
    ks, q, codes = _post_rows(model, dataset)
    return _curve_from_rows(model, ks, q, codes, "att", horizons, with_forest_se)


def median_split(dataset: PanelDataset, feature: str) -> Callable[[pd.Series], bool]:
    """Grouping predicate: treated-country median of ``feature`` (``>=`` is ``True``)."""
    feats = dataset.country_features
    cut = float(feats.loc[list(dataset.treated_countries), feature].median())
    return lambda row: bool(row[feature] >= cut)


def group_att(model: ForestModel, dataset: PanelDataset, grouping: Callable[[pd.Series], Hashable],
              labels: Sequence[Hashable] | None = None, with_forest_se: bool = True) -> dict:
    """One effect curve per group of treated countries.

    ``grouping`` sees only a country's pre-treatment feature row, so group
    membership cannot depend on anything measured after adoption.  With
    a boolean grouping both ``True`` and ``False`` groups must be non-empty
    unless ``labels`` says otherwise.
    """
    feats = dataset.country_features
    member = {c: grouping(feats.loc[c].copy()) for c in dataset.treated_countries}
    found = list(dict.fromkeys(member.values()))
    if labels is None:
        labels = [True, False] if all(isinstance(v, (bool, np.bool_)) for v in found) else found
    ks, q, codes = _post_rows(model, dataset)
    countries = np.array(dataset.countries)[codes]
    out = {}
    for lab in labels:
        names = [c for c, g in member.items() if g == lab]
        if not names:
            raise EmptyGroup(f"group {lab!r} has no treated countries")
        m = np.isin(countries, names)
        out[lab] = _curve_from_rows(model, ks[m], q[m], codes[m], str(lab), None, with_forest_se)
    return out


@dataclass(frozen=True)
class CumulativePoint:
    simple_sum: float          # pp
    compounded: float          # percent of the level
    ci_low: float              # compounded
    ci_high: float
    simple_ci_low: float
    simple_ci_high: float


@dataclass
class CumulativeEffects:
    by_horizon: dict[int, CumulativePoint]

    def to_frame(self) -> pd.DataFrame:
        rows = [(h, p.simple_sum, p.simple_ci_low, p.simple_ci_high, p.compounded, p.ci_low, p.ci_high)
                for h, p in sorted(self.by_horizon.items())]
        return pd.DataFrame(rows, columns=["horizon", "simple_sum", "simple_ci_low", "simple_ci_high",
                                           "compounded", "ci_low", "ci_high"])


def cumulative_effects(curve: AttCurve, horizons: Iterable[int] | None = None,
                       z: float = 1.959963984540054) -> CumulativeEffects:
    """Simple and compounded cumulative effects from ``k = 0`` up to each horizon.

    ``compounded = (prod(1 + att_k / 100) - 1) * 100``.  Intervals use the
    delta method with a diagonal covariance built from the curve's ``se``.
    """
    support = curve.ks
    if 0 not in curve.by_k:
        raise GapInSupport("curve has no k = 0 estimate")
    contiguous = 0
    while contiguous + 1 in curve.by_k:
        contiguous += 1
    wanted = list(range(0, contiguous + 1)) if horizons is None else sorted(set(horizons))
    for h in wanted:
        if h < 0 or h > contiguous:
            missing = next(k for k in range(0, h + 1) if k not in curve.by_k) if h >= 0 else h
            raise GapInSupport(f"horizon {h} needs k = 0..{h}; k = {missing} is missing "
                               f"(support: {support})")
    att = np.array([curve.by_k[k].att for k in range(contiguous + 1)])
    se = np.array([curve.by_k[k].se for k in range(contiguous + 1)])
    out = {}
    for h in wanted:
        a, s = att[: h + 1], se[: h + 1]
        growth = 1.0 + a / 100.0
        level = float(np.prod(growth))
        compounded = (level - 1.0) * 100.0
        # d compounded / d att_k = prod_{j != k} growth_j
        grad = level / growth
        c_se = float(np.sqrt(np.sum((grad * s) ** 2)))
        s_sum = float(a.sum())
        s_se = float(np.sqrt(np.sum(s ** 2)))
        out[h] = CumulativePoint(s_sum, compounded, compounded - z * c_se, compounded + z * c_se,
                                 s_sum - z * s_se, s_sum + z * s_se)
    return CumulativeEffects(out)


@dataclass
class CountryTrajectory:
    country: str
    curve: AttCurve
    post_average: float


def country_trajectories(model: ForestModel, dataset: PanelDataset,
                         with_forest_se: bool = True) -> dict[str, CountryTrajectory]:
    """Per treated country, the predicted effect at each of its observed post horizons."""
    ks, q, codes = _post_rows(model, dataset)
    preds = model.predict(q)
    out = {}
    for code, country in enumerate(dataset.countries):
        m = codes == code
        if not m.any():
            continue
        by_k = {}
        for kk, pred, query in zip(ks[m], preds[m], q[m]):
            fse = math.nan
            if with_forest_se:
                try:
                    fse = math.sqrt(forest_variance(model, int(kk), query[1:]))
                except TooFewTrees:
                    pass
            by_k[int(kk)] = AttPoint(float(pred), fse, 1, fse)
        curve = AttCurve(by_k, (min(by_k), max(by_k)), country)
        out[country] = CountryTrajectory(country, curve, float(preds[m].mean()))
    return out


def counterfactual_predict(model: ForestModel, x_profile: Sequence[float],
                           k_range: tuple[int, int] = (0, 20)) -> AttCurve:
    """Predicted effect path for a hypothetical adopter with features ``x_profile``.

    Horizons outside the event times seen among treated training rows are
    still predicted but flagged ``extrapolative``.
    """
    x = np.asarray(x_profile, float).ravel()
    if len(x) != model.n_features - 1:
        raise DimensionMismatch(f"profile has {len(x)} features, model expects {model.n_features - 1}")
    lo, hi = model.k_support
    by_k = {}
    for k in range(k_range[0], k_range[1] + 1):
        query = np.concatenate([[k], x])[None, :]
        pred = float(model.predict(query)[0])
        try:
            se = math.sqrt(forest_variance(model, k, x))
        except TooFewTrees:
            se = math.nan
        by_k[k] = AttPoint(pred, se, 1, se, not lo <= k <= hi)
    return AttCurve(by_k, k_range, "counterfactual (extrapolative)")
