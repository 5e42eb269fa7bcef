"""Synthetic staggered-adoption panels with a known effect function.

Outcomes follow

    Y_it = alpha_i + gamma_t + tau(k_it, X_i) * D_it + pretrend_it + lambda_i' f_t + eps_it

so every estimator in the package can be checked against exact ground truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Union

import numpy as np
import pandas as pd

from .errors import InvalidSpec, NoObservationsAtK
from .panel import PanelDataset, parse_key_value

DEFAULT_FEATURES = ("gdp_pc", "trade_open", "invest_share", "human_capital")


@dataclass(frozen=True)
class Constant:
    tau: float

    def __call__(self, k: np.ndarray, x: np.ndarray) -> np.ndarray:
        return np.full(np.shape(k), float(self.tau))


@dataclass(frozen=True)
class TwoGroup:
    """``low`` below the threshold on feature ``feature``, ``high`` at or above it.

    A ``None`` threshold resolves to the median of the treated countries'
    feature values when the panel is generated.
    """

    low: float
    high: float
    threshold: float | None = None
    feature: int = 0

    def __call__(self, k: np.ndarray, x: np.ndarray) -> np.ndarray:
        if self.threshold is None:
            raise InvalidSpec("two_group threshold unresolved")
        x = np.atleast_2d(x)
        return np.where(x[:, self.feature] >= self.threshold, self.high, self.low) * np.ones(np.shape(k))


@dataclass(frozen=True)
class Ramp:
    """Linear ramp-in: ``level * min(1, (k + 1) / (ramp_years + 1))`` for k >= 0."""

    level: float
    ramp_years: int

    def __call__(self, k: np.ndarray, x: np.ndarray) -> np.ndarray:
        k = np.asarray(k, float)
        return self.level * np.minimum(1.0, (k + 1.0) / (self.ramp_years + 1.0))


@dataclass(frozen=True)
class LinearInX:
    intercept: float
    coefs: tuple[float, ...]

    def __call__(self, k: np.ndarray, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if x.shape[1] != len(self.coefs):
            raise InvalidSpec(f"linear_in_x has {len(self.coefs)} coefficients for {x.shape[1]} features")
        return (self.intercept + x @ np.asarray(self.coefs, float)) * np.ones(np.shape(k))


CateKind = Union[Constant, TwoGroup, Ramp, LinearInX]


@dataclass(frozen=True)
class FactorConfounding:
    """Interactive term ``lambda_i' f_t`` whose loadings correlate with treatment.

    Factors are random walks with ``scale``-sized innovations; each loading
    is ``corr * z_i + sqrt(1 - corr^2) * u_i`` where ``z_i`` is the
    standardized ever-treated indicator.
    """

    n_factors: int = 1
    corr: float = 0.8
    scale: float = 0.5


@dataclass(frozen=True)
class DgpSpec:
    n_treated: int = 11
    n_control: int = 24
    year_range: tuple[int, int] = (1970, 2023)
    adoption_schedule: Mapping[str, int] | None = None
    default_adoption_year: int = 1999
    cate: CateKind = Constant(-0.35)
    sigma_alpha: float = 1.0
    sigma_gamma: float = 1.0
    sigma_eps: float = 2.0
    factor_confounding: FactorConfounding | None = None
    pretrend_slope: float = 0.0
    n_features: int = 4
    seed: int = 0

    def treated_ids(self) -> list[str]:
        return [f"T{i + 1:02d}" for i in range(self.n_treated)]

    def control_ids(self) -> list[str]:
        return [f"C{i + 1:02d}" for i in range(self.n_control)]

    def schedule(self) -> dict[str, int]:
        if self.adoption_schedule is None:
            return {c: self.default_adoption_year for c in self.treated_ids()}
        return dict(self.adoption_schedule)

    def feature_names(self) -> tuple[str, ...]:
        if self.n_features == len(DEFAULT_FEATURES):
            return DEFAULT_FEATURES
        return tuple(f"x{j + 1}" for j in range(self.n_features))

    def validate(self) -> None:
        if self.n_treated < 1 or self.n_control < 1:
            raise InvalidSpec("need at least one treated and one control country")
        if self.n_features < 1:
            raise InvalidSpec("need at least one feature")
        start, end = self.year_range
        if end < start:
            raise InvalidSpec(f"year_range {self.year_range} is empty")
        for name in ("sigma_alpha", "sigma_gamma", "sigma_eps"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise InvalidSpec(f"{name} must be a nonnegative real, got {v}")
        sched = self.schedule()
        if set(sched) != set(self.treated_ids()):
            raise InvalidSpec("adoption_schedule must list exactly the treated countries T01..Tnn")
        for c, year in sched.items():
            if not start <= year <= end:
                raise InvalidSpec(f"adoption year {year} of {c} outside {self.year_range}")
        fc = self.factor_confounding
        if fc is not None and (fc.n_factors < 1 or not -1 <= fc.corr <= 1 or fc.scale < 0):
            raise InvalidSpec(f"invalid factor_confounding {fc}")
        if isinstance(self.cate, Ramp) and self.cate.ramp_years < 0:
            raise InvalidSpec("ramp_years must be >= 0")
        if isinstance(self.cate, LinearInX) and len(self.cate.coefs) != self.n_features:
            raise InvalidSpec("linear_in_x needs one coefficient per feature")
        if isinstance(self.cate, TwoGroup) and not 0 <= self.cate.feature < self.n_features:
            raise InvalidSpec("two_group feature index out of range")

    # -- config -------------------------------------------------------------
    @classmethod
    def from_config(cls, text: str) -> "DgpSpec":
        """Build a spec from flat ``key=value`` lines.

        Recognised keys: ``n_treated n_control start_year end_year
        adoption_year cohorts sigma_alpha sigma_gamma sigma_eps
        pretrend_slope n_features seed cate factors``.  ``cate`` is one of
        ``constant:TAU``, ``two_group:LOW,HIGH[,THRESHOLD]``,
        ``ramp:LEVEL,YEARS``, ``linear_in_x:INTERCEPT,C1,...``; ``cohorts``
        is ``YEAR:COUNT,YEAR:COUNT``; ``factors`` is ``N,CORR[,SCALE]``.
        """
        values = parse_key_value(text)
        return spec_from_mapping(values)


def parse_cate(text: str) -> CateKind:
    kind, _, args = text.partition(":")
    try:
        nums = [float(a) for a in args.split(",") if a.strip()]
    except ValueError:
        raise InvalidSpec(f"cannot parse cate {text!r}") from None
    kind = kind.strip()
    if kind == "constant" and len(nums) == 1:
        return Constant(nums[0])
    if kind == "two_group" and len(nums) in (2, 3):
        return TwoGroup(nums[0], nums[1], nums[2] if len(nums) == 3 else None)
    if kind == "ramp" and len(nums) == 2:
        return Ramp(nums[0], int(nums[1]))
    if kind == "linear_in_x" and len(nums) >= 2:
        return LinearInX(nums[0], tuple(nums[1:]))
    raise InvalidSpec(f"cannot parse cate {text!r}")


def cohort_schedule(treated_ids: list[str], cohorts: Mapping[int, int]) -> dict[str, int]:
    """Assign treated countries to adoption cohorts in id order."""
    if sum(cohorts.values()) != len(treated_ids):
        raise InvalidSpec("cohort sizes must sum to n_treated")
    out, it = {}, iter(treated_ids)
    for year in sorted(cohorts):
        for _ in range(cohorts[year]):
            out[next(it)] = int(year)
    return out


def spec_from_mapping(values: Mapping[str, str]) -> DgpSpec:
    values = dict(values)
    kw: dict = {}
    ints = ("n_treated", "n_control", "n_features", "seed")
    floats = ("sigma_alpha", "sigma_gamma", "sigma_eps", "pretrend_slope")
    try:
        for key in ints:
            if key in values:
                kw[key] = int(values.pop(key))
        for key in floats:
            if key in values:
                kw[key] = float(values.pop(key))
        start = int(values.pop("start_year", 1970))
        end = int(values.pop("end_year", 2023))
        kw["year_range"] = (start, end)
        if "adoption_year" in values:
            kw["default_adoption_year"] = int(values.pop("adoption_year"))
        if "cate" in values:
            kw["cate"] = parse_cate(values.pop("cate"))
        if "factors" in values:
            parts = [p for p in values.pop("factors").split(",") if p.strip()]
            kw["factor_confounding"] = FactorConfounding(
                int(parts[0]), float(parts[1]), *(float(p) for p in parts[2:3]))
        cohorts = values.pop("cohorts", None)
    except (ValueError, IndexError) as exc:
        raise InvalidSpec(f"bad DGP config value: {exc}") from None
    if values:
        raise InvalidSpec(f"unknown DGP config keys: {sorted(values)}")
    spec = DgpSpec(**kw)
    if cohorts:
        try:
            pairs = dict((int(a), int(b)) for a, b in (c.split(":") for c in cohorts.split(",")))
        except ValueError:
            raise InvalidSpec(f"cannot parse cohorts {cohorts!r}") from None
        spec = replace(spec, adoption_schedule=cohort_schedule(spec.treated_ids(), pairs))
    spec.validate()
    return spec


@dataclass(frozen=True)
class DgpGroundTruth:
    cate_kind: CateKind
    features: pd.DataFrame                     # one row per country
    alpha: dict[str, float]
    gamma: dict[int, float]
    adoption: dict[str, int]
    true_att_by_k: dict[int, float]
    loadings: np.ndarray | None = None
    factors: np.ndarray | None = None
    _treated_rows: pd.DataFrame = field(default=None, repr=False)  # country, k, cate

    def cate(self, k, x) -> np.ndarray:
        """Evaluate the true effect function at event time(s) ``k`` and features ``x``."""
        return self.cate_kind(np.asarray(k), np.asarray(x, float))

    def to_dict(self) -> dict:
        kind = self.cate_kind
        return {
            "cate": {"kind": type(kind).__name__, **{
                k: (list(v) if isinstance(v, tuple) else v) for k, v in kind.__dict__.items()}},
            "alpha": self.alpha,
            "gamma": {str(t): v for t, v in self.gamma.items()},
            "adoption": self.adoption,
            "features": {c: row.tolist() for c, row in self.features.iterrows()},
            "true_att_by_k": {str(k): v for k, v in self.true_att_by_k.items()},
        }


def generate_panel(spec: DgpSpec) -> tuple[PanelDataset, DgpGroundTruth]:
    """Draw a panel from ``spec``; bit-identical for identical specs.

    Each random component (features, country effects, year effects, factor
    structure, noise) has its own child stream of ``spec.seed``, so the
    features and hence the true effect function never depend on the noise
    scales.
    """
    spec.validate()
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(5)]
    rng_x, rng_alpha, rng_gamma, rng_factor, rng_eps = streams

    countries = spec.treated_ids() + spec.control_ids()
    n = len(countries)
    start, end = spec.year_range
    years = np.arange(start, end + 1)
    T = len(years)
    sched = spec.schedule()

    raw = rng_x.standard_normal((n, spec.n_features))
    sd = raw.std(axis=0)
    x = (raw - raw.mean(axis=0)) / np.where(sd > 0, sd, 1.0)

    cate = spec.cate
    if isinstance(cate, TwoGroup) and cate.threshold is None:
        cate = replace(cate, threshold=float(np.median(x[: spec.n_treated, cate.feature])))

    alpha = spec.sigma_alpha * rng_alpha.standard_normal(n)
    gamma = spec.sigma_gamma * rng_gamma.standard_normal(T)

    ci = np.repeat(np.arange(n), T)
    ti = np.tile(np.arange(T), n)
    year = years[ti]
    adopt = np.array([sched.get(c, -1) for c in countries])[ci]
    ever = adopt >= 0
    k = np.where(ever, year - adopt, 0)
    d = ever & (k >= 0)

    tau = np.zeros(n * T)
    tau[d] = cate(k[d], x[ci[d]])
    pretrend = np.where(ever & (k < 0), spec.pretrend_slope * k, 0.0)

    common = np.zeros(n * T)
    loadings = factors = None
    fc = spec.factor_confounding
    if fc is not None:
        z = ever.reshape(n, T)[:, 0].astype(float)
        z = (z - z.mean()) / (z.std() or 1.0)
        u = rng_factor.standard_normal((n, fc.n_factors))
        loadings = fc.corr * z[:, None] + math.sqrt(1 - fc.corr ** 2) * u
        factors = np.cumsum(fc.scale * rng_factor.standard_normal((T, fc.n_factors)), axis=0)
        common = (loadings @ factors.T)[ci, ti]

    eps = spec.sigma_eps * rng_eps.standard_normal(n * T)
    y = alpha[ci] + gamma[ti] + tau * d + pretrend + common + eps

    names = spec.feature_names()
    frame = pd.DataFrame({
        "country": np.array(countries)[ci],
        "year": year,
        "outcome": y,
        "adoption_year": pd.array([sched.get(countries[i]) for i in ci], dtype="Int64"),
    })
    for j, name in enumerate(names):
        frame[name] = x[ci, j]
    dataset = PanelDataset(frame, names)

    rows = pd.DataFrame({"country": np.array(countries)[ci[d]], "k": k[d], "cate": tau[d]})
    att = rows.groupby("k")["cate"].mean()
    truth = DgpGroundTruth(
        cate_kind=cate,
        features=pd.DataFrame(x, index=countries, columns=names),
        alpha=dict(zip(countries, alpha.tolist())),
        gamma=dict(zip(years.tolist(), gamma.tolist())),
        adoption=sched,
        true_att_by_k={int(kk): float(v) for kk, v in att.items()},
        loadings=loadings,
        factors=factors,
        _treated_rows=rows,
    )
    return dataset, truth


def true_att(ground_truth: DgpGroundTruth, k: int) -> float:
    """Exact average of the true effect over generated treated rows at event time ``k``."""
    if k not in ground_truth.true_att_by_k:
        raise NoObservationsAtK(f"no treated rows at event time {k}")
    return ground_truth.true_att_by_k[k]
