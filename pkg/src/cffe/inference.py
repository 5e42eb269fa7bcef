"""Uncertainty and identification diagnostics.

Country-level resampling is used throughout: a bootstrap replicate draws
whole country time series with replacement, and every replicate's random
stream is keyed by ``(seed, replicate index)`` so results do not depend on
how replicates are scheduled across threads.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import pandas as pd
from scipy import stats

from .errors import (AssignedCountryIsTreated, CffeError, FakeDateTooLate, InvalidPanel,
                     InvalidSpec, NoPrePeriods, SingleCluster, TooFewTreated,
                     TooFewValidReplicates)
from .estimators import (EventStudyResult, callaway_santanna, critical_value, interactive_fe,
                         sun_abraham, twfe_did, twfe_event_study)
from .forest import ForestConfig, fit_forest, functional_variance
from .panel import PanelDataset

logger = logging.getLogger(__name__)


def replicate_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def draw_clusters(n_clusters: int, n_boot: int, seed: int) -> list[np.ndarray]:
    """Index draws (with replacement) of ``n_clusters`` clusters for each replicate."""
    return [replicate_rng(seed, b).integers(0, n_clusters, n_clusters) for b in range(n_boot)]


def cluster_robust_var(cates, countries) -> float:
    """Variance of the mean effect at one horizon from within-country deviation sums.

    ``Var = (1/N^2) * sum_i (sum_t (tau_it - tau_bar))^2`` where ``tau_bar``
    is the mean over all ``N`` rows and ``i`` runs over countries.
    """
    cates = np.asarray(cates, float)
    countries = np.asarray(countries)
    if len(cates) != len(countries):
        raise ValueError("cates and countries differ in length")
    _, codes = np.unique(countries, return_inverse=True)
    if codes.max(initial=-1) < 1:
        raise SingleCluster("at least two countries must contribute")
    dev = cates - cates.mean()
    sums = np.bincount(codes, weights=dev)
    return float(np.sum(sums ** 2) / len(cates) ** 2)


# ---------------------------------------------------------------------------
# Estimator registry for resampling designs
# ---------------------------------------------------------------------------

def _curve(result: EventStudyResult) -> pd.Series:
    return pd.Series({k: e.estimate for k, e in result.by_k.items()}, dtype=float)


def _cffe_curve(ds: PanelDataset, config: ForestConfig | None = None, n_jobs: int = 1) -> pd.Series:
    from .effects import dynamic_att
    model = fit_forest(ds, config, n_jobs=n_jobs)
    curve = dynamic_att(model, ds, with_forest_se=False)
    return pd.Series({k: p.att for k, p in curve.by_k.items()}, dtype=float)


ESTIMATORS: dict[str, Callable[..., pd.Series]] = {
    "cffe": _cffe_curve,
    "twfe": lambda ds, k_range=(-10, 20): _curve(twfe_event_study(ds, k_range)),
    "sa": lambda ds, k_range=(-10, 20): _curve(sun_abraham(ds, k_range)),
    "cs": lambda ds, k_range=(-10, 20): _curve(callaway_santanna(ds, k_range, n_boot=0).event_study),
    "ife": lambda ds, n_factors=2: pd.Series({"tau": interactive_fe(ds, n_factors).tau_hat}),
}


def _estimator(name: str) -> Callable[..., pd.Series]:
    try:
        return ESTIMATORS[name]
    except KeyError:
        raise InvalidSpec(f"unknown estimator {name!r}; choose from {sorted(ESTIMATORS)}") from None


@dataclass
class BootstrapResult:
    estimates: pd.DataFrame              # valid replicates x labels
    point: pd.Series
    ci_by_k: dict                        # label -> (low, high)
    n_replicates: int
    n_failed: int
    seed: int
    estimator: str
    failures: list[tuple[int, str]] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        rows = [(k, self.point.get(k, np.nan), lo, hi, hi - lo, int(self.estimates[k].notna().sum()))
                for k, (lo, hi) in self.ci_by_k.items()]
        return pd.DataFrame(rows, columns=["k", "estimate", "ci_low", "ci_high", "width", "n_valid"])


def block_bootstrap(dataset: PanelDataset, estimator: str = "cffe", B: int = 200, seed: int = 0,
                    n_jobs: int = 1, **options) -> BootstrapResult:
    """Country-block bootstrap with percentile intervals.

    Replicates that draw no treated or no never-treated country, or whose
    estimator raises, are discarded and counted (never redrawn).
    """
    if B < 50:
        raise InvalidSpec(f"B must be >= 50, got {B}")
    fn = _estimator(estimator)
    countries = dataset.countries
    treated = set(dataset.treated_countries)
    point = fn(dataset, **options)

    def one(b: int):
        draw = [countries[i] for i in replicate_rng(seed, b).integers(0, len(countries), len(countries))]
        n_t = sum(c in treated for c in draw)
        if n_t == 0 or n_t == len(draw):
            return None, "no treated or no control country drawn"
        try:
            return fn(dataset.relabel_countries(draw), **options), None
        except (CffeError, np.linalg.LinAlgError) as exc:
            return None, f"{type(exc).__name__}: {exc}"

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            outcomes = list(pool.map(one, range(B)))
    else:
        outcomes = [one(b) for b in range(B)]
    reps = {b: s for b, (s, _) in enumerate(outcomes) if s is not None}
    failures = [(b, why) for b, (s, why) in enumerate(outcomes) if s is None]
    if len(reps) < 0.8 * B:
        raise TooFewValidReplicates(f"only {len(reps)} of {B} replicates succeeded")
    est = pd.DataFrame.from_dict(reps, orient="index").sort_index()
    est = est.reindex(columns=sorted(est.columns))
    ci = {}
    for k in est.columns:
        v = est[k].dropna().to_numpy()
        ci[k] = (float(np.quantile(v, 0.025)), float(np.quantile(v, 0.975))) if len(v) else (np.nan, np.nan)
    return BootstrapResult(est, point, ci, B, len(failures), seed, estimator, failures)


# ---------------------------------------------------------------------------
# Pre-trends
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PretrendsTest:
    wald_stat: float
    f_stat: float
    p_value: float
    df_num: int
    df_den: int
    avg_pre_effect: float
    avg_pre_se: float
    pseudo_inverse: bool = False


def pretrends_test(result: EventStudyResult) -> PretrendsTest:
    """Joint Wald/F test that every pre-period coefficient is zero.

    The F statistic uses ``G - 1`` denominator degrees of freedom.  A
    singular covariance block falls back to the pseudo-inverse, flagged in
    the output.
    """
    ks = result.ks
    pre = [i for i, k in enumerate(ks) if k < result.reference_k]
    if not pre:
        raise NoPrePeriods("no pre-period coefficients")
    if result.vcov is None:
        raise NoPrePeriods("result carries no covariance matrix")
    b = result.estimates[pre]
    V = np.asarray(result.vcov)[np.ix_(pre, pre)]
    q = len(pre)
    pinv = False
    try:
        if np.linalg.cond(V) > 1e12:
            raise np.linalg.LinAlgError
        wald = float(b @ np.linalg.solve(V, b))
    except np.linalg.LinAlgError:
        wald = float(b @ np.linalg.pinv(V) @ b)
        pinv = True
        logger.warning("pre-period covariance is singular; using the pseudo-inverse")
    df_den = max(result.n_clusters - 1, 1)
    f = wald / q
    p = float(stats.f.sf(f, q, df_den)) if f > 0 else 1.0
    w = np.full(q, 1.0 / q)
    return PretrendsTest(wald, f, min(max(p, 0.0), 1.0), q, df_den, float(w @ b),
                         float(np.sqrt(max(w @ V @ w, 0.0))), pinv)


# ---------------------------------------------------------------------------
# Placebos and leave-one-out
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlaceboResult:
    ate: float
    std_error: float
    p_value: float
    fake_year: int
    n_clusters: int
    estimator: str
    event_study: EventStudyResult | None = None


def _cffe_ate(ds: PanelDataset, config: ForestConfig | None, n_jobs: int = 1) -> tuple[float, float]:
    model = fit_forest(ds, config, n_jobs=n_jobs)
    q = _treated_queries(ds)
    ate = float(model.predict(q).mean())
    return ate, float(np.sqrt(functional_variance(model, q)))


def _treated_queries(ds: PanelDataset, rows: np.ndarray | None = None) -> np.ndarray:
    k = np.full(len(ds), np.nan)
    k[ds.event_time_mask] = ds.event_time_values()
    sel = ds.d == 1 if rows is None else rows
    return np.column_stack([k, ds.x])[sel]


def placebo_fake_dates(dataset: PanelDataset, fake_adoption_year: int, estimator: str = "twfe",
                       config: ForestConfig | None = None, n_jobs: int = 1) -> PlaceboResult:
    """Re-date every treated country to ``fake_adoption_year``.

    Rows from the true adoption year onward are removed, so only the
    fake-to-actual window counts as treated.  ``estimator`` is ``"twfe"``
    (pooled DiD, t test with ``G - 1`` df) or ``"cffe"`` (forest ATT with
    forest variance, normal test).
    """
    adoption = {c: a for c, a in dataset.adoption_years.items() if a is not None}
    if not adoption:
        raise TooFewTreated("no treated countries to re-date")
    too_late = [c for c, a in adoption.items() if fake_adoption_year >= a]
    if too_late:
        raise FakeDateTooLate(f"fake year {fake_adoption_year} is not before the adoption of {too_late}")
    if fake_adoption_year <= dataset.year_range[0]:
        raise InvalidSpec(f"fake year {fake_adoption_year} leaves no pre-period")
    frame = dataset.frame
    actual = frame["country"].map(adoption)
    post_actual = actual.notna() & (frame["year"] >= actual.fillna(np.inf))
    placebo = dataset.subset_rows(~post_actual.to_numpy()).with_adoption(
        {c: fake_adoption_year for c in adoption})
    if estimator == "twfe":
        did = twfe_did(placebo)
        try:
            es = twfe_event_study(placebo, (-10, max(adoption.values()) - fake_adoption_year))
        except CffeError:
            es = None
        return PlaceboResult(did.estimate, did.std_error, did.p_value, fake_adoption_year,
                             did.n_clusters, "twfe", es)
    if estimator == "cffe":
        ate, se = _cffe_ate(placebo, config, n_jobs)
        p = float(2 * stats.norm.sf(abs(ate / se))) if se > 0 else float(ate == 0)
        return PlaceboResult(ate, se, p, fake_adoption_year, placebo.n_countries, "cffe")
    raise InvalidSpec(f"placebo estimator must be 'twfe' or 'cffe', got {estimator!r}")


@dataclass
class NontreatedPlacebo:
    table: pd.DataFrame          # country, pseudo_year, effect, se, p_value
    joint_stat: float
    joint_df: int
    joint_p: float
    covariance: str = "diagonal"


def placebo_nontreated(dataset: PanelDataset, assignment: Mapping[str, int],
                       config: ForestConfig | None = None, n_jobs: int = 1) -> NontreatedPlacebo:
    """Pseudo-treat never-treated countries and re-fit the forest on controls only.

    Per-country effects average the forest predictions over each pseudo
    adopter's post rows; their SEs come from the forest variance.  The joint
    test stacks the z statistics under a diagonal covariance.
    """
    if not assignment:
        raise InvalidSpec("placebo assignment is empty")
    adoption = dataset.adoption_years
    for c in assignment:
        if c not in adoption:
            raise InvalidPanel(f"unknown country {c!r}")
        if adoption[c] is not None:
            raise AssignedCountryIsTreated(f"{c} is treated in the data (adopts {adoption[c]})")
    controls = dataset.drop_countries(dataset.treated_countries).with_adoption(dict(assignment))
    model = fit_forest(controls, config, n_jobs=n_jobs)
    frame = controls.frame
    rows = []
    for c, year in assignment.items():
        sel = (frame["country"] == c).to_numpy() & (controls.d == 1)
        q = _treated_queries(controls, sel)
        if len(q) == 0:
            raise InvalidSpec(f"{c} has no rows on or after pseudo adoption {year}")
        effect = float(model.predict(q).mean())
        se = float(np.sqrt(functional_variance(model, q)))
        z = effect / se if se > 0 else np.nan
        rows.append((c, int(year), effect, se, float(2 * stats.norm.sf(abs(z)))))
    table = pd.DataFrame(rows, columns=["country", "pseudo_year", "effect", "se", "p_value"])
    z2 = (table["effect"] / table["se"]) ** 2
    stat = float(z2.sum())
    return NontreatedPlacebo(table, stat, len(table), float(stats.chi2.sf(stat, len(table))))


@dataclass
class LooResult:
    full_ate: float
    full_se: float
    full_ci: tuple[float, float]
    table: pd.DataFrame          # dropped, ate, se, ci_low, ci_high, within_full_ci
    estimator: str


def overall_att(result: EventStudyResult) -> tuple[float, float]:
    """Observation-weighted mean of the post-period coefficients and its SE."""
    post = [i for i, k in enumerate(result.ks) if k >= 0]
    if not post:
        raise InvalidSpec("no post-period coefficients")
    n = np.array([result.by_k[result.ks[i]].n_treated_obs for i in post], float)
    w = n / n.sum()
    b = result.estimates[post]
    V = np.asarray(result.vcov)[np.ix_(post, post)]
    return float(w @ b), float(np.sqrt(max(w @ V @ w, 0.0)))


def ate_with_se(dataset: PanelDataset, estimator: str = "twfe", config: ForestConfig | None = None,
                n_jobs: int = 1) -> tuple[float, float]:
    if estimator == "twfe":
        did = twfe_did(dataset)
        return did.estimate, did.std_error
    if estimator == "sa":
        return overall_att(sun_abraham(dataset))
    if estimator == "cs":
        return overall_att(callaway_santanna(dataset).event_study)
    if estimator == "cffe":
        return _cffe_ate(dataset, config, n_jobs)
    raise InvalidSpec(f"unsupported estimator {estimator!r} for an overall ATE")


def leave_one_out(dataset: PanelDataset, estimator: str = "twfe", config: ForestConfig | None = None,
                  n_jobs: int = 1) -> LooResult:
    """Re-estimate the overall ATE dropping each treated country in turn."""
    treated = dataset.treated_countries
    if len(treated) < 3:
        raise TooFewTreated(f"leave-one-out needs >= 3 treated countries, got {len(treated)}")
    crit = critical_value(dataset.n_countries)
    ate, se = ate_with_se(dataset, estimator, config, n_jobs)
    lo, hi = ate - crit * se, ate + crit * se
    rows = []
    for c in treated:
        sub = dataset.drop_countries([c])
        a, s = ate_with_se(sub, estimator, config, n_jobs)
        cr = critical_value(sub.n_countries)
        rows.append((c, a, s, a - cr * s, a + cr * s, bool(lo <= a <= hi)))
    table = pd.DataFrame(rows, columns=["dropped", "ate", "se", "ci_low", "ci_high", "within_full_ci"])
    return LooResult(ate, se, (lo, hi), table, estimator)
