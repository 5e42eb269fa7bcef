"""Comparison estimators: TWFE event study, Sun-Abraham, Callaway-Sant'Anna, interactive FE.

All regressions with country and year effects are solved by the within
transformation (Frisch-Waugh): the outcome and the regressors of interest
are residualized on both sets of indicators, then regressed on each other.
Standard errors are cluster-robust by country with the usual small-sample
factor ``G/(G-1) * (n-1)/(n-K)``, where ``K`` counts every estimated
parameter, absorbed effects included.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from .errors import (InvalidSpec, NonConvergence, NoNeverTreated, NoPrePeriod,
                     RankDeficient, TooFewClusters, WindowTooSparse)
from .forest import twoway_residuals
from .panel import PanelDataset

logger = logging.getLogger(__name__)

DEFAULT_K_RANGE = (-10, 20)
REFERENCE_K = -1


@dataclass(frozen=True)
class KEstimate:
    estimate: float
    std_error: float
    ci_low: float
    ci_high: float
    n_treated_obs: int


@dataclass
class EventStudyResult:
    by_k: dict[int, KEstimate]
    reference_k: int
    estimator_name: str
    vcov: np.ndarray | None = None       # rows/cols follow ``ks``
    n_clusters: int = 0
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        if self.reference_k in self.by_k:
            raise ValueError("reference period cannot carry an estimate")

    @property
    def ks(self) -> list[int]:
        return sorted(self.by_k)

    @property
    def estimates(self) -> np.ndarray:
        return np.array([self.by_k[k].estimate for k in self.ks])

    @property
    def std_errors(self) -> np.ndarray:
        return np.array([self.by_k[k].std_error for k in self.ks])

    def to_frame(self) -> pd.DataFrame:
        rows = [(k, e.estimate, e.std_error, e.ci_low, e.ci_high, e.n_treated_obs)
                for k, e in sorted(self.by_k.items())]
        return pd.DataFrame(rows, columns=["k", "estimate", "se", "ci_low", "ci_high", "n"])

    def to_json(self) -> str:
        doc = {
            "estimator": self.estimator_name,
            "reference_k": self.reference_k,
            "n_clusters": self.n_clusters,
            "ks": self.ks,
            "by_k": {str(k): vars(e) for k, e in sorted(self.by_k.items())},
            "vcov": None if self.vcov is None else np.asarray(self.vcov).tolist(),
            "notes": list(self.notes),
        }
        return json.dumps(doc, sort_keys=True)


def critical_value(n_clusters: int, level: float = 0.95) -> float:
    """Two-sided t critical value with ``G - 1`` degrees of freedom."""
    return float(stats.t.ppf(0.5 + level / 2, max(n_clusters - 1, 1)))


def _build_result(name: str, ks, beta, vcov, n_obs, G, notes=()) -> EventStudyResult:
    se = np.sqrt(np.clip(np.diag(vcov), 0, None))
    crit = critical_value(G)
    by_k = {int(k): KEstimate(float(b), float(s), float(b - crit * s), float(b + crit * s), int(n))
            for k, b, s, n in zip(ks, beta, se, n_obs)}
    return EventStudyResult(by_k, REFERENCE_K, name, np.asarray(vcov), G, tuple(notes))


# ---------------------------------------------------------------------------
# Within-transformed OLS with country clusters
# ---------------------------------------------------------------------------

@dataclass
class FeOls:
    beta: np.ndarray
    vcov: np.ndarray
    resid: np.ndarray
    n_obs: int
    n_params: int
    n_clusters: int


def _collinear_columns(Xt: np.ndarray, X: np.ndarray, names: list) -> list:
    """Columns that are (numerically) spanned by the fixed effects and earlier columns."""
    bad, kept = [], []
    for j in range(Xt.shape[1]):
        scale = max(np.linalg.norm(X[:, j]), 1e-300)
        v = Xt[:, j]
        if kept:
            Q = np.linalg.qr(Xt[:, kept])[0]
            v = v - Q @ (Q.T @ v)
        if np.linalg.norm(v) <= 1e-9 * scale:
            bad.append(names[j])
        else:
            kept.append(j)
    return bad


def fe_ols(y: np.ndarray, X: np.ndarray, country: np.ndarray, year: np.ndarray,
           names: list | None = None) -> FeOls:
    """OLS of ``y`` on ``X`` plus country and year effects, clustered by country."""
    X = np.asarray(X, float).reshape(len(y), -1)
    names = list(names) if names is not None else list(range(X.shape[1]))
    G = len(np.unique(country))
    if G < 2:
        raise TooFewClusters(f"need at least 2 country clusters, got {G}")
    Zt, _ = twoway_residuals(np.column_stack([y, X]), country, year)
    yt, Xt = Zt[:, 0], Zt[:, 1:]
    bad = _collinear_columns(Xt, X, names)
    if bad:
        raise RankDeficient(f"collinear regressors: {bad}", bad)
    XtX = Xt.T @ Xt
    bread = np.linalg.inv(XtX)
    beta = bread @ (Xt.T @ yt)
    resid = yt - Xt @ beta
    n = len(y)
    K = X.shape[1] + G + len(np.unique(year)) - 1
    if n <= K:
        raise RankDeficient(f"{n} observations cannot identify {K} parameters", [])
    _, cl = np.unique(country, return_inverse=True)
    scores = np.zeros((G, X.shape[1]))
    np.add.at(scores, cl, Xt * resid[:, None])
    meat = scores.T @ scores
    adj = G / (G - 1) * (n - 1) / (n - K)
    vcov = adj * bread @ meat @ bread
    return FeOls(beta, vcov, resid, n, K, G)


def _check_groups(dataset: PanelDataset) -> None:
    nt, nc = len(dataset.treated_countries), len(dataset.control_countries)
    if dataset.n_countries < 2:
        raise TooFewClusters(f"need at least 2 countries, got {dataset.n_countries}")
    if nt < 2 or nc < 2:
        raise TooFewClusters(f"need >= 2 treated and >= 2 control countries (got {nt} and {nc})")


def _event_times(dataset: PanelDataset) -> np.ndarray:
    k = np.full(len(dataset), np.nan)
    k[dataset.event_time_mask] = dataset.event_time_values()
    return k


def _window_mask(k: np.ndarray, k_range: tuple[int, int]) -> np.ndarray:
    lo, hi = k_range
    if lo > hi:
        raise InvalidSpec(f"empty event-time range {k_range}")
    return np.isnan(k) | ((k >= lo) & (k <= hi))


# ---------------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------------

def twfe_event_study(dataset: PanelDataset, k_range: tuple[int, int] = DEFAULT_K_RANGE) -> EventStudyResult:
    """Dynamic TWFE regression with event-time dummies, ``k = -1`` omitted.

    Rows of treated countries outside ``k_range`` are dropped rather than
    binned.  Never-treated rows carry no event-time dummy.
    """
    _check_groups(dataset)
    k_all = _event_times(dataset)
    keep = _window_mask(k_all, k_range)
    k = k_all[keep]
    ks = sorted({int(v) for v in k[~np.isnan(k)]} - {REFERENCE_K})
    if not ks:
        raise RankDeficient("no event-time dummies with support in the window", [])
    X = np.column_stack([(k == kk).astype(float) for kk in ks])
    fit = fe_ols(dataset.y[keep], X, dataset.country_codes[keep], dataset.year_codes[keep],
                 names=[f"k={kk}" for kk in ks])
    return _build_result("twfe", ks, fit.beta, fit.vcov, X.sum(axis=0), fit.n_clusters)


def sun_abraham(dataset: PanelDataset, k_range: tuple[int, int] = DEFAULT_K_RANGE) -> EventStudyResult:
    """Interaction-weighted event study.

    Cohort-by-event-time dummies are estimated jointly against never-treated
    controls, then averaged within each ``k`` with weights equal to each
    cohort's share of the treated observations at ``k``.  The covariance of
    the aggregates follows by the delta method (it is linear).
    """
    if not dataset.control_countries:
        raise NoNeverTreated("Sun-Abraham needs never-treated countries")
    _check_groups(dataset)
    k_all = _event_times(dataset)
    keep = _window_mask(k_all, k_range)
    k = k_all[keep]
    adoption = dataset.frame["adoption_year"].to_numpy(dtype=float, na_value=np.nan)[keep]
    has_k = ~np.isnan(k)
    cells = sorted({(int(a), int(kk)) for a, kk in zip(adoption[has_k], k[has_k]) if kk != REFERENCE_K})
    if not cells:
        raise RankDeficient("no cohort-by-event-time cells with support", [])
    X = np.column_stack([((adoption == g) & (k == kk)).astype(float) for g, kk in cells])
    fit = fe_ols(dataset.y[keep], X, dataset.country_codes[keep], dataset.year_codes[keep],
                 names=[f"g={g},k={kk}" for g, kk in cells])
    counts = X.sum(axis=0)
    ks = sorted({kk for _, kk in cells})
    W = np.zeros((len(ks), len(cells)))
    for j, (_, kk) in enumerate(cells):
        W[ks.index(kk), j] = counts[j]
    n_k = W.sum(axis=1)
    W /= n_k[:, None]
    return _build_result("sa", ks, W @ fit.beta, W @ fit.vcov @ W.T, n_k, fit.n_clusters)


@dataclass
class CsResult:
    att_gt: pd.DataFrame          # cohort, year, event_time, att, n_cohort
    event_study: EventStudyResult
    n_boot: int
    n_failed: int


def _outcome_matrix(dataset: PanelDataset) -> tuple[np.ndarray, np.ndarray]:
    n_years = dataset.year_range[1] - dataset.year_range[0] + 1
    Y = np.full((dataset.n_countries, n_years), np.nan)
    Y[dataset.country_codes, dataset.year_codes] = dataset.y
    return Y, np.arange(dataset.year_range[0], dataset.year_range[1] + 1)


def _cs_core(Y: np.ndarray, cohort: np.ndarray, years: np.ndarray, cohorts: list[int],
             k_lo: int, k_hi: int):
    """Group-time effects and their cohort-size-weighted event-time aggregation.

    ``cohort`` holds each row's adoption year, 0 for never-treated rows.
    Returns ``(att_gt dict, ks, theta)``.
    """
    ctrl = cohort == 0
    att = {}
    for g in cohorts:
        members = cohort == g
        base = int(g - 1 - years[0])
        if not members.any() or not ctrl.any():
            continue
        diff_g = Y[members] - Y[members, base][:, None]
        diff_c = Y[ctrl] - Y[ctrl, base][:, None]
        with np.errstate(invalid="ignore"):
            with_g = np.nanmean(diff_g, axis=0) if np.isfinite(diff_g).any() else None
            with_c = np.nanmean(diff_c, axis=0) if np.isfinite(diff_c).any() else None
        if with_g is None or with_c is None:
            continue
        effect = with_g - with_c
        for t_idx, t in enumerate(years):
            if t == g - 1 or not np.isfinite(effect[t_idx]):
                continue
            att[(g, int(t))] = (float(effect[t_idx]), int(members.sum()))
    ks = list(range(k_lo, k_hi + 1))
    theta = np.full(len(ks), np.nan)
    for i, kk in enumerate(ks):
        if kk == REFERENCE_K:
            continue
        vals = [(v, n) for (g, t), (v, n) in att.items() if t - g == kk]
        if vals:
            v, n = np.array(vals).T
            theta[i] = float(np.sum(v * n) / np.sum(n))
    return att, ks, theta


def callaway_santanna(dataset: PanelDataset, k_range: tuple[int, int] = DEFAULT_K_RANGE,
                      n_boot: int = 199, seed: int = 0) -> CsResult:
    """Group-time DiD against never-treated countries with a universal base ``g - 1``.

    ``ATT(g, t)`` compares the change from ``g - 1`` to ``t`` in cohort ``g``
    with the same change among never-treated countries.  Event-time effects
    average ``ATT(g, g + k)`` across cohorts with cohort-size weights; their
    standard errors come from a country-cluster bootstrap.
    """
    from .inference import draw_clusters

    if not dataset.control_countries:
        raise NoNeverTreated("Callaway-Sant'Anna needs never-treated countries")
    first_year = dataset.year_range[0]
    adoption = dataset.adoption_years
    cohorts = sorted({a for a in adoption.values() if a is not None})
    for g in cohorts:
        if g - 1 < first_year:
            raise NoPrePeriod(f"cohort {g} adopts at the start of the panel; no base year {g - 1}")
    Y, years = _outcome_matrix(dataset)
    cohort = np.array([adoption[c] or 0 for c in dataset.countries])
    att, ks, theta = _cs_core(Y, cohort, years, cohorts, *k_range)

    G = dataset.n_countries
    reps, failed = [], 0
    for idx in draw_clusters(G, n_boot, seed):
        _, _, th = _cs_core(Y[idx], cohort[idx], years, cohorts, *k_range)
        if not (cohort[idx] == 0).any() or not (cohort[idx] > 0).any():
            failed += 1
            continue
        reps.append(th)
    reps = np.array(reps).reshape(-1, len(ks))
    supported = [i for i, kk in enumerate(ks) if np.isfinite(theta[i])]
    sub = reps[:, supported]
    complete = np.isfinite(sub).all(axis=1)
    vcov = np.cov(sub[complete], rowvar=False, ddof=1).reshape(len(supported), len(supported)) \
        if complete.sum() > 1 else np.full((len(supported),) * 2, np.nan)
    se_cols = np.nanstd(sub, axis=0, ddof=1) if len(sub) > 1 else np.full(len(supported), np.nan)
    vcov[np.diag_indices_from(vcov)] = se_cols ** 2

    rows = sorted((g, t, t - g, v, n) for (g, t), (v, n) in att.items())
    table = pd.DataFrame(rows, columns=["cohort", "year", "event_time", "att", "n_cohort"])
    sizes = {g: int((cohort == g).sum()) for g in cohorts}
    n_obs = []
    for i in supported:
        kk = ks[i]
        n_obs.append(sum(sizes[g] for g in cohorts if (g, g + kk) in att))
    result = _build_result("cs", [ks[i] for i in supported], theta[supported], vcov, n_obs, G,
                           notes=(f"bootstrap replicates: {len(reps)} valid, {failed} discarded",))
    return CsResult(table, result, n_boot, failed)


@dataclass
class IfeResult:
    tau_hat: float
    factors: np.ndarray          # T x r
    loadings: np.ndarray         # N x r
    n_factors: int
    iterations: int
    converged: bool
    alpha: np.ndarray = field(default=None, repr=False)
    countries: tuple[str, ...] = ()
    years: tuple[int, ...] = ()
    warnings: tuple[str, ...] = ()


def _rectangle(dataset: PanelDataset, window: tuple[int, int] | None):
    start, end = window or dataset.year_range
    sub = dataset.restrict_years(start, end)
    Y, years = _outcome_matrix(sub)
    D = np.full_like(Y, np.nan)
    D[sub.country_codes, sub.year_codes] = sub.d
    complete = np.isfinite(Y).all(axis=1)
    countries = np.array(sub.countries)
    notes = []
    if not complete.all():
        dropped = countries[~complete].tolist()
        notes.append(f"excluded {len(dropped)} countries with gaps in {start}-{end}: {dropped}")
        logger.warning(notes[-1])
    return Y[complete], D[complete], tuple(countries[complete]), tuple(int(y) for y in years), notes


def interactive_fe(dataset: PanelDataset, n_factors: int = 2, max_iter: int = 1000,
                   tol: float = 1e-8, window: tuple[int, int] | None = None) -> IfeResult:
    """Interactive fixed effects ``y = alpha_i + lambda_i' f_t + tau D + e``.

    Alternates between (i) OLS for ``alpha`` and ``tau`` given the factor
    component and (ii) principal components of ``y - alpha - tau D``.
    Factors are normalized so that ``F'F / T = I``.  There are no separate
    year effects: with ``r >= 1`` a factor with flat loadings plays that role.
    """
    if n_factors < 1:
        raise InvalidSpec("n_factors must be >= 1 (use twfe_event_study for plain fixed effects)")
    Y, D, countries, years, notes = _rectangle(dataset, window)
    N, T = Y.shape
    if N <= n_factors + 1 or T <= n_factors + 1:
        raise WindowTooSparse(f"{N} complete countries x {T} years cannot identify {n_factors} factors")
    Dc = D - D.mean(axis=1, keepdims=True)
    sdd = float((Dc ** 2).sum())
    if sdd <= 1e-12:
        raise WindowTooSparse("no within-country treatment variation in the window")

    def ols_step(Z):
        Zc = Z - Z.mean(axis=1, keepdims=True)
        tau = float((Zc * Dc).sum() / sdd)
        alpha = (Z - tau * D).mean(axis=1)
        return tau, alpha

    # start from the two-way FE estimate
    Zt, _ = twoway_residuals(np.column_stack([Y.ravel(), D.ravel()]),
                             np.repeat(np.arange(N), T), np.tile(np.arange(T), N))
    tau = float(Zt[:, 0] @ Zt[:, 1] / (Zt[:, 1] @ Zt[:, 1]))
    alpha = (Y - tau * D).mean(axis=1)
    converged = False
    F = L = None
    it = 0
    for it in range(1, max_iter + 1):
        R = Y - alpha[:, None] - tau * D
        evals, evecs = np.linalg.eigh(R.T @ R)
        F = np.sqrt(T) * evecs[:, ::-1][:, :n_factors]
        L = R @ F / T
        new_tau, alpha = ols_step(Y - L @ F.T)
        if abs(new_tau - tau) < tol:
            tau = new_tau
            converged = True
            break
        tau = new_tau
    result = IfeResult(tau, F, L, n_factors, it, converged, alpha, countries, years, tuple(notes))
    if not converged:
        raise NonConvergence(f"no convergence after {max_iter} iterations", result)
    return result


@dataclass(frozen=True)
class DidEstimate:
    estimate: float
    std_error: float
    t_stat: float
    p_value: float
    n_clusters: int


def twfe_did(dataset: PanelDataset) -> DidEstimate:
    """Pooled two-way FE difference-in-differences with country-clustered errors.

    The p-value uses a t distribution with ``G - 1`` degrees of freedom.
    """
    _check_groups(dataset)
    fit = fe_ols(dataset.y, dataset.d[:, None], dataset.country_codes, dataset.year_codes, ["D"])
    b, se = float(fit.beta[0]), float(np.sqrt(fit.vcov[0, 0]))
    t = b / se if se > 0 else (0.0 if b == 0 else np.inf * np.sign(b))
    p = float(2 * stats.t.sf(abs(t), fit.n_clusters - 1))
    return DidEstimate(b, se, float(t), p, fit.n_clusters)
