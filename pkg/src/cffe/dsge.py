"""Two-country New Keynesian model with productivity scarring.

The linear model is solved in the sequence space: all periods
``t = 0..H-1`` are stacked into one sparse system, expectations are
replaced by next-period values (perfect foresight), variables dated ``-1``
are zero and forward references to ``t = H`` are zero.  The one exception
is the nominal exchange rate under floating rates: it has a unit root (its
long-run level absorbs the permanent price-level gap), so it is closed with
a zero terminal change, ``e[H] = e[H-1]``.  The solution is exact up to
truncation; ``solve_irf`` checks the truncation by re-solving at ``2H``.

Variables per period:

* union (12): x, pi, a, rn, p for H and F, the common rate ``i`` and ``q``
* float (14): the same with ``i_H``, ``i_F`` and the nominal rate ``e``
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterable, Literal, Mapping

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (HorizonTooShort, InvalidCalibration, SingularSystem,
                     WindowExceedsHorizon)

Regime = Literal["union", "float"]
SHOCKS = ("g_H", "g_F", "u_H", "u_F", "z_rn_H", "z_rn_F", "eps_a_H", "eps_a_F")
PATH_NAMES = ("x_H", "x_F", "pi_H", "pi_F", "i_H", "i_F", "a_H", "a_F",
              "rn_H", "rn_F", "p_H", "p_F", "e", "q")


@dataclass(frozen=True)
class DsgeCalibration:
    beta: float = 0.99
    sigma: float = 1.0
    kappa: float = 0.10
    rho_i: float = 0.80
    phi_pi: float = 1.50
    phi_x: float = 0.20
    rho_a: float = 0.95
    chi: float = 0.03
    psi_a: float = 1.0
    omega: float = 0.60
    rho_rn: float = 0.80
    rho_u: float = 0.50
    nu: float = 0.15
    rho_g: float = 0.80   # not in the published table; mirrors rho_rn

    def validate(self) -> None:
        problems = []
        if not 0 < self.beta < 1:
            problems.append("beta must lie in (0, 1)")
        if self.phi_pi <= 1:
            problems.append("phi_pi must exceed 1 (Taylor principle)")
        for name in ("rho_i", "rho_a", "rho_rn", "rho_u", "rho_g"):
            if not 0 <= getattr(self, name) < 1:
                problems.append(f"{name} must lie in [0, 1)")
        if self.chi < 0:
            problems.append("chi must be >= 0")
        if self.sigma <= 0:
            problems.append("sigma must be > 0")
        if not 0 <= self.omega <= 1:
            problems.append("omega must lie in [0, 1]")
        if problems:
            raise InvalidCalibration("; ".join(problems))

    def with_overrides(self, **overrides) -> "DsgeCalibration":
        return replace(self, **{k: float(v) for k, v in overrides.items()})

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "DsgeCalibration":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise InvalidCalibration(f"unknown calibration keys: {sorted(unknown)}")
        try:
            return cls(**{k: float(v) for k, v in values.items()})
        except ValueError as exc:
            raise InvalidCalibration(str(exc)) from None

    def default_persistence(self, shock: str) -> float:
        base = shock.rsplit("_", 1)[0]
        return {"g": self.rho_g, "u": self.rho_u, "z_rn": self.rho_rn, "eps_a": 0.0}[base]


@dataclass(frozen=True)
class Shock:
    variable: str
    size: float = -0.01
    persistence: float | None = None   # None: calibration default for this shock

    def __post_init__(self):
        if self.variable not in SHOCKS:
            raise ValueError(f"unknown shock {self.variable!r}; expected one of {SHOCKS}")


@dataclass
class LinearSystem:
    """Per-period equations ``A_lag y[t-1] + A_cur y[t] + A_lead y[t+1] + B s[t] = 0``."""

    regime: Regime
    calibration: DsgeCalibration
    variables: tuple[str, ...]
    equations: tuple[str, ...]
    A_lag: np.ndarray
    A_cur: np.ndarray
    A_lead: np.ndarray
    B: np.ndarray          # columns follow SHOCKS
    # variables with a unit root: their value one period past the horizon
    # equals the last solved value (zero terminal change) instead of zero
    unit_root: tuple[str, ...] = ()
    # variables whose level is a pure normalization (nothing else depends on
    # it); they are left out of the horizon-sensitivity check
    free_level: tuple[str, ...] = ()

    @property
    def n_vars(self) -> int:
        return len(self.variables)

    def residuals(self, path: np.ndarray, shocks: np.ndarray) -> np.ndarray:
        """Equation residuals for a ``(H, n)`` path and ``(H, n_shocks)`` exogenous paths."""
        H = len(path)
        zero = np.zeros((1, self.n_vars))
        lag = np.vstack([zero, path[:-1]])
        lead = np.vstack([path[1:], zero])
        for v in self.unit_root:
            j = self.variables.index(v)
            lead[-1, j] = path[-1, j]
        return lag @ self.A_lag.T + path @ self.A_cur.T + lead @ self.A_lead.T + shocks @ self.B.T


def build_system(cal: DsgeCalibration, regime: Regime) -> LinearSystem:
    """Assemble the coefficient matrices for one regime."""
    cal.validate()
    if regime not in ("union", "float"):
        raise ValueError(f"regime must be 'union' or 'float', got {regime!r}")
    core = ["x_H", "x_F", "pi_H", "pi_F", "a_H", "a_F", "rn_H", "rn_F", "p_H", "p_F"]
    variables = core + (["i", "q"] if regime == "union" else ["i_H", "i_F", "e", "q"])
    vi = {v: j for j, v in enumerate(variables)}
    si = {s: j for j, s in enumerate(SHOCKS)}
    n = len(variables)
    A = {-1: np.zeros((n, n)), 0: np.zeros((n, n)), 1: np.zeros((n, n))}
    B = np.zeros((n, len(SHOCKS)))
    eq_names: list[str] = []

    def equation(name: str, terms: Iterable[tuple[str, int, float]], shocks=()):
        r = len(eq_names)
        eq_names.append(name)
        for var, offset, coef in terms:
            A[offset][r, vi[var]] += coef
        for s, coef in shocks:
            B[r, si[s]] += coef

    inv_sigma = 1.0 / cal.sigma
    rate = {"H": "i" if regime == "union" else "i_H", "F": "i" if regime == "union" else "i_F"}
    for c, q_sign in (("H", 1.0), ("F", -1.0)):
        equation(f"is_{c}", [(f"x_{c}", 0, 1.0), (f"x_{c}", 1, -1.0),
                             (rate[c], 0, inv_sigma), (f"pi_{c}", 1, -inv_sigma),
                             (f"rn_{c}", 0, -inv_sigma), ("q", 0, -q_sign * cal.nu)],
                 [(f"g_{c}", -1.0)])
    for c in "HF":
        equation(f"nkpc_{c}", [(f"pi_{c}", 0, 1.0), (f"pi_{c}", 1, -cal.beta), (f"x_{c}", 0, -cal.kappa)],
                 [(f"u_{c}", -1.0)])
    for c in "HF":
        equation(f"scar_{c}", [(f"a_{c}", 0, 1.0), (f"a_{c}", -1, -cal.rho_a), (f"x_{c}", -1, -cal.chi)],
                 [(f"eps_a_{c}", -1.0)])
    for c in "HF":
        equation(f"rn_{c}", [(f"rn_{c}", 0, 1.0), (f"a_{c}", 0, -cal.psi_a)], [(f"z_rn_{c}", -1.0)])
    for c in "HF":
        equation(f"price_{c}", [(f"p_{c}", 0, 1.0), (f"p_{c}", -1, -1.0), (f"pi_{c}", 0, -1.0)])
    g = 1.0 - cal.rho_i
    if regime == "union":
        w = cal.omega
        equation("taylor_union", [("i", 0, 1.0), ("i", -1, -cal.rho_i),
                                  ("pi_H", 0, -g * cal.phi_pi * w), ("pi_F", 0, -g * cal.phi_pi * (1 - w)),
                                  ("x_H", 0, -g * cal.phi_x * w), ("x_F", 0, -g * cal.phi_x * (1 - w))])
        equation("rer_union", [("q", 0, 1.0), ("p_F", 0, -1.0), ("p_H", 0, 1.0)])
    else:
        for c in "HF":
            equation(f"taylor_{c}", [(f"i_{c}", 0, 1.0), (f"i_{c}", -1, -cal.rho_i),
                                     (f"pi_{c}", 0, -g * cal.phi_pi), (f"x_{c}", 0, -g * cal.phi_x)])
        equation("uip", [("i_H", 0, 1.0), ("i_F", 0, -1.0), ("e", 1, -1.0), ("e", 0, 1.0)])
        equation("rer", [("q", 0, 1.0), ("e", 0, -1.0), ("p_F", 0, -1.0), ("p_H", 0, 1.0)])
    # With nu > 0 the exchange-rate level feeds back through q, so e settles at
    # a new level: close it with zero terminal change.  With nu = 0 the level
    # appears nowhere else and only the zero terminal value pins it down.
    unit_root = ("e",) if regime == "float" and cal.nu != 0 else ()
    free_level = ("e", "q") if regime == "float" and cal.nu == 0 else ()
    return LinearSystem(regime, cal, tuple(variables), tuple(eq_names), A[-1], A[0], A[1], B,
                        unit_root, free_level)


@dataclass
class IrfResult:
    horizon: int
    paths: dict[str, np.ndarray]
    regime: Regime
    shock: Shock
    residual_norm: float
    calibration: DsgeCalibration = field(default_factory=DsgeCalibration)

    def to_long_rows(self) -> list[tuple[str, str, int, float]]:
        return [(self.regime, name, t, float(v))
                for name in PATH_NAMES for t, v in enumerate(self.paths[name])]


def shock_paths(system: LinearSystem, shock: Shock, horizon: int) -> np.ndarray:
    rho = shock.persistence
    if rho is None:
        rho = system.calibration.default_persistence(shock.variable)
    s = np.zeros((horizon, len(SHOCKS)))
    s[:, SHOCKS.index(shock.variable)] = shock.size * rho ** np.arange(horizon)
    return s


def _stacked_solve(system: LinearSystem, shocks: np.ndarray) -> np.ndarray:
    H = len(shocks)
    n = system.n_vars
    eye_main = sp.identity(H, format="csr")
    eye_lag = sp.eye(H, k=-1, format="csr")
    eye_lead = sp.eye(H, k=1, format="csr")
    M = (sp.kron(eye_main, system.A_cur) + sp.kron(eye_lag, system.A_lag)
         + sp.kron(eye_lead, system.A_lead))
    if system.unit_root:
        # fold the lead coefficient of unit-root variables into the last period
        M = M.tolil()
        last = (H - 1) * n
        for v in system.unit_root:
            j = system.variables.index(v)
            for r in range(n):
                if system.A_lead[r, j] != 0:
                    M[last + r, last + j] += system.A_lead[r, j]
    M = M.tocsc()
    rhs = -(shocks @ system.B.T).ravel()
    try:
        lu = spla.splu(M)
    except RuntimeError as exc:
        raise SingularSystem(f"stacked system is singular: {exc}") from None
    pivots = np.abs(lu.U.diagonal())
    if pivots.min() < 1e-12 * max(pivots.max(), 1.0):
        raise SingularSystem(f"near-zero pivot {pivots.min():.3e} in the stacked system")
    return lu.solve(rhs).reshape(H, n)


def _paths(system: LinearSystem, sol: np.ndarray) -> dict[str, np.ndarray]:
    col = {v: sol[:, j] for j, v in enumerate(system.variables)}
    H = len(sol)
    if system.regime == "union":
        col["i_H"] = col["i"]
        col["i_F"] = col["i"].copy()
        col["e"] = np.zeros(H)
    return {name: np.array(col[name]) for name in PATH_NAMES}


def solve_irf(system: LinearSystem, shock: Shock, horizon: int = 300,
              check_horizon: bool = True) -> IrfResult:
    """Impulse responses over ``horizon`` quarters.

    With ``check_horizon`` the model is re-solved at twice the horizon;
    if any path moves by more than 1e-6 over the first ``horizon // 2``
    quarters the truncation is judged too short.
    """
    if horizon < 100:
        raise HorizonTooShort(f"horizon must be >= 100 quarters, got {horizon}")
    shocks = shock_paths(system, shock, horizon)
    sol = _stacked_solve(system, shocks)
    resid = system.residuals(sol, shocks)
    residual_norm = float(np.abs(resid).max())
    if check_horizon:
        long_sol = _stacked_solve(system, shock_paths(system, shock, 2 * horizon))
        half = horizon // 2
        cols = [j for j, v in enumerate(system.variables) if v not in system.free_level]
        gap = float(np.abs(long_sol[:half, cols] - sol[:half, cols]).max())
        if gap > 1e-6:
            raise HorizonTooShort(
                f"paths move by {gap:.3e} over the first {half} quarters when the horizon doubles")
    return IrfResult(horizon, _paths(system, sol), system.regime, shock, residual_norm,
                     system.calibration)


def cumulative_loss(irf: IrfResult, country: str, window: int = 20) -> float:
    """Sum of the country's output gap over the first ``window`` quarters."""
    if country not in ("H", "F"):
        raise ValueError("country must be 'H' or 'F'")
    if window > irf.horizon:
        raise WindowExceedsHorizon(f"window {window} exceeds horizon {irf.horizon}")
    return float(np.sum(irf.paths[f"x_{country}"][:window]))


def peak_deviation(path: np.ndarray) -> float:
    """The entry of largest magnitude, sign kept."""
    return float(path[np.argmax(np.abs(path))]) if len(path) else 0.0


@dataclass
class RegimeComparison:
    union: IrfResult
    float: IrfResult
    window: int
    loss_union: float
    loss_float: float
    ratio: float
    peaks: dict[str, dict[str, float]]


def compare_regimes(cal: DsgeCalibration, shock: Shock, horizon: int = 300, window: int = 20,
                    country: str = "F") -> RegimeComparison:
    """Solve the same shock under both regimes and compare cumulative losses."""
    runs = {r: solve_irf(build_system(cal, r), shock, horizon) for r in ("union", "float")}
    loss = {r: cumulative_loss(runs[r], country, window) for r in runs}
    ratio = loss["union"] / loss["float"] if loss["float"] != 0 else math.inf
    peaks = {r: {v: peak_deviation(p) for v, p in runs[r].paths.items()} for r in runs}
    return RegimeComparison(runs["union"], runs["float"], window, loss["union"], loss["float"],
                            ratio, peaks)


def persistence_metric(irf: IrfResult, country: str = "F", share: float = 0.10) -> int | None:
    """First quarter after the peak where ``|x|`` falls below ``share`` of its peak.

    Returns None if the path never decays that far within the horizon.
    """
    x = np.abs(irf.paths[f"x_{country}"])
    peak_t = int(np.argmax(x))
    if x[peak_t] == 0:
        return 0
    below = np.nonzero(x[peak_t:] < share * x[peak_t])[0]
    return int(peak_t + below[0]) if len(below) else None


def crossing_time(irf: IrfResult, country: str = "F", share: float = 0.10) -> float | None:
    """Fractional quarter at which ``|x|`` first drops below ``share`` of its peak.

    Linear interpolation between the two quarters that bracket the crossing;
    a finer-grained companion to :func:`persistence_metric`.
    """
    x = np.abs(irf.paths[f"x_{country}"])
    t = persistence_metric(irf, country, share)
    if t is None or t == 0:
        return None if t is None else 0.0
    level = share * x[int(np.argmax(x))]
    x0, x1 = x[t - 1], x[t]
    return float(t - 1 + (x0 - level) / (x0 - x1))


@dataclass
class SensitivityRun:
    chi: float
    irf: IrfResult
    persistence: int | None
    loss: float
    crossing: float | None = None


def scarring_sensitivity(cal: DsgeCalibration, chi_values: Iterable[float], shock: Shock,
                         regime: Regime = "union", horizon: int = 300, window: int = 20,
                         country: str = "F") -> list[SensitivityRun]:
    """One IRF per scarring intensity, same shock and regime."""
    chis = [float(c) for c in chi_values]
    if any(c < 0 for c in chis):
        raise InvalidCalibration("chi values must be >= 0")
    runs = []
    for chi in chis:
        irf = solve_irf(build_system(replace(cal, chi=chi), regime), shock, horizon)
        runs.append(SensitivityRun(chi, irf, persistence_metric(irf, country),
                                   cumulative_loss(irf, country, window),
                                   crossing_time(irf, country)))
    return runs


def calibration_dict(cal: DsgeCalibration) -> dict[str, float]:
    return asdict(cal)
