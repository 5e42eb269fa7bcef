"""Command-line entry point: ``cffe <command> [options]``.

Errors end the process with a nonzero status and exactly one line on
stderr of the form ``error: <Code>: <message>``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import dsge
from .dgp import DgpSpec, generate_panel, parse_cate, spec_from_mapping
from .effects import (AttCurve, AttPoint, cumulative_effects, dynamic_att, group_att,
                      median_split)
from .errors import CffeError, UsageError
from .estimators import callaway_santanna, interactive_fe, sun_abraham, twfe_event_study
from .forest import ForestConfig, feature_importance, fit_forest
from .inference import (block_bootstrap, leave_one_out, placebo_fake_dates, placebo_nontreated,
                        pretrends_test)
from .panel import PanelDataset, load_panel, parse_key_value
from .reporting import (Bundle, atomic_write, derive_seed, export_panel, frame_to_csv, infer_schema,
                        irf_frame, read_bytes, to_json_bytes)

EU_NON_EURO = ("DNK", "SWE", "GBR", "Denmark", "Sweden", "United Kingdom")
_FOREST = ForestConfig()
_CAL = dsge.DsgeCalibration()


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Argument groups
# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--out-dir", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1, help="threads (results do not depend on it)")


def _add_data(p):
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--features", help="comma-separated feature columns (default: all non-reserved)")
    p.add_argument("--extra-outcomes", default="", help="comma-separated extra outcome columns")
    p.add_argument("--outcome", default="outcome", help="outcome column to analyse")
    p.add_argument("--controls", choices=("all", "eu-only"), default="all")
    p.add_argument("--eu-countries", default=",".join(EU_NON_EURO),
                   help="control countries kept by --controls eu-only")
    p.add_argument("--drop-country", action="append", default=[])


def _add_forest(p):
    p.add_argument("--trees", type=int, default=_FOREST.n_trees)
    p.add_argument("--min-leaf", type=int, default=_FOREST.min_leaf)
    p.add_argument("--max-depth", type=int, default=_FOREST.max_depth)


def _add_window(p):
    p.add_argument("--k-min", type=int, default=-10)
    p.add_argument("--k-max", type=int, default=20)


def _add_dsge(p, regime=True):
    if regime:
        p.add_argument("--regime", choices=("union", "float"), default="union")
    p.add_argument("--chi", type=float, default=_CAL.chi)
    p.add_argument("--horizon", type=int, default=300)
    p.add_argument("--shock", choices=dsge.SHOCKS, default="g_F")
    p.add_argument("--shock-size", type=float, default=-0.01)
    p.add_argument("--calibration", type=Path, help="key=value calibration overrides")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cffe", description="Causal forests with two-way fixed effects.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="draw a synthetic panel")
    _add_common(p)
    p.add_argument("--config", type=Path, help="key=value DGP description")
    p.add_argument("--cate", help="e.g. constant:-0.35 or two_group:-0.53,-0.31")
    p.add_argument("--sigma-eps", type=float)
    p.add_argument("--pretrend-slope", type=float)
    p.add_argument("--n-treated", type=int)
    p.add_argument("--n-control", type=int)

    p = sub.add_parser("estimate", help="estimate effects from a panel")
    _add_common(p), _add_data(p), _add_forest(p), _add_window(p)
    p.add_argument("--estimator", choices=("cffe", "twfe", "sa", "cs", "ife"), default="cffe")
    p.add_argument("--n-factors", type=int, default=2)
    p.add_argument("--bootstrap-reps", type=int, default=199, help="CS standard-error replicates")

    p = sub.add_parser("bootstrap", help="country-block bootstrap")
    _add_common(p), _add_data(p), _add_forest(p), _add_window(p)
    p.add_argument("--estimator", choices=("cffe", "twfe", "sa", "cs", "ife"), default="cffe")
    p.add_argument("--bootstrap-reps", type=int, default=200)

    p = sub.add_parser("placebo", help="placebo designs")
    _add_common(p), _add_data(p), _add_forest(p)
    p.add_argument("--fake-year", type=int)
    p.add_argument("--placebo-estimator", choices=("twfe", "cffe"), default="twfe")
    p.add_argument("--placebo-countries", default="", help="never-treated countries to pseudo-treat")
    p.add_argument("--placebo-year", type=int)

    p = sub.add_parser("loo", help="leave one treated country out")
    _add_common(p), _add_data(p), _add_forest(p)
    p.add_argument("--estimator", choices=("cffe", "twfe", "sa", "cs"), default="twfe")

    p = sub.add_parser("pretrends", help="joint test of pre-period coefficients")
    _add_common(p), _add_data(p), _add_window(p)
    p.add_argument("--estimator", choices=("twfe", "sa", "cs"), default="twfe")

    p = sub.add_parser("dsge-irf", help="impulse responses for one regime")
    _add_common(p), _add_dsge(p)

    p = sub.add_parser("dsge-compare", help="union vs float and scarring sensitivity")
    _add_common(p), _add_dsge(p, regime=False)
    p.add_argument("--chi-grid", default="0.01,0.03,0.06")
    p.add_argument("--window", type=int, default=20)

    p = sub.add_parser("report", help="run the full battery and write a bundle")
    _add_common(p), _add_data(p), _add_forest(p), _add_window(p), _add_dsge(p, regime=False)
    p.add_argument("--bootstrap-reps", type=int, default=200)
    p.add_argument("--fake-year", type=int)
    p.add_argument("--placebo-countries", default="")
    p.add_argument("--placebo-year", type=int)
    p.add_argument("--chi-grid", default="0.01,0.03,0.06")
    return parser


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in (text or "").split(",") if t.strip()]


def load_dataset(args) -> PanelDataset:
    raw = read_bytes(args.input)
    extras = _csv_list(args.extra_outcomes)
    if args.outcome != "outcome" and args.outcome not in extras:
        extras.append(args.outcome)
    schema = infer_schema(raw, extras)
    if args.features:
        schema = replace(schema, features=tuple(_csv_list(args.features)))
    ds = load_panel(raw, schema).with_outcome(args.outcome)
    if args.drop_country:
        unknown = set(args.drop_country) - set(ds.countries)
        if unknown:
            raise UsageError(f"--drop-country names unknown countries: {sorted(unknown)}")
        ds = ds.drop_countries(args.drop_country)
    if args.controls == "eu-only":
        keep = set(_csv_list(args.eu_countries))
        dropped = [c for c in ds.control_countries if c not in keep]
        if len(dropped) == len(ds.control_countries):
            raise UsageError("--controls eu-only leaves no control countries")
        ds = ds.drop_countries(dropped)
    return ds


def forest_config(args) -> ForestConfig:
    return ForestConfig(n_trees=args.trees, min_leaf=args.min_leaf, max_depth=args.max_depth,
                        seed=args.seed)


def calibration(args) -> dsge.DsgeCalibration:
    cal = _CAL
    if args.calibration is not None:
        cal = dsge.DsgeCalibration.from_mapping(parse_key_value(read_bytes(args.calibration).decode()))
    return replace(cal, chi=args.chi) if args.chi != _CAL.chi else cal


def _write(out_dir: Path, name: str, data: bytes) -> None:
    atomic_write(out_dir / name, data)


def _event_study(ds, name, k_range, n_boot=199, seed=0):
    if name == "twfe":
        return twfe_event_study(ds, k_range)
    if name == "sa":
        return sun_abraham(ds, k_range)
    return callaway_santanna(ds, k_range, n_boot=n_boot, seed=seed).event_study


def _curve_from_event_study(result) -> AttCurve:
    by_k = {k: AttPoint(e.estimate, e.std_error, e.n_treated_obs)
            for k, e in result.by_k.items() if k >= 0}
    return AttCurve(by_k, (min(by_k), max(by_k)), result.estimator_name)


def _cumulative_or_none(curve: AttCurve):
    try:
        return cumulative_effects(curve)
    except CffeError:
        return None


def _importance_frame(model) -> pd.DataFrame:
    imp = feature_importance(model)
    return pd.DataFrame([(f, p, c) for f, (p, c) in imp.items()], columns=["feature", "proportion", "count"])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    values = parse_key_value(read_bytes(args.config).decode()) if args.config else {}
    values.setdefault("seed", str(args.seed))
    spec = spec_from_mapping(values)
    overrides = {}
    if args.cate:
        overrides["cate"] = parse_cate(args.cate)
    for flag, key in (("sigma_eps", "sigma_eps"), ("pretrend_slope", "pretrend_slope"),
                      ("n_treated", "n_treated"), ("n_control", "n_control")):
        if getattr(args, flag) is not None:
            overrides[key] = getattr(args, flag)
    spec = replace(spec, **overrides)
    spec.validate()
    ds, truth = generate_panel(spec)
    _write(args.out_dir, "panel.csv", export_panel(ds))
    _write(args.out_dir, "ground_truth.json", to_json_bytes(truth.to_dict()))
    return 0


def cmd_estimate(args) -> int:
    ds = load_dataset(args)
    k_range = (args.k_min, args.k_max)
    out = args.out_dir
    if args.estimator == "cffe":
        model = fit_forest(ds, forest_config(args), n_jobs=args.workers)
        curve = dynamic_att(model, ds)
        _write(out, "att_curve.csv", frame_to_csv(curve.to_frame()))
        _write(out, "model.json", model.to_json().encode())
        try:
            _write(out, "importance.csv", frame_to_csv(_importance_frame(model)))
        except CffeError as exc:
            logging.warning("no importance table: %s", exc)
    elif args.estimator == "ife":
        res = interactive_fe(ds, args.n_factors)
        _write(out, "ife.json", to_json_bytes({
            "tau_hat": res.tau_hat, "n_factors": res.n_factors, "iterations": res.iterations,
            "converged": res.converged, "warnings": list(res.warnings)}))
        return 0
    else:
        result = _event_study(ds, args.estimator, k_range, args.bootstrap_reps, args.seed)
        _write(out, "event_study.csv", frame_to_csv(result.to_frame()))
        _write(out, "event_study.json", result.to_json().encode())
        curve = _curve_from_event_study(result)
    cum = _cumulative_or_none(curve)
    if cum is not None:
        _write(out, "cumulative.csv", frame_to_csv(cum.to_frame()))
    return 0


def cmd_bootstrap(args) -> int:
    ds = load_dataset(args)
    opts = {"config": forest_config(args)} if args.estimator == "cffe" else (
        {"n_factors": 2} if args.estimator == "ife" else {"k_range": (args.k_min, args.k_max)})
    res = block_bootstrap(ds, args.estimator, args.bootstrap_reps, derive_seed(args.seed, "bootstrap"),
                          n_jobs=args.workers, **opts)
    _write(args.out_dir, "bootstrap.csv", frame_to_csv(res.to_frame()))
    return 0


def _placebo_frame(ds, args, config) -> pd.DataFrame:
    rows = []
    adoption = [a for a in ds.adoption_years.values() if a is not None]
    fake = args.fake_year if args.fake_year is not None else min(adoption) - 4
    estimator = getattr(args, "placebo_estimator", "twfe")
    r = placebo_fake_dates(ds, fake, estimator, config, n_jobs=args.workers)
    rows.append(("fake_date", "all_treated", fake, r.ate, r.std_error, r.p_value))
    countries = _csv_list(args.placebo_countries)
    if countries or getattr(args, "command", "") == "report":
        if not countries:
            countries = sorted(ds.control_countries)[:3]
        year = args.placebo_year or int(pd.Series(adoption).mode().iloc[0])
        nt = placebo_nontreated(ds, {c: year for c in countries}, config, n_jobs=args.workers)
        for row in nt.table.itertuples(index=False):
            rows.append(("nontreated", row.country, row.pseudo_year, row.effect, row.se, row.p_value))
        rows.append(("nontreated_joint", f"chi2({nt.joint_df}), {nt.covariance} covariance", year,
                     nt.joint_stat, np.nan, nt.joint_p))
    return pd.DataFrame(rows, columns=["design", "unit", "year", "estimate", "se", "p_value"])


def cmd_placebo(args) -> int:
    ds = load_dataset(args)
    _write(args.out_dir, "placebo.csv", frame_to_csv(_placebo_frame(ds, args, forest_config(args))))
    return 0


def cmd_loo(args) -> int:
    ds = load_dataset(args)
    res = leave_one_out(ds, args.estimator, forest_config(args), n_jobs=args.workers)
    _write(args.out_dir, "loo.csv", frame_to_csv(res.table))
    return 0


def _pretrends_frame(test) -> pd.DataFrame:
    return pd.DataFrame([asdict(test)])


def cmd_pretrends(args) -> int:
    ds = load_dataset(args)
    result = _event_study(ds, args.estimator, (args.k_min, args.k_max), seed=args.seed)
    _write(args.out_dir, "pretrends.csv", frame_to_csv(_pretrends_frame(pretrends_test(result))))
    return 0


def _shock(args) -> dsge.Shock:
    return dsge.Shock(args.shock, args.shock_size)


def cmd_dsge_irf(args) -> int:
    irf = dsge.solve_irf(dsge.build_system(calibration(args), args.regime), _shock(args), args.horizon)
    _write(args.out_dir, f"irf_{args.regime}.csv", frame_to_csv(irf_frame([irf])))
    return 0


def _dsge_compare_outputs(args, write) -> None:
    cal = calibration(args)
    comp = dsge.compare_regimes(cal, _shock(args), args.horizon, getattr(args, "window", 20))
    write("irf_union.csv", frame_to_csv(irf_frame([comp.union])))
    write("irf_float.csv", frame_to_csv(irf_frame([comp.float])))
    runs = dsge.scarring_sensitivity(cal, [float(c) for c in _csv_list(args.chi_grid)], _shock(args),
                                     horizon=args.horizon)
    scar = pd.DataFrame([(r.chi, r.persistence, r.crossing, r.loss) for r in runs],
                        columns=["chi", "persistence_quarter", "crossing_quarter", "cumulative_loss"])
    write("dsge_scarring.csv", frame_to_csv(scar))
    long = []
    for r in runs:
        long.extend((f"chi={r.chi}", t, float(v)) for t, v in enumerate(r.irf.paths["x_F"]))
    write("irf_scarring.csv", frame_to_csv(pd.DataFrame(long, columns=["run", "quarter", "x_F"])))
    write("dsge_compare.json", to_json_bytes({
        "loss_union": comp.loss_union, "loss_float": comp.loss_float, "ratio": comp.ratio,
        "window": comp.window, "reference_ratio": 1.4, "peaks": comp.peaks,
        "calibration": dsge.calibration_dict(cal), "shock": asdict(_shock(args))}))


def cmd_dsge_compare(args) -> int:
    _dsge_compare_outputs(args, lambda name, data: _write(args.out_dir, name, data))
    return 0


def run_report(args) -> dict:
    """Full battery; returns the manifest.  Failed tasks mark the bundle incomplete."""
    ds = load_dataset(args)
    config = forest_config(args)
    k_range = (args.k_min, args.k_max)
    settings = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
                if k not in ("workers", "out_dir", "verbose", "func")}
    settings["forest"] = asdict(config)
    settings["sub_seeds"] = {t: derive_seed(args.seed, t) for t in ("bootstrap", "cs")}
    bundle = Bundle(args.out_dir, settings)
    state = {}

    def forest():
        model = fit_forest(ds, config, n_jobs=args.workers)
        state["model"] = model
        curve = dynamic_att(model, ds)
        state["curve"] = curve
        bundle.write("att_curve.csv", frame_to_csv(curve.to_frame()))
        bundle.write("importance.csv", frame_to_csv(_importance_frame(model)))

    def cumulative():
        bundle.write("cumulative.csv", frame_to_csv(cumulative_effects(state["curve"]).to_frame()))

    def groups():
        for feat in ds.feature_names:
            curves = group_att(state["model"], ds, median_split(ds, feat))
            frames = [c.to_frame().assign(group="above_median" if g else "below_median")
                      for g, c in curves.items()]
            bundle.write(f"groups/{feat}.csv", frame_to_csv(pd.concat(frames, ignore_index=True)))

    def comparisons():
        for name in ("twfe", "sa", "cs"):
            res = _event_study(ds, name, k_range, 199, derive_seed(args.seed, "cs"))
            bundle.write(f"event_study_{name}.csv", frame_to_csv(res.to_frame()))
            if name == "twfe":
                bundle.write("pretrends.csv", frame_to_csv(_pretrends_frame(pretrends_test(res))))

    def bootstrap():
        res = block_bootstrap(ds, "cffe", args.bootstrap_reps, derive_seed(args.seed, "bootstrap"),
                              n_jobs=args.workers, config=config)
        table = res.to_frame()
        curve = state["curve"]
        z = 1.959963984540054
        table["forest_se"] = [curve.by_k[k].se if k in curve.by_k else np.nan for k in table["k"]]
        table["forest_width"] = 2 * z * table["forest_se"]
        table["width_ratio"] = table["width"] / table["forest_width"]
        bundle.write("bootstrap.csv", frame_to_csv(table))

    def placebo():
        bundle.write("placebo.csv", frame_to_csv(_placebo_frame(ds, args, config)))

    def loo():
        bundle.write("loo.csv", frame_to_csv(leave_one_out(ds, "cffe", config, args.workers).table))

    def dsge_block():
        _dsge_compare_outputs(args, bundle.write)

    if bundle.run("forest", forest):
        bundle.run("cumulative", cumulative)
        bundle.run("groups", groups)
        bundle.run("bootstrap", bootstrap)
    bundle.run("comparisons", comparisons)
    bundle.run("placebo", placebo)
    bundle.run("loo", loo)
    bundle.run("dsge", dsge_block)
    return bundle.finish()


def cmd_report(args) -> int:
    manifest = run_report(args)
    if manifest["status"] != "complete":
        failed = {k: v["error"] for k, v in manifest["tasks"].items() if v["status"] != "ok"}
        first = next(iter(failed.values()))
        print(f"error: IncompleteBundle: {len(failed)} task(s) failed; first: {first}", file=sys.stderr)
        return 1
    return 0


COMMANDS = {
    "simulate": cmd_simulate, "estimate": cmd_estimate, "bootstrap": cmd_bootstrap,
    "placebo": cmd_placebo, "loo": cmd_loo, "pretrends": cmd_pretrends,
    "dsge-irf": cmd_dsge_irf, "dsge-compare": cmd_dsge_compare, "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                            format="%(levelname)s %(name)s: %(message)s")
        if getattr(args, "workers", 1) < 1:
            raise UsageError("--workers must be >= 1")
        return COMMANDS[args.command](args)
    except CffeError as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {exc.code}: {msg}", file=sys.stderr)
        return 2 if isinstance(exc, UsageError) else 1


if __name__ == "__main__":
    sys.exit(main())
