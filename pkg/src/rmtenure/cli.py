"""``rmtenure`` command-line tool.

Exit codes: 0 success, 1 invalid data or estimation failure, 2 parse,
usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from pathlib import Path

from . import __version__
from .analysis import TwoProcessModel
from .artifacts import dumps_json, file_digest, load_model, model_to_json, write_manifest
from .compensation import (
    DAYS_PER_MONTH,
    CompensationSchedule,
    ScheduleError,
    constant_damages,
    expected_earnings_from_curve,
)
from .cox import CoxError, build_view, fit
from .data import (
    ParseError,
    RestrictionWindow,
    ValidationError,
    parse_time,
    read_csv,
    read_sidecar,
    validate_dataset,
)
from .prediction import CounterfactualPolicy
from .simulation import SimulationConfig, StudyFailure, run_study

log = logging.getLogger("rmtenure")

MEANS_HEADER = ["subject_id", "E_lt", "se_lt", "E_cap", "se_cap", "E_rt", "se_rt"]
CURVES_HEADER = ["subject_id", "time", "p_lt", "p_cap", "p_rt"]
DAMAGES_HEADER = ["subject_id", "expected_earnings", "actual", "damages"]


class UsageError(Exception):
    """Bad flags or configuration; exit code 2."""


def _num(x) -> str:
    return repr(float(x))


def _write_rows(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(args, validate=True):
    if not args.data or not args.sidecar:
        raise UsageError("--data and --sidecar are required")
    sidecar = read_sidecar(args.sidecar)
    dataset = read_csv(args.data, sidecar)
    if validate:
        dataset = validate_dataset(dataset)
    return sidecar, dataset


def _window(args, sidecar) -> RestrictionWindow:
    if args.window:
        parts = args.window.split(",")
        if len(parts) != 2:
            raise UsageError("--window must be tau0,tau1")
        try:
            return RestrictionWindow(*(parse_time(p, sidecar.epoch) for p in parts))
        except ValueError as exc:
            raise UsageError(f"bad --window: {exc}") from None
    if sidecar.window is None:
        raise UsageError("no window given: pass --window or set 'window' in the sidecar")
    return sidecar.window


def _policy(args, dataset) -> CounterfactualPolicy | None:
    if args.policy == "none":
        return None
    if args.policy:
        try:
            return CounterfactualPolicy.parse(args.policy)
        except ValueError as exc:
            raise UsageError(f"bad --policy: {exc}") from None
    return CounterfactualPolicy(dataset.protected_column, 0.0)


# ---------------------------------------------------------------- commands

def cmd_validate(args) -> int:
    try:
        _load_data(args)
    except ValidationError as exc:
        for v in exc.violations:
            print(str(v))
        print(f"invalid: {len(exc.violations)} violation(s)")
        return 1
    print("valid")
    return 0


def cmd_fit(args) -> int:
    _, dataset = _load_data(args)
    out = _out_dir(args)
    fits = {}
    for proc in ("P", "R"):
        try:
            fits[proc] = fit(build_view(dataset, proc))
        except CoxError as exc:
            print(f"error: {proc} model: {type(exc).__name__}: {exc}", file=sys.stderr)
            return 1
    (out / "model.json").write_text(model_to_json(fits["P"], fits["R"], file_digest(args.data)))
    rows = []
    for proc, f in fits.items():
        if not len(f.beta_hat):
            continue
        for name, b, hr, se, p in zip(f.covariate_names, f.beta_hat, f.hazard_ratios,
                                      f.std_errors, f.p_values):
            rows.append([proc, name, _num(b), _num(hr), _num(se), _num(p)])
    _write_rows(out / "coefficients.csv",
                ["process", "covariate", "coef", "hazard_ratio", "se", "p_value"], rows)
    write_manifest(out, "fit", {}, {"data": args.data, "sidecar": args.sidecar})
    return 0


def _check_model(fitP, fitR, dataset, viewP, viewR):
    for f, view, proc in ((fitP, viewP, "promotion"), (fitR, viewR, "retirement")):
        if tuple(f.covariate_names) != tuple(dataset.covariate_names(f.process)):
            raise UsageError(
                f"covariate mismatch in {proc} model: model has {list(f.covariate_names)}, "
                f"data has {list(dataset.covariate_names(f.process))}")
        if tuple(f.subject_ids) != tuple(view.subject_ids):
            raise UsageError(f"{proc} model was fitted to a different set of subjects")


def cmd_predict(args) -> int:
    sidecar, dataset = _load_data(args)
    window = _window(args, sidecar)
    policy = _policy(args, dataset)
    viewP, viewR = build_view(dataset, "P"), build_view(dataset, "R")
    if args.model:
        fitP, fitR, _ = load_model(args.model)
        _check_model(fitP, fitR, dataset, viewP, viewR)
    else:
        fitP, fitR = fit(viewP), fit(viewR)
    model = TwoProcessModel(dataset, viewP, viewR, fitP, fitR)
    if policy is not None:
        known = set(dataset.promo_covariate_names) | set(dataset.retire_covariate_names)
        if policy.target_column not in known:
            raise UsageError(f"policy column {policy.target_column!r} is not a model covariate")
    wanted = args.subjects.split(",") if args.subjects else None
    if wanted:
        missing = [s for s in wanted if s not in {r.id for r in dataset.subjects}]
        if missing:
            raise UsageError(f"unknown subject id(s): {', '.join(missing)}")
    eligible = []
    for rec in dataset.subjects:
        if wanted is not None and rec.id not in wanted:
            continue
        if rec.promotion is None:
            log.warning("skipping %s: no promotion observation", rec.id)
        elif rec.promotion.entry >= window.tau1:
            log.warning("skipping %s: enters at %r, at or after window end %r",
                        rec.id, rec.promotion.entry, window.tau1)
        else:
            eligible.append(rec)

    def one(rec):
        return model.predict(rec, policy, window, with_curve=True)

    if args.threads > 1:
        with ThreadPoolExecutor(args.threads) as pool:
            preds = list(pool.map(one, eligible))
    else:
        preds = [one(r) for r in eligible]

    scale = DAYS_PER_MONTH if args.months else 1.0
    means, curves = [], []
    for p in preds:
        row = [p.subject_id]
        for e in p.estimates:
            row += [_num(e.value / scale), _num(e.std_error / scale)]
        means.append(row)
        curves.extend([p.subject_id] + [_num(v) for v in c] for c in p.curve)
    out = _out_dir(args)
    _write_rows(out / "means.csv", MEANS_HEADER, means)
    _write_rows(out / "curves.csv", CURVES_HEADER, curves)
    config = {"window": [window.tau0, window.tau1], "months": bool(args.months),
              "policy": None if policy is None else [policy.target_column, policy.replacement_value],
              "subjects": wanted}
    write_manifest(out, "predict", config,
                   {"data": args.data, "sidecar": args.sidecar, "model": args.model})
    return 0


def _read_table(path, required):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    if rows and not set(required) <= set(rows[0]):
        raise UsageError(f"{path}: expected columns {required}")
    return rows


def _actuals(arg) -> dict | float:
    if arg is None:
        return 0.0
    try:
        return float(arg)
    except ValueError:
        pass
    rows = _read_table(arg, ["subject_id", "actual"])
    return {r["subject_id"]: float(r["actual"]) for r in rows}


def cmd_compensate(args) -> int:
    if not args.predictions or not args.schedule:
        raise UsageError("--predictions and --schedule are required")
    try:
        schedule = CompensationSchedule.from_dict(json.loads(Path(args.schedule).read_text()))
    except (ScheduleError, ValueError) as exc:
        raise UsageError(f"bad schedule: {exc}") from None
    actuals = _actuals(args.actual)
    means = _read_table(args.predictions, MEANS_HEADER)
    curves = {}
    if not schedule.is_constant:
        if not args.curves:
            raise UsageError("a time-varying schedule needs --curves")
        for r in _read_table(args.curves, CURVES_HEADER):
            curves.setdefault(r["subject_id"], []).append(
                [float(r[k]) for k in ("time", "p_lt", "p_cap", "p_rt")])
    scale = DAYS_PER_MONTH if args.months else 1.0
    rows = []
    for r in means:
        sid = r["subject_id"]
        actual = actuals if isinstance(actuals, float) else actuals.get(sid)
        if actual is None:
            raise UsageError(f"no actual earnings for subject {sid}")
        if schedule.is_constant:
            m = tuple(float(r[k]) for k in ("E_lt", "E_cap", "E_rt"))
            earned = constant_damages(m, schedule, 0.0)
        else:
            pts = curves.get(sid)
            if not pts:
                raise UsageError(f"no curve rows for subject {sid}")
            times = [p[0] for p in pts]
            try:
                earned = expected_earnings_from_curve(times[:-1], [p[1:] for p in pts[:-1]],
                                                      times[-1], schedule, scale)
            except ScheduleError as exc:
                print(f"error: subject {sid}: {exc}", file=sys.stderr)
                return 1
        rows.append([sid, _num(earned), _num(actual), _num(earned - actual)])
    out = _out_dir(args)
    _write_rows(out / "damages.csv", DAMAGES_HEADER, rows)
    actual_file = args.actual if args.actual and Path(args.actual).is_file() else None
    write_manifest(out, "compensate", {"months": bool(args.months)},
                   {"predictions": args.predictions, "curves": args.curves,
                    "schedule": args.schedule, "actual": actual_file})
    return 0


REPORT_HEADER = ["label", "quantity", "true", "reference_true", "mean_estimate", "bias",
                 "esd", "ase", "cp"]


def _report_rows(report):
    cfg = report.config
    rows = []
    for q in ("cap", "lt", "rt", "beta1", "theta1"):
        s = getattr(report, q)
        ref = cfg.reference_true if q == "cap" and cfg.reference_true is not None else ""
        rows.append([cfg.label or "", q, _num(s.true_value), "" if ref == "" else _num(ref),
                     _num(s.mean_estimate), _num(s.mean_bias),
                     "" if s.esd is None else _num(s.esd), _num(s.ase), _num(s.cp)])
    rows.append([cfg.label or "", "censoring_P", _num(report.censoring_P), "", "", "", "", "", ""])
    rows.append([cfg.label or "", "censoring_R", _num(report.censoring_R), "", "", "", "", "", ""])
    return rows


def cmd_simulate(args) -> int:
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config: {exc}") from None
    if args.replicates is not None:
        raw["replicates"] = args.replicates
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        config = SimulationConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad simulation config: {exc}") from None
    out = _out_dir(args)
    status = 0
    try:
        report = run_study(config, workers=args.threads)
    except StudyFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        report, status = exc.report, 1
        if report is None:
            return 1
    (out / "report.json").write_text(dumps_json(report.to_dict(include_replicates=True)))
    _write_rows(out / "report.csv", REPORT_HEADER, _report_rows(report))
    write_manifest(out, "simulate", config.to_dict(), {"config": args.config}, seed=config.seed)
    return status


def cmd_example(args) -> int:
    out = _out_dir(args)
    pkg = resources.files("rmtenure") / "resources"
    for name in ("case_study.csv", "case_study.json"):
        (out / name).write_bytes((pkg / name).read_bytes())
    print(out / "case_study.csv")
    print(out / "case_study.json")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rmtenure", description=(
        "Cox-model predictions of time spent in a lower rank, a higher rank and "
        "retirement under a counterfactual covariate policy."))
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_flags(sp):
        sp.add_argument("--data", help="segment-row CSV")
        sp.add_argument("--sidecar", help="JSON naming the protected column and window")

    sp = sub.add_parser("validate", help="check a dataset")
    data_flags(sp)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("fit", help="fit both Cox models and write model.json")
    data_flags(sp)
    sp.add_argument("--out-dir", default=".")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("predict", help="restricted means and state curves per subject")
    data_flags(sp)
    sp.add_argument("--model", help="model.json from 'fit'; refits when omitted")
    sp.add_argument("--window", help="tau0,tau1 as numbers or ISO dates")
    sp.add_argument("--policy", help="column=value, or 'none' for factual prediction "
                                     "(default: protected column set to 0)")
    sp.add_argument("--subjects", help="comma-separated subject ids")
    sp.add_argument("--months", action="store_true",
                    help=f"report means in months of {DAYS_PER_MONTH} days")
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--out-dir", default=".")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("compensate", help="expected earnings minus actual earnings")
    sp.add_argument("--predictions", help="means.csv from 'predict'")
    sp.add_argument("--curves", help="curves.csv from 'predict' (time-varying schedules)")
    sp.add_argument("--schedule", help="JSON pay schedule")
    sp.add_argument("--actual", help="number, or CSV with subject_id,actual")
    sp.add_argument("--months", action="store_true",
                    help="schedule rates are per month; curves are in days")
    sp.add_argument("--out-dir", default=".")
    sp.set_defaults(func=cmd_compensate)

    sp = sub.add_parser("simulate", help="run a replicated simulation study")
    sp.add_argument("--config", help="JSON mirroring SimulationConfig")
    sp.add_argument("--replicates", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--out-dir", default=".")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("example", help="write the bundled synthetic dataset")
    sp.add_argument("--out-dir", default=".")
    sp.set_defaults(func=cmd_example)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (ParseError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
