"""Command line interface.

    tbcal validate-config CONFIG
    tbcal simulate CONFIG [--out DIR] [--events]
    tbcal calibrate TRACE1 TRACE2 [--unpumped U1 U2] [--config CONFIG] ...
    tbcal sweep CONFIG --durations T1 T2 T3 T4 [--repetitions N] [--threads N]
    tbcal predict CONFIG [--lags-csv PATH]

Exit status: 0 success, 1 other failure, 2 usage error, 3 configuration
error, 4 data/format error, 5 unsupported regime, 6 degenerate estimate.
The output directory can be overridden with the TBCAL_OUTPUT_DIR
environment variable.
"""

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .calibrator import (
    ESTIMATORS,
    INTEGRATED_SPDC,
    RATIO_SPDC,
    CalibrationReport,
    estimate_integrated_spdc,
    estimate_integrated_stimulated,
    estimate_ratio_spdc,
    estimate_ratio_stimulated,
    subtract_background,
)
from .correlator import AUTO, CovarianceAccumulator, _check_pair, write_record
from .errors import ConfigError, DataError, TBCalError, WindowTooShort
from .oracle import predict, run_uncertainty_sweep
from .pipeline import (
    AcquisitionResult,
    RATIO_ESTIMATORS,
    calibrate,
    load_config,
    run_regime,
    write_traces,
)
from .source import generate, write_events
from .traceio import load_trace

log = logging.getLogger("tbcal")

EXIT_OK = 0
EXIT_FAILURE = 1


def _output_dir(run, override=None):
    d = override or os.environ.get("TBCAL_OUTPUT_DIR") or run.output.get("directory", "out")
    path = Path(d)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_plain)
        fh.write("\n")


def _plain(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


def _resolved(run):
    return {"config": run.to_dict(), "config_hash": run.config_hash, "software_version": __version__}


# -- commands -----------------------------------------------------------------


def cmd_validate(args):
    run = load_config(args.config)
    print(json.dumps(_resolved(run), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_simulate(args):
    run = load_config(args.config)
    out = _output_dir(run, args.out)
    files = {}
    names = (run.detector1.name, run.detector2.name)
    paths = [out / f"trace_{n}.tbc" for n in names]
    write_traces(run, paths)
    files["traces"] = [str(p) for p in paths]
    if run.unpumped_run:
        upaths = [out / f"unpumped_{n}.tbc" for n in names]
        write_traces(run, upaths, pumped=False)
        files["unpumped_traces"] = [str(p) for p in upaths]
    if args.events:
        epath = out / "events.tbe"
        write_events(epath, generate(run.source))
        files["events"] = str(epath)
    resolved = dict(_resolved(run), files=files)
    _dump(resolved, out / "resolved_config.json")
    print(json.dumps(resolved, indent=2, sort_keys=True))
    return EXIT_OK


def _correlate(t1, t2, tau_max, n_segments, autos):
    _check_pair(t1, t2, tau_max, n_segments)
    max_lag = int(round(tau_max / t1.dt))
    size = t1.samples.size // n_segments
    meta = {"A": dict(t1.meta), "B": dict(t2.meta)}
    cross = CovarianceAccumulator(t1.dt, max_lag, meta=meta)
    auto = CovarianceAccumulator(t1.dt, max_lag, AUTO, meta={"A": dict(t1.meta)}) if autos else None
    for i in range(n_segments):
        a = np.asarray(t1.samples[i * size:(i + 1) * size])
        b = np.asarray(t2.samples[i * size:(i + 1) * size])
        cross.add(a, b)
        if auto is not None:
            auto.add(a)
    rec = cross.record()
    return AcquisitionResult(cross=rec, auto1=auto.record() if auto else None,
                             seed=t1.meta.get("seed", 0))


def _estimators_from_args(args, run):
    if args.estimator:
        out = []
        for name in args.estimator:
            est = {"name": name}
            if name in RATIO_ESTIMATORS:
                for key in ("M", "q1_mean", "tau_eval", "tau_avg"):
                    v = getattr(args, key)
                    if v is not None:
                        est[key] = v
            out.append(est)
        return out
    if run is not None:
        return run.estimators
    return [{"name": INTEGRATED_SPDC}]


def cmd_calibrate(args):
    run = load_config(args.config) if args.config else None
    t1, t2 = load_trace(args.trace1), load_trace(args.trace2)
    estimators = _estimators_from_args(args, run)
    for i, e in enumerate(estimators):
        if e["name"] not in ESTIMATORS:
            raise ConfigError(f"estimator[{i}]: unknown estimator {e['name']!r}")
    acq = run.acquisition if run else None
    tau_max = args.tau_max or (acq.tau_max if acq else None)
    n_segments = args.n_segments or (acq.n_segments if acq else None)
    if tau_max is None or n_segments is None:
        raise ConfigError("calibrate needs --tau-max and --n-segments (or --config)")
    needs_auto = any(e["name"] in RATIO_ESTIMATORS for e in estimators)
    flags = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", WindowTooShort)
        pumped = _correlate(t1, t2, tau_max, n_segments, needs_auto)
        unpumped = None
        if args.unpumped:
            u1, u2 = (load_trace(p) for p in args.unpumped)
            if not np.isclose(u1.dt, t1.dt, rtol=1e-12):
                raise DataError("unpumped traces have a different dt")
            unpumped = _correlate(u1, u2, tau_max, n_segments, needs_auto)
        elif needs_auto:
            flags.append("background_subtraction_skipped")
        if run is not None:
            reports = calibrate(run.with_(estimators=estimators), pumped, unpumped)
        else:
            reports = _calibrate_plain(estimators, pumped, unpumped)
    for w in caught:
        if issubclass(w.category, WindowTooShort):
            log.warning(str(w.message))
    if "background_subtraction_skipped" in flags:
        msg = "no unpumped traces given: background subtraction skipped for the ratio estimator"
        log.warning(msg)
        warnings.warn(msg, UserWarning, stacklevel=2)
    out = Path(args.out or os.environ.get("TBCAL_OUTPUT_DIR") or (run.output.get("directory") if run else "out"))
    out.mkdir(parents=True, exist_ok=True)
    write_record(pumped.cross, out / "cross.csv", out / "cross.json")
    if pumped.auto1 is not None:
        write_record(pumped.auto1, out / "auto1.csv", out / "auto1.json")
    body = []
    for rep in reports:
        if isinstance(rep, CalibrationReport):
            for f in flags:
                if f not in rep.flags and rep.estimator in RATIO_ESTIMATORS:
                    rep.flags.append(f)
            rep.inputs["traces"] = [str(args.trace1), str(args.trace2)]
            body.append(rep.to_dict())
        else:
            body.append(rep)
    doc = {
        "reports": body,
        "config_hash": run.config_hash if run else None,
        "seed": pumped.seed,
        "software_version": __version__,
    }
    _dump(doc, out / "report.json")
    print(json.dumps(doc, indent=2, sort_keys=True, default=_plain))
    return EXIT_OK


def _calibrate_plain(estimators, pumped, unpumped):
    """Estimators on traces without a run configuration (regime unknown)."""
    mean_i1 = pumped.means[0] - (unpumped.means[0] if unpumped else 0.0)
    out = []
    for est in estimators:
        name = est["name"]
        try:
            if name in RATIO_ESTIMATORS:
                auto1 = pumped.auto1
                if unpumped is not None:
                    auto1 = subtract_background(auto1, unpumped.auto1)
                fn = estimate_ratio_spdc if name == RATIO_SPDC else estimate_ratio_stimulated
                if "M" not in est or "q1_mean" not in est:
                    raise ConfigError(f"{name} needs --M and --q1-mean without a config")
                rep = fn(pumped.cross, auto1, est["M"], est["q1_mean"], est.get("tau_eval", 0.0),
                         tau_avg=est.get("tau_avg"))
            else:
                fn = estimate_integrated_spdc if name == INTEGRATED_SPDC else estimate_integrated_stimulated
                rep = fn(pumped.cross, mean_i1)
        except (DataError, ConfigError):
            raise
        except TBCalError as exc:
            out.append({"estimator": name, "error": type(exc).__name__, "message": str(exc)})
            continue
        out.append(rep)
    return out


def cmd_sweep(args):
    run = load_config(args.config)
    out = _output_dir(run, args.out)
    progress = None
    if args.verbose:
        progress = lambda i, n: log.info("sweep job %d/%d", i, n)
    res = run_uncertainty_sweep(run, args.durations, args.repetitions, workers=args.threads,
                                progress=progress)
    path = Path(args.csv) if args.csv else out / "sweep.csv"
    text = res.to_csv(path)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_predict(args):
    run = load_config(args.config)
    acq = run.acquisition
    pred = predict(run.source, run.detector1, run.detector2, dt=acq.dt,
                   leading_order=args.leading_order)
    doc = dict(_resolved(run), prediction=pred.to_dict(), regime=run_regime(run))
    if args.lags_csv:
        lags = np.arange(-acq.max_lag, acq.max_lag + 1) * acq.dt
        table = np.column_stack([lags, pred.cross(lags), pred.auto1(lags), pred.auto2(lags)])
        np.savetxt(args.lags_csv, table, delimiter=",", fmt="%.17g",
                   header="lag_seconds,cross,auto1,auto2", comments="")
    print(json.dumps(doc, indent=2, sort_keys=True, default=_plain))
    return EXIT_OK


# -- entry point --------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="tbcal", description="Twin-beam detector calibration toolkit")
    p.add_argument("--version", action="version", version=f"tbcal {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--threads", type=int, default=1,
                   help="maximum worker processes (default 1); results do not depend on it")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate-config", help="check a config and print it resolved, with its hash")
    s.add_argument("config")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("simulate", help="write simulated traces for a config")
    s.add_argument("config")
    s.add_argument("--out", help="output directory (default: config output.directory)")
    s.add_argument("--events", action="store_true", help="also write the photon event file")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("calibrate", help="estimate eta2 <q2> from two traces")
    s.add_argument("trace1")
    s.add_argument("trace2")
    s.add_argument("--unpumped", nargs=2, metavar=("U1", "U2"), help="unpumped traces for background")
    s.add_argument("--config", help="run config supplying acquisition, estimators and regime")
    s.add_argument("--estimator", action="append", choices=ESTIMATORS,
                   help="estimator to run (repeatable; default from config or IntegratedSPDC)")
    s.add_argument("--M", type=float, help="excess noise factor of detector 1 (ratio estimators)")
    s.add_argument("--q1-mean", dest="q1_mean", type=float, help="mean charge of detector 1")
    s.add_argument("--tau-eval", dest="tau_eval", type=float, help="evaluation lag, s (default 0)")
    s.add_argument("--tau-avg", dest="tau_avg", type=float, help="half-width of the lag average, s")
    s.add_argument("--tau-max", dest="tau_max", type=float, help="largest lag, s")
    s.add_argument("--n-segments", dest="n_segments", type=int, help="number of blocks")
    s.add_argument("--out", help="output directory")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("sweep", help="uncertainty versus measurement time")
    s.add_argument("config")
    s.add_argument("--durations", type=float, nargs="+", required=True, help="measurement times, s")
    s.add_argument("--repetitions", type=int, default=30, help="repetitions per duration (default 30)")
    s.add_argument("--csv", help="output CSV path (default OUT/sweep.csv)")
    s.add_argument("--out", help="output directory")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("predict", help="print the analytic prediction for a config")
    s.add_argument("config")
    s.add_argument("--lags-csv", help="also write predicted curves on the record lag grid")
    s.add_argument("--leading-order", action="store_true", help="use leading-order auto-covariances")
    s.set_defaults(func=cmd_predict)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except TBCalError as exc:
        print(f"tbcal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"tbcal: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
