"""Command-line entry point: ``vlcurve simulate|fit|sweep-d|experiment``.

Failures print one JSON object to stderr and exit nonzero: 2 for usage
errors, 1 for anything that goes wrong while running.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import io as vio
from .em import DmaxSweep, FitConfig, FitError, SweepEntry, estimate, select_d
from .evaluation import (
    d_sensitivity,
    d_sensitivity_rows,
    replicate_experiment,
    semisynthetic_scenario,
    synthetic_scenario,
)
from .model import (
    AR1Covariance,
    Dataset,
    FullCovariance,
    OnsetWeights,
    TrajectoryParams,
    ct_inverse,
)
from .mstep import Unconstrained, Unimodal, UnimodalGamma
from .simulate import (
    SyntheticTruth,
    parse_gap_law,
    preset_truth,
    simulate_multiplicities,
    simulate_synthetic,
)

logger = logging.getLogger("vlcurve")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _counts(text):
    out = {}
    for item in text.split(","):
        m, _, c = item.partition("=")
        try:
            out[int(m)] = int(c)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected M=COUNT pairs, got {item!r}") from None
    return out


def _add_fit_flags(p, experiment=False):
    g = p.add_argument_group("model")
    g.add_argument("--mean-constraint", choices=("unconstrained", "unimodal", "gamma"),
                   default=None if experiment else "unconstrained")
    g.add_argument("--dmax", help="peak day for the unimodal constraint, or 'sweep'")
    g.add_argument("--cov", choices=("full", "ar1", "linear"), default=None if experiment else "full")
    g.add_argument("--basis-file", type=Path, help="linear covariance basis spec")
    g.add_argument("--starts", type=int, default=None if experiment else 5)
    g.add_argument("--max-iter", type=int, default=500)
    g.add_argument("--tol", type=float, default=None if experiment else 1e-8)
    if not experiment:
        g.add_argument("--ct", action="store_true", help="values are Ct; drop rows >= ceiling and use ceiling - Ct")
        g.add_argument("--ceiling", type=float, default=40.0)
        g.add_argument("--max-gap", type=int, help="exclude subjects with a larger gap (default d-1)")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vlcurve", description="Mean trajectories from measurements with unknown time origins.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="draw a dataset from a known truth")
    s.add_argument("--preset", choices=("paper", "file"), default="paper")
    s.add_argument("--truth-file", type=Path, help="JSON truth for --preset file")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--m", type=int, default=None, help="measurements per subject")
    s.add_argument("--counts", type=_counts, help="subjects per multiplicity, e.g. 2=6000,3=580,4=89")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--gap-law", default=None, help="uniform:LO:HI, decreasing or categorical:1=0.5,2=0.5")
    s.add_argument("--ct", action="store_true", help="write ceiling - value instead of the value")
    s.add_argument("--out", type=Path, required=True, help="dataset CSV path")

    f = sub.add_parser("fit", help="fit one model")
    f.add_argument("--data", type=Path, required=True)
    f.add_argument("--d", type=int, required=True)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", type=Path, required=True, help="report directory")
    _add_fit_flags(f)

    w = sub.add_parser("sweep-d", help="fit at several d and select by likelihood per measurement")
    w.add_argument("--data", type=Path, required=True)
    w.add_argument("--d-list", type=_int_list, default=[7, 10, 14, 20])
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--out", type=Path, required=True, help="report directory")
    _add_fit_flags(w)

    e = sub.add_parser("experiment", help="replicate simulation study")
    e.add_argument("--setting", choices=("synthetic", "semisynthetic"), default="synthetic")
    e.add_argument("--n-list", type=_int_list, default=[100, 1000])
    e.add_argument("--replicates", type=int, default=50)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--gap-law", default="uniform:1:14")
    e.add_argument("--marginals", type=Path, help="day,value CSV for the semisynthetic setting")
    e.add_argument("--d-list", type=_int_list, help="also fit each replicate of the smallest n at these d")
    e.add_argument("--workers", type=int, default=1, help="worker processes for the replicate fits")
    e.add_argument("--out-dir", type=Path, required=True)
    _add_fit_flags(e, experiment=True)
    return p


# -- config -------------------------------------------------------------------

def _mean_constraint(args, d):
    kind = args.mean_constraint
    if args.dmax is not None and kind != "unimodal":
        raise UsageError(f"--dmax requires --mean-constraint unimodal (got {kind})")
    if kind == "unconstrained":
        return Unconstrained()
    if kind == "gamma":
        return UnimodalGamma()
    if args.dmax is None or args.dmax == "sweep":
        return DmaxSweep(None)
    try:
        k = int(args.dmax)
    except ValueError:
        raise UsageError(f"--dmax must be an integer or 'sweep', got {args.dmax!r}") from None
    if not 1 <= k <= d:
        raise UsageError(f"--dmax {k} outside 1..{d}")
    return Unimodal(k)


def _basis(args, d):
    if args.basis_file is None:
        return None, None
    if args.cov != "linear":
        raise UsageError("--basis-file requires --cov linear")
    basis, labels = vio.read_basis_spec(args.basis_file, d)
    return tuple(basis), tuple(labels)


def build_config(args, d) -> FitConfig:
    if args.starts < 1 or args.max_iter < 1:
        raise UsageError("--starts and --max-iter must be at least 1")
    if not args.tol > 0:
        raise UsageError("--tol must be positive")
    basis, labels = _basis(args, d)
    return FitConfig(d=d, mean_constraint=_mean_constraint(args, d), cov_structure=args.cov, basis=basis,
                     basis_labels=labels, max_iter=args.max_iter, tol=args.tol, n_starts=args.starts,
                     seed=args.seed)


def _inputs(args):
    return [p for p in (getattr(args, "data", None), getattr(args, "basis_file", None),
                        getattr(args, "truth_file", None), getattr(args, "marginals", None)) if p is not None]


def _check_readable(paths):
    for p in paths:
        try:
            with open(p, "rb"):
                pass
        except OSError as exc:
            raise UsageError(f"cannot read {p}: {exc.strerror or exc}") from None


def _manifest(args, config, outputs, started, path):
    vio.RunManifest.create(args.command, config, args.seed, _inputs(args), outputs, started).write(path)


# -- simulate -----------------------------------------------------------------

def truth_from_file(path, gap_law=None, m=None) -> SyntheticTruth:
    """JSON truth: ``theta`` (d or 2d-1 values), ``q``, and ``cov`` or ``cov_matrix``.

    ``cov`` is ``{"structure": "ar1", "sigma2": .., "rho": ..}`` or
    ``{"structure": "full", "matrix": [[..]]}``.  A truth sidecar written by
    ``simulate`` is accepted as-is.
    """
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    q = OnsetWeights(obj["q"])
    d = q.d
    theta = np.asarray(obj["theta"], dtype=float)
    theta = TrajectoryParams.from_active(theta) if theta.size == d else TrajectoryParams(theta)
    cov_obj = obj.get("cov", {})
    if cov_obj.get("structure") == "ar1":
        cov = AR1Covariance(float(cov_obj["sigma2"]), float(cov_obj["rho"]))
    elif "matrix" in cov_obj:
        cov = FullCovariance(cov_obj["matrix"])
    elif "cov_matrix" in obj:
        cov = FullCovariance(obj["cov_matrix"])
    else:
        raise ValueError(f"{path}: no covariance given")
    law = parse_gap_law(gap_law or obj.get("gap_law", f"uniform:1:{d - 1}"), d)
    m = m or int(obj.get("m_per_subject", 2))
    return SyntheticTruth(theta, cov, q, law, m, dict(obj.get("metadata", {})))


def cmd_simulate(args):
    if args.preset == "file" and args.truth_file is None:
        raise UsageError("--preset file requires --truth-file")
    if args.preset == "paper" and args.truth_file is not None:
        raise UsageError("--truth-file requires --preset file")
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    if args.counts is not None and args.m is not None:
        raise UsageError("--counts and --m are mutually exclusive")
    started = vio.now_utc()
    if args.preset == "paper":
        law = parse_gap_law(args.gap_law, 14) if args.gap_law else None
        truth = preset_truth(law, args.m or 2)
    else:
        truth = truth_from_file(args.truth_file, args.gap_law, args.m)
    if args.counts:
        data, log = simulate_multiplicities(truth, args.counts, args.seed)
    else:
        data, log = simulate_synthetic(truth, args.n, args.seed)
    if args.ct:
        data = Dataset([replace(r, values=ct_inverse(r.values)) for r in data.records], data.dims)
    out = args.out
    sidecar = out.with_suffix(".truth.json")
    written = [vio.write_dataset(out, data),
               vio.write_truth(sidecar, truth, log, args.seed, len(data),
                               {"subject_id": [r.subject_id for r in data.records], "ct_scale": args.ct})]
    config = {"preset": args.preset, "n": len(data), "m": truth.m_per_subject, "counts": args.counts,
              "gap_law": truth.gap_law.describe(), "ct": args.ct}
    _manifest(args, config, written, started, out.with_suffix(".manifest.json"))
    return {"dataset": str(out), "truth": str(sidecar), "subjects": len(data)}


# -- fit ----------------------------------------------------------------------

def _read(args, d):
    return vio.read_dataset(args.data, d, ct_mode=args.ct, ceiling=args.ceiling, max_gap=args.max_gap)


def cmd_fit(args):
    started = vio.now_utc()
    config = build_config(args, args.d)
    data, excl = _read(args, args.d)
    if len(data) == 0:
        raise ValueError("no admissible subjects after exclusions")
    res = estimate(data, config)
    written = vio.write_fit_report(args.out, res, excl)
    _manifest(args, config.describe(), written, started, args.out / "manifest.json")
    return {"out": str(args.out), "loglik": res.loglik, "converged": res.converged}


def cmd_sweep_d(args):
    started = vio.now_utc()
    entries, written, configs = [], [], {}
    for d in args.d_list:
        config = build_config(args, d)
        data, excl = _read(args, d)
        if len(data) == 0:
            raise ValueError(f"no admissible subjects at d={d}")
        res = estimate(data, config)
        entries.append(SweepEntry(d, len(data), excl.n_excluded, data.n_measurements, res.loglik,
                                  res.loglik_per_measurement, res))
        written += vio.write_fit_report(args.out / f"d_{d}", res, excl)
        configs[str(d)] = config.describe()
        logger.info("d=%d loglik=%.6f", d, res.loglik)
    sweep = select_d(entries)
    rows = [(e.d, e.n_records, e.n_excluded, e.n_measurements, e.loglik, e.loglik_per_measurement,
             int(e.d == sweep.selected_d)) for e in entries]
    written.append(vio.write_csv(args.out / "selection.csv",
                                 ("d", "n_records", "n_excluded", "n_measurements", "loglik",
                                  "loglik_per_measurement", "selected"), rows))
    written.append(vio.write_json(args.out / "selection.json",
                                  {"selected_d": sweep.selected_d, "criterion": "loglik_per_measurement"}))
    _manifest(args, configs, written, started, args.out / "manifest.json")
    return {"out": str(args.out), "selected_d": sweep.selected_d}


# -- experiment ---------------------------------------------------------------

def _experiment_defaults(args):
    args.mean_constraint = args.mean_constraint or "gamma"
    args.cov = args.cov or ("ar1" if args.setting == "synthetic" else "linear")
    args.starts = args.starts or 1
    args.tol = args.tol or 1e-7
    return args


def _marginals(path):
    if path is not None:
        return vio.read_marginals(path)
    ref = resources.files("vlcurve") / "data" / "standin_marginals.csv"
    with resources.as_file(ref) as p:
        return vio.read_marginals(p)


def cmd_experiment(args):
    if args.replicates < 1 or args.workers < 1:
        raise UsageError("--replicates and --workers must be at least 1")
    if args.marginals is not None and args.setting != "semisynthetic":
        raise UsageError("--marginals requires --setting semisynthetic")
    args = _experiment_defaults(args)
    started = vio.now_utc()
    d = 14
    law = parse_gap_law(args.gap_law, d)
    if args.setting == "synthetic":
        scenario = synthetic_scenario(preset_truth(law))
    else:
        scenario = semisynthetic_scenario(_marginals(args.marginals), law, d)
    config = build_config(args, d)

    def progress(*key):
        logger.info("done %s", key)

    result = replicate_experiment(scenario, args.n_list, args.replicates, config, args.seed, progress,
                                  workers=args.workers)
    out = args.out_dir
    written = [vio.write_nmse_table(out / "nmse.csv", result.nmse_rows())]
    summary = [(r.setting, p, r.n, r.replicates, getattr(r, p)) for r in result.reports() for p in ("theta", "cov", "q")]
    written.append(vio.write_csv(out / "nmse_summary.csv", ("setting", "parameter", "n", "replicates", "mean_nmse"), summary))
    for n in args.n_list:
        written.append(vio.write_overlay_table(out / f"overlay_n{n}.csv", result.overlay_rows(n)))
    written.append(vio.write_csv(out / "truth.csv", ("day", "theta"),
                                 [(k + 1, float(v)) for k, v in enumerate(scenario.theta[:d])]))
    if args.d_list:
        n = min(args.n_list)
        fits = d_sensitivity(scenario, n, args.replicates, args.d_list, config, args.seed, progress,
                             workers=args.workers)
        written.append(vio.write_csv(out / "d_sensitivity.csv",
                                     ("d", "replicate", "day", "theta_hat", "theta_true"), d_sensitivity_rows(fits)))
    manifest_config = {"setting": args.setting, "n_list": args.n_list, "replicates": args.replicates,
                       "gap_law": law.describe(), "d_list": args.d_list, "fit": config.describe()}
    _manifest(args, manifest_config, written, started, out / "manifest.json")
    return {"out_dir": str(out), "reports": [vars(r) for r in result.reports()]}


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "sweep-d": cmd_sweep_d, "experiment": cmd_experiment}


def _fail(kind, exc, code):
    record = {"error": kind, "type": type(exc).__name__, "message": str(exc), "exit_code": code}
    if isinstance(exc, vio.DatasetFormatError):
        record["line"] = exc.line
    print(json.dumps(record), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _check_readable(_inputs(args))
        result = COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    except (OSError, ValueError, FitError, RuntimeError, KeyError) as exc:
        return _fail("runtime", exc, 1)
    print(json.dumps(result, default=vio._jsonable))
    return 0


if __name__ == "__main__":
    sys.exit(main())
