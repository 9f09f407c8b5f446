"""Command-line interface: ``mihe generate | train | detect | eval | experiment``.

Every command accepts ``--config FILE`` (JSON object keyed by option name,
with dashes or underscores); options given on the command line win. All
inputs are validated before any output file is written.

Exit codes: 0 success, 2 usage or validation error, 3 runtime or numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .core import NumericalError
from .data import DatasetError, load_dataset, load_spectral_library, manifest_metadata, resolve_manifest
from .detectors import METHODS, SingularCovarianceError, fit_background, score_dataset
from .estimator import MIHE, load_model, save_model
from .metrics import FPR, PER_M2, ScoreSet, auc, median_over_runs, nauc_at_far, read_scores, roc, write_roc, write_scores
from .simulate import generate, table1_config

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
JOBS_ENV = "MIHE_JOBS"
PRESETS = ("table1",)
UNIT_TOKENS = {"fpr": FPR, "per-m2": PER_M2}


class UsageError(Exception):
    """Invalid configuration; maps to exit code 2."""


def _default_jobs() -> int:
    raw = os.environ.get(JOBS_ENV, "1")
    try:
        jobs = int(raw)
    except ValueError:
        raise UsageError(f"{JOBS_ENV} must be an integer, got {raw!r}") from None
    if jobs < 1:
        raise UsageError(f"{JOBS_ENV} must be >= 1")
    return jobs


def _dump(path: Path, doc):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# shared option groups


def _add_train_options(p):
    g = p.add_argument_group("hyperparameters")
    g.add_argument("--n-targets", type=int, default=1, help="number of target signatures T")
    g.add_argument("--n-backgrounds", type=int, default=None,
                   help="background signatures M (default: from the dataset manifest, else 5)")
    g.add_argument("--p", type=float, default=5.0, help="generalized-mean exponent")
    g.add_argument("--rho", type=float, default=None, help="negative-bag weight (default min(1, N+/N-))")
    g.add_argument("--beta", type=float, default=5.0)
    g.add_argument("--lam", type=float, default=1e-3, help="l1 weight of the sparse codes")
    g.add_argument("--max-iter", type=int, default=100, help="outer iteration cap")
    g.add_argument("--step-size", type=float, default=0.1)
    g.add_argument("--tol", type=float, default=1e-6, help="objective-change stopping tolerance")
    g.add_argument("--ista-iter", type=int, default=200)
    g.add_argument("--ista-tol", type=float, default=1e-6)
    g.add_argument("--nonneg", action="store_true", help="nonnegative sparse codes")
    g.add_argument("--normalize", action="store_true", help="scale every instance to unit norm")
    g.add_argument("--ridge", type=float, default=1e-6, help="ridge on the ACE background covariance")
    g.add_argument("--seed", type=int, default=0, help="base seed; run r uses seed + r")


def _estimator(args, seed: int, n_backgrounds: int) -> MIHE:
    est = MIHE(n_targets=args.n_targets, n_backgrounds=n_backgrounds, p=args.p, rho=args.rho,
               beta=args.beta, lam=args.lam, max_iter=args.max_iter, step_size=args.step_size,
               tol=args.tol, ista_iter=args.ista_iter, ista_tol=args.ista_tol, nonneg=args.nonneg,
               normalize=args.normalize, ridge=args.ridge, random_state=seed)
    est.hyperparams()  # raises ValueError on invalid values
    return est


def _check_runs(args):
    if args.runs < 1:
        raise UsageError("--runs must be >= 1")
    if args.jobs is not None and args.jobs < 1:
        raise UsageError("--jobs must be >= 1")


def _map(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# generate


def _sim_config(args, seed, pt=None):
    endmembers = None
    if args.library is not None:
        lib = Path(args.library)
        if not lib.is_file():
            raise UsageError(f"endmember library not found: {lib}")
        try:
            endmembers = load_spectral_library(lib)
        except DatasetError as exc:
            raise UsageError(str(exc)) from None
    try:
        return table1_config(endmembers, target=args.target, confuser=args.confuser,
                             p_t_mean=args.pt_mean if pt is None else pt, snr_db=args.snr_db, seed=seed,
                             points_per_bag=args.points_per_bag,
                             targets_per_positive_bag=args.targets_per_bag)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_generate(args):
    config = _sim_config(args, args.seed)
    out = Path(args.out)
    path = generate(config).save(out)
    print(f"wrote {path}")


# --------------------------------------------------------------------------
# train


def _train_one(job):
    args, dataset, seed, m, out = job
    est = _estimator(args, seed, m).fit(dataset)
    wl = dataset.wavelengths
    save_model(est, out, wavelengths=wl)
    return est


def cmd_train(args):
    _check_runs(args)
    try:
        manifest = resolve_manifest(args.data)
        dataset = load_dataset(manifest)
        dataset.require_trainable()
        meta = manifest_metadata(manifest)
    except (FileNotFoundError, DatasetError) as exc:
        raise UsageError(str(exc)) from None
    m = args.n_backgrounds
    if m is None:
        m = len(meta.get("background_endmembers", [])) or 5
    try:
        _estimator(args, args.seed, m)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    if args.runs == 1:
        targets = [out]
    else:
        out.mkdir(parents=True, exist_ok=True)
        targets = [out / f"model_run{r + 1}.json" for r in range(args.runs)]
    seeds = [args.seed + r for r in range(args.runs)]
    if targets[0].parent != Path(""):
        targets[0].parent.mkdir(parents=True, exist_ok=True)
    jobs = [(args, dataset, s, m, t) for s, t in zip(seeds, targets)]
    fitted = _map(_train_one, jobs, args.jobs or _default_jobs())
    for est, seed, target in zip(fitted, seeds, targets):
        if args.trace:
            est.state_.write_trace(target.with_suffix(".trace.csv"))
        print(f"wrote {target} (seed {seed}, {est.n_iter_} iterations, objective {est.objective_history_[-1]:.6g})")
    if args.runs > 1:
        _dump(out / "runs.json", {
            "data": str(manifest),
            "runs": [{"run": r + 1, "seed": s, "model": t.name} for r, (s, t) in enumerate(zip(seeds, targets))],
        })


# --------------------------------------------------------------------------
# detect


def cmd_detect(args):
    if args.method not in METHODS:
        raise UsageError(f"unknown method {args.method!r}; valid methods: {', '.join(METHODS)}")
    try:
        est = load_model(args.model)
        data = load_dataset(args.data)
        if args.background is not None:
            bg_data = est.preprocess(load_dataset(args.background))
            negatives = bg_data.negative_bags or bg_data.bags
            est.background_model_ = fit_background(np.vstack([b.instances for b in negatives]), est.ridge)
    except (FileNotFoundError, DatasetError) as exc:
        raise UsageError(str(exc)) from None
    if data.n_bands != est.n_features_in_:
        raise UsageError(f"data has {data.n_bands} bands, model has {est.n_features_in_}")
    try:
        data = est.preprocess(data)
    except DatasetError as exc:
        raise UsageError(str(exc)) from None
    if args.method == "ace" and not hasattr(est, "background_model_"):
        raise UsageError("ACE needs a background model: the model file has none, pass --background")
    scores = score_dataset(data, args.method, est.dictionary_, getattr(est, "background_model_", None),
                           lam=est.lam, iters=est.ista_iter, tol=est.ista_tol, nonneg=est.nonneg,
                           chunk_size=args.chunk_size)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_scores(scores, out)
    print(f"wrote {out} ({len(scores)} rows)")


# --------------------------------------------------------------------------
# eval


def _evaluate(score_sets, units, far_max):
    rows = []
    for s in score_sets:
        row = {}
        if units == FPR:
            row["auc"] = auc(roc(s, FPR))
        if far_max is not None:
            row["nauc"] = nauc_at_far(s, far_max, units)
        rows.append(row)
    return rows


def cmd_eval(args):
    units = UNIT_TOKENS[args.units]
    if units == PER_M2 and args.area is None:
        raise UsageError("--units per-m2 needs --area")
    if args.area is not None and not args.area > 0:
        raise UsageError("--area must be positive")
    if args.nauc_far is not None and not args.nauc_far > 0:
        raise UsageError("--nauc-far must be positive")
    if units == PER_M2 and args.nauc_far is None:
        raise UsageError("--units per-m2 reports NAUC only; give --nauc-far")
    try:
        sets = [read_scores(p, args.area) for p in args.scores]
        for s in sets:
            s.require_both_classes()
    except (FileNotFoundError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    rows = _evaluate(sets, units, args.nauc_far)
    report = {
        "units": args.units,
        "runs": [dict(file=str(p), **r) for p, r in zip(args.scores, rows)],
    }
    if args.nauc_far is not None:
        report["nauc_far"] = args.nauc_far
    if args.area is not None:
        report["area_m2"] = args.area
    report["median"] = {k: median_over_runs(r[k] for r in rows) for k in rows[0]}
    if args.roc_out:
        roc_out = Path(args.roc_out)
        if len(sets) == 1:
            write_roc(roc(sets[0], units), roc_out)
        else:
            roc_out.mkdir(parents=True, exist_ok=True)
            for i, s in enumerate(sets):
                write_roc(roc(s, units), roc_out / f"roc_run{i + 1}.csv")
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


# --------------------------------------------------------------------------
# experiment


def _experiment_run(job):
    args, pt, run = job
    seed = args.seed + run
    config = _sim_config(args, seed, pt)
    train = generate(config)
    test = generate(_sim_config(args, seed + args.test_offset, pt))
    m = args.n_backgrounds or len(config.background_names)
    est = _estimator(args, seed, m).fit(train.dataset)
    X = test.dataset.instances()
    result = {"p_t_mean": pt, "run": run + 1, "seed": seed, "n_iter": est.n_iter_}
    for method in METHODS:
        result[method] = auc(roc(ScoreSet(est.decision_function(X, method), test.labels)))
    return result


def cmd_experiment(args):
    _check_runs(args)
    pts = args.pt_values
    for pt in pts:
        if not 0 < pt < 1:
            raise UsageError(f"p_t_mean values must lie in (0, 1), got {pt}")
    for pt in pts:
        _sim_config(args, args.seed, pt)
    try:
        _estimator(args, args.seed, args.n_backgrounds or 5)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    jobs = [(args, pt, r) for pt in pts for r in range(args.runs)]
    results = _map(_experiment_run, jobs, args.jobs or _default_jobs())
    summary = {}
    for method in METHODS:
        summary[method] = {str(pt): median_over_runs(r[method] for r in results if r["p_t_mean"] == pt)
                           for pt in pts}
    lines = [f"Median AUC over {args.runs} runs", "method      " + "".join(f"p_t={pt:<9g}" for pt in pts)]
    for method in METHODS:
        lines.append(f"MI-HE({method.upper()})".ljust(12) + "".join(f"{summary[method][str(pt)]:<13.4f}" for pt in pts))
    table = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _dump(out / "experiment.json", {"runs": results, "median_auc": summary})
        (out / "table.txt").write_text(table, encoding="utf-8")
    sys.stdout.write(table)


# --------------------------------------------------------------------------
# parser


def _add_sim_options(p, pt=True):
    p.add_argument("--preset", choices=PRESETS, default="table1", help="bag design")
    if pt:
        p.add_argument("--pt-mean", type=float, default=0.3, help="mean target proportion in (0, 1)")
    p.add_argument("--snr-db", type=float, default=30.0, help="signal-to-noise ratio in dB ('inf' disables noise)")
    p.add_argument("--library", default=None, help="CSV spectral library (wavelength column plus 4 spectra)")
    p.add_argument("--target", default=None, help="target endmember name in the library")
    p.add_argument("--confuser", default=None, help="endmember seen only in some positive bags")
    p.add_argument("--points-per-bag", type=int, default=500)
    p.add_argument("--targets-per-bag", type=int, default=100)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mihe", description="Multiple-instance target signature learning and detection.")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", default=None, help="JSON file of option defaults; command-line flags win")
        return p

    p = command("generate", "Simulate a bag-labeled dataset with ground truth.")
    _add_sim_options(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = command("train", "Learn target and background signatures.")
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--out", required=True, help="model file, or a directory when --runs > 1")
    p.add_argument("--runs", type=int, default=1, help="independent runs with seeds seed, seed+1, ...")
    p.add_argument("--jobs", type=int, default=None, help=f"parallel runs (default ${JOBS_ENV} or 1)")
    p.add_argument("--trace", action="store_true", help="write an objective trace next to each model")
    _add_train_options(p)
    p.set_defaults(func=cmd_train)

    p = command("detect", "Score every instance of a dataset.")
    p.add_argument("--method", required=True, help=f"detector: {', '.join(METHODS)}")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--background", default=None, help="dataset whose negative bags define the ACE background")
    p.add_argument("--chunk-size", type=int, default=None)
    p.add_argument("--out", required=True, help="score CSV")
    p.set_defaults(func=cmd_detect)

    p = command("eval", "AUC / NAUC of one or more score files; several files are summarized by the median.")
    p.add_argument("--scores", nargs="+", required=True)
    p.add_argument("--units", choices=sorted(UNIT_TOKENS), default="fpr")
    p.add_argument("--area", type=float, default=None, help="scene area in m^2 for per-m2 rates")
    p.add_argument("--nauc-far", type=float, default=None, help="false-alarm limit for the normalized partial AUC")
    p.add_argument("--roc-out", default=None, help="ROC CSV (a directory for several score files)")
    p.add_argument("--out", default=None, help="JSON report path")
    p.set_defaults(func=cmd_eval)

    p = command("experiment", "Train and test over several target proportions and runs; print median AUCs.")
    _add_sim_options(p, pt=False)
    p.add_argument("--pt-values", type=float, nargs="+", default=[0.3, 0.5, 0.7])
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--test-offset", type=int, default=1000, help="test data uses seed + offset")
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--out", default=None, help="directory for experiment.json and table.txt")
    _add_train_options(p)
    p.set_defaults(func=cmd_experiment)
    return parser


def _parse(parser, argv):
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    config = pre.parse_known_args(argv)[0].config
    commands = parser._subparsers._group_actions[0].choices
    name = next((a for a in argv if a in commands), None)
    if config is None or name is None:
        return parser.parse_args(argv)
    path = Path(config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    sub = commands[name]
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    unknown = sorted(set(cfg) - {a.dest for a in sub._actions} - {"config"})
    if unknown:
        raise UsageError(f"unknown keys in {path}: {', '.join(unknown)}")
    for action in sub._actions:
        if action.dest in cfg:
            action.required = False
    sub.set_defaults(**cfg)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _parse(parser, argv)
        args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UsageError, DatasetError, FileNotFoundError) as exc:
        print(f"mihe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, SingularCovarianceError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"mihe: numerical failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"mihe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
