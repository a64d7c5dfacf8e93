"""Command-line interface: CSV ingestion, estimator configuration, execution
and machine-readable JSON reporting.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .baselines import coca_grid_search, coca_ols_oneshot, did_estimate
from .crossfit import SemiparametricCoca, crossfit_estimate, median_adjust
from .data import Dataset
from .dgp import DgpSpec, generate
from .diagnostics import overid_test, sensitivity_curve
from .exceptions import (
    ConflictingOptions,
    MissingColumn,
    NumericalError,
    ParseError,
    UnknownFlag,
    ValidationError,
)
from .gmm import (
    DEFAULT_LAMBDA_CANDIDATES,
    MomentSpec,
    cv_select_lambda,
    default_basis,
    empty_odds_basis,
    fit_gmm,
    gmm_psi_influence,
)

DEFAULTS = {
    "k_folds": 2,
    "median_reps": 500,
    "bootstrap_b": 2000,
    "alpha_level": 0.05,
    "master_seed": 20231,
    "lam": "cv",
}

_GMM_ESTIMATORS = {"gmm-eps": "eps", "gmm-bridge": "bridge", "gmm-dr": "dr"}


@dataclass
class RunConfig:
    command: str
    input_csv: str = None
    y: str = None
    a: str = None
    w: list = field(default_factory=list)
    x: list = field(default_factory=list)
    estimator: str = "semiparametric"
    k_folds: int = DEFAULTS["k_folds"]
    median_reps: int = DEFAULTS["median_reps"]
    bootstrap_b: int = DEFAULTS["bootstrap_b"]
    alpha_level: float = DEFAULTS["alpha_level"]
    master_seed: object = DEFAULTS["master_seed"]
    lam: object = DEFAULTS["lam"]
    output: str = None
    options: dict = field(default_factory=dict)

    def echo(self) -> dict:
        d = {
            "command": self.command,
            "input_csv": self.input_csv,
            "columns": {"y": self.y, "a": self.a, "w": list(self.w),
                        "x": list(self.x)},
            "estimator": self.estimator,
            "k_folds": self.k_folds,
            "median_reps": self.median_reps,
            "bootstrap_b": self.bootstrap_b,
            "alpha_level": self.alpha_level,
            "master_seed": self.master_seed,
            "lambda": self.lam,
            "output": self.output,
        }
        d.update({k: v for k, v in sorted(self.options.items())})
        return d


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting so flag errors map to exit code 1."""

    def error(self, message):
        raise UnknownFlag(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="coca", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    def add_io(p, need_input=True):
        p.add_argument("--config", help="JSON file with option defaults")
        if need_input:
            p.add_argument("--input", dest="input_csv")
            p.add_argument("--y")
            p.add_argument("--a")
            p.add_argument("--w", nargs="+")
            p.add_argument("--x", nargs="*")
        p.add_argument("--output")
        p.add_argument("--seed", dest="master_seed")
        p.add_argument("--alpha", dest="alpha_level", type=float)

    est = sub.add_parser("estimate", help="fit a treated-effect estimator")
    add_io(est)
    est.add_argument("--estimator", choices=["semiparametric", "gmm-eps",
                                             "gmm-bridge", "gmm-dr"])
    est.add_argument("--k-folds", dest="k_folds", type=int)
    est.add_argument("--median-reps", dest="median_reps", type=int)
    est.add_argument("--bootstrap-b", dest="bootstrap_b", type=int)
    est.add_argument("--lambda", dest="lam")
    est.add_argument("--lambda-grid", dest="lambda_grid",
                     help="comma-separated penalty candidates for CV")
    est.add_argument("--cv-folds", dest="cv_folds", type=int,
                     help="groups for the penalty cross-validation (use "
                          "--loo for exact leave-one-out)")
    est.add_argument("--loo", action="store_const", const=True, dest="loo")
    est.add_argument("--odds-basis", dest="odds_basis",
                     choices=["default", "empty"])
    est.add_argument("--risk", choices=["v_statistic", "projected"])
    est.add_argument("--inner-folds", dest="inner_folds", type=int)
    est.add_argument("--hyper-odds", dest="hyper_odds",
                     help="JSON dict or 4-list of minimax hyperparameters")
    est.add_argument("--hyper-bridge", dest="hyper_bridge",
                     help="JSON dict or 4-list of minimax hyperparameters")
    est.add_argument("--no-remedy", action="store_const", const=True,
                     dest="no_remedy")

    sens = sub.add_parser("sensitivity", help="invalid-proxy sensitivity curve")
    add_io(sens)
    sens.add_argument("--grid", nargs="+", type=float,
                      help="explicit offset grid (sorted ascending)")
    sens.add_argument("--grid-start", dest="grid_start", type=float)
    sens.add_argument("--grid-stop", dest="grid_stop", type=float)
    sens.add_argument("--grid-num", dest="grid_num", type=int)
    sens.add_argument("--lambda", dest="lam")
    sens.add_argument("--crude-ci", dest="crude_ci", nargs=2, type=float)
    sens.add_argument("--csv-out", dest="csv_out",
                      help="write the (alpha_w, psi_hat) curve as CSV")

    over = sub.add_parser("overid", help="over-identification test")
    add_io(over)
    over.add_argument("--w-small", dest="w_small", nargs="+",
                      help="proxy subset known a priori to be valid")
    over.add_argument("--estimator", choices=["semiparametric", "gmm-eps",
                                              "gmm-bridge", "gmm-dr"])
    over.add_argument("--k-folds", dest="k_folds", type=int)
    over.add_argument("--lambda", dest="lam")
    over.add_argument("--hyper-odds", dest="hyper_odds")
    over.add_argument("--hyper-bridge", dest="hyper_bridge")

    sim = sub.add_parser("simulate", help="generate a synthetic dataset")
    add_io(sim, need_input=False)
    sim.add_argument("--kind", choices=["gaussian", "binary",
                                        "rank-preserving"])
    sim.add_argument("--n", type=int)
    sim.add_argument("--tau", type=float)

    did = sub.add_parser("did", help="difference-in-differences baseline")
    add_io(did)
    did.add_argument("--pre-period", dest="pre_period")

    legacy = sub.add_parser("legacy-coca", help="rank-preserving estimators")
    add_io(legacy)
    legacy.add_argument("--grid-start", dest="grid_start", type=float)
    legacy.add_argument("--grid-stop", dest="grid_stop", type=float)
    legacy.add_argument("--grid-num", dest="grid_num", type=int)
    return parser


_CORE_KEYS = {"input_csv", "y", "a", "w", "x", "estimator", "k_folds",
              "median_reps", "bootstrap_b", "alpha_level", "master_seed",
              "lam", "output"}
_OPTION_KEYS = {"lambda_grid", "cv_folds", "loo", "odds_basis", "risk",
                "inner_folds", "hyper_odds", "hyper_bridge", "no_remedy",
                "grid", "grid_start", "grid_stop", "grid_num", "crude_ci",
                "csv_out", "w_small", "kind", "n", "tau", "pre_period"}


def parse_config(argv) -> RunConfig:
    """Parse flags plus an optional JSON config file.

    Precedence: command-line flags override file values, which override the
    built-in defaults. Unknown keys in the file are rejected.
    """
    ns = _build_parser().parse_args(argv)
    cli_vals = {k: v for k, v in vars(ns).items()
                if k not in ("command", "config") and v is not None}

    file_vals = {}
    if getattr(ns, "config", None):
        try:
            with open(ns.config, "r", encoding="utf-8") as fh:
                file_vals = json.load(fh)
        except FileNotFoundError:
            raise ValidationError(f"config file not found: {ns.config}")
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file is not valid JSON: {exc}")
        if not isinstance(file_vals, dict):
            raise ValidationError("config file must hold a JSON object")
        allowed = _CORE_KEYS | _OPTION_KEYS
        for key in file_vals:
            if key not in allowed:
                raise UnknownFlag(f"unknown config key {key!r}")

    merged = dict(file_vals)
    merged.update(cli_vals)

    config = RunConfig(command=ns.command)
    for key, val in merged.items():
        if key in _CORE_KEYS:
            setattr(config, key, val)
        else:
            config.options[key] = val

    _validate_config(config)
    return config


def _validate_config(config: RunConfig):
    needs_data = config.command in ("estimate", "sensitivity", "overid",
                                    "did", "legacy-coca")
    if needs_data:
        if not config.input_csv:
            raise MissingColumn("--input is required")
        for name in ("y", "a"):
            if not getattr(config, name):
                raise MissingColumn(f"--{name} is required")
        if not config.w:
            raise MissingColumn("--w requires at least one column")
        cols = [config.y, config.a] + list(config.w) + list(config.x or [])
        if len(set(cols)) != len(cols):
            raise ConflictingOptions("mapped columns must be distinct")
    if config.command == "simulate":
        if not config.output:
            raise MissingColumn("--output is required for simulate")
        if not config.options.get("kind"):
            raise MissingColumn("--kind is required for simulate")
        if not config.options.get("n"):
            raise MissingColumn("--n is required for simulate")
    if config.command == "overid" and not config.options.get("w_small"):
        raise MissingColumn("--w-small is required for overid")

    if config.k_folds is not None and int(config.k_folds) < 2:
        raise ConflictingOptions("k-folds must be at least 2")
    config.k_folds = int(config.k_folds)
    config.median_reps = int(config.median_reps)
    config.bootstrap_b = int(config.bootstrap_b)
    if config.median_reps < 1 or config.bootstrap_b < 0:
        raise ConflictingOptions("median-reps must be >= 1 and bootstrap-b >= 0")
    config.alpha_level = float(config.alpha_level)
    if not 0.0 < config.alpha_level < 1.0:
        raise ConflictingOptions("alpha must lie in (0, 1)")
    if isinstance(config.master_seed, str):
        if config.master_seed == "random":
            config.master_seed = int(np.random.SeedSequence().generate_state(1)[0])
        else:
            try:
                config.master_seed = int(config.master_seed)
            except ValueError:
                raise ConflictingOptions(
                    f"--seed must be an integer or 'random', got "
                    f"{config.master_seed!r}")
    if isinstance(config.lam, str) and config.lam != "cv":
        try:
            config.lam = float(config.lam)
        except ValueError:
            raise ConflictingOptions(
                f"--lambda must be a number or 'cv', got {config.lam!r}")


def load_csv(path: str, y: str, a: str, w: list, x: list) -> Dataset:
    """Parse the mapped columns of a headed CSV into a dataset.

    Any unparseable mapped cell is a hard error carrying its row number;
    unmapped columns are ignored.
    """
    x = list(x or [])
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path} is empty")
        index = {name: i for i, name in enumerate(header)}
        for col in [y, a] + list(w) + x:
            if col not in index:
                raise MissingColumn(f"column {col!r} not present in {path}")
        rows = list(reader)

    def parse_cell(row_i, row, col, binary=False):
        try:
            val = float(row[index[col]])
        except (ValueError, IndexError):
            raise ParseError(row_i, col, "not a decimal number")
        if binary and val not in (0.0, 1.0):
            raise ParseError(row_i, col, "treatment must be 0 or 1")
        return val

    n = len(rows)
    y_arr = np.empty(n)
    a_arr = np.empty(n)
    w_arr = np.empty((n, len(w)))
    x_arr = np.empty((n, len(x)))
    for i, row in enumerate(rows, start=2):  # header is line 1
        j = i - 2
        y_arr[j] = parse_cell(i, row, y)
        a_arr[j] = parse_cell(i, row, a, binary=True)
        for c, col in enumerate(w):
            w_arr[j, c] = parse_cell(i, row, col)
        for c, col in enumerate(x):
            x_arr[j, c] = parse_cell(i, row, col)
    return Dataset.from_arrays(y_arr, a_arr, w_arr, x_arr)


def _parse_hyper(text):
    if text is None:
        return None
    if isinstance(text, (dict, list, tuple)):
        return text if isinstance(text, dict) else tuple(text)
    parsed = json.loads(text)
    return parsed if isinstance(parsed, dict) else tuple(parsed)


def _gmm_spec(kind: str, config: RunConfig) -> MomentSpec:
    basis = default_basis()
    if config.options.get("odds_basis") == "empty":
        basis = empty_odds_basis(basis)
    return MomentSpec(kind, basis)


def _resolve_lambda(config: RunConfig, data, spec) -> float:
    if config.lam != "cv":
        return float(config.lam)
    grid = config.options.get("lambda_grid")
    if isinstance(grid, str):
        candidates = [float(v) for v in grid.split(",")]
    elif grid:
        candidates = [float(v) for v in grid]
    else:
        candidates = list(DEFAULT_LAMBDA_CANDIDATES)
    return cv_select_lambda(
        data, spec, candidates, seed=config.master_seed,
        cv_folds=int(config.options.get("cv_folds", 10)),
        loo=bool(config.options.get("loo", False)))


def _semiparametric(config: RunConfig, data: Dataset) -> SemiparametricCoca:
    model = SemiparametricCoca(
        k_folds=config.k_folds,
        n_reps=config.median_reps,
        alpha=config.alpha_level,
        seed=config.master_seed,
        hyper_odds=_parse_hyper(config.options.get("hyper_odds")),
        hyper_bridge=_parse_hyper(config.options.get("hyper_bridge")),
        risk=config.options.get("risk", "v_statistic"),
        inner_folds=int(config.options.get("inner_folds", 5)),
        use_ratio_remedy=not config.options.get("no_remedy", False),
        bootstrap_b=config.bootstrap_b,
    )
    return model.fit(data.y, data.a, data.w, data.x)


def _cmd_estimate(config: RunConfig) -> dict:
    data = load_csv(config.input_csv, config.y, config.a, config.w, config.x)
    if config.estimator == "semiparametric":
        model = _semiparametric(config, data)
        block = {
            "estimate": model.psi_hat_,
            "se": model.se_,
            "ci": list(model.ci_),
            "per_fold": model.result_.per_fold_psi.tolist(),
            "reps": [[r.psi_hat, r.sigma2_hat] for r in model.reps_],
            "bootstrap": model.bootstrap_,
            "diagnostics": {"fold_info": _jsonable(model.result_.fold_info)},
        }
    else:
        kind = _GMM_ESTIMATORS[config.estimator]
        spec = _gmm_spec(kind, config)
        lam = _resolve_lambda(config, data, spec)
        fit = fit_gmm(data, spec, lam=lam, seed=config.master_seed)
        z = _z(config.alpha_level)
        block = {
            "estimate": fit.psi_hat,
            "se": fit.psi_se,
            "ci": [fit.psi_hat - z * fit.psi_se, fit.psi_hat + z * fit.psi_se],
            "per_fold": None,
            "theta": fit.theta.tolist(),
            "lambda": lam,
            "diagnostics": {"flags": fit.flags, "objective": fit.objective},
        }
    return block


def _cmd_did(config: RunConfig) -> dict:
    data = load_csv(config.input_csv, config.y, config.a, config.w, config.x)
    pre = config.options.get("pre_period", "latest")
    if isinstance(pre, str) and pre.isdigit():
        pre = int(pre)
    res = did_estimate(data, pre_period=pre, alpha=config.alpha_level)
    return {"estimate": res.psi_hat, "se": res.se, "ci": list(res.ci),
            "per_fold": None, "diagnostics": {"pre_period": str(pre)}}


def _cmd_legacy(config: RunConfig) -> dict:
    data = load_csv(config.input_csv, config.y, config.a, config.w, config.x)
    fit = coca_ols_oneshot(data)
    z = _z(config.alpha_level)
    block = {
        "estimate": fit.psi_hat,
        "se": fit.se,
        "ci": [fit.psi_hat - z * fit.se, fit.psi_hat + z * fit.se],
        "per_fold": None,
        "diagnostics": {"unstable": fit.unstable, "beta": fit.beta.tolist()},
    }
    opts = config.options
    if opts.get("grid_start") is not None:
        grid = np.linspace(float(opts["grid_start"]), float(opts["grid_stop"]),
                           int(opts.get("grid_num", 101)))
        accepted = coca_grid_search(data, grid, alpha=config.alpha_level)
        block["accepted_set"] = accepted.tolist()
    return block


def _cmd_sensitivity(config: RunConfig) -> dict:
    data = load_csv(config.input_csv, config.y, config.a, config.w, config.x)
    opts = config.options
    if opts.get("grid") is not None:
        grid = np.asarray([float(v) for v in opts["grid"]])
    elif opts.get("grid_start") is not None:
        grid = np.linspace(float(opts["grid_start"]), float(opts["grid_stop"]),
                           int(opts.get("grid_num", 21)))
    else:
        raise ConflictingOptions("sensitivity requires --grid or --grid-start/stop")
    spec = _gmm_spec("eps", config)
    lam = _resolve_lambda(config, data, spec)
    crude = opts.get("crude_ci")
    curve = sensitivity_curve(data, spec, grid,
                              crude_ci=tuple(crude) if crude else None,
                              lam=lam, seed=config.master_seed,
                              alpha=config.alpha_level)
    if opts.get("csv_out"):
        with open(opts["csv_out"], "w", encoding="utf-8") as fh:
            fh.write(curve.to_csv())
    d = curve.to_dict()
    d.update({"estimate": None, "se": None, "ci": None, "per_fold": None,
              "lambda": lam, "diagnostics": {}})
    return d


def _cmd_overid(config: RunConfig) -> dict:
    data_large = load_csv(config.input_csv, config.y, config.a, config.w,
                          config.x)
    w_small = config.options["w_small"]
    for col in w_small:
        if col not in config.w:
            raise ConflictingOptions(
                f"--w-small column {col!r} must be among --w columns")
    data_small = load_csv(config.input_csv, config.y, config.a, w_small,
                          config.x)
    estimator = config.estimator or "semiparametric"
    if estimator == "semiparametric":
        if_pairs = []
        psis = []
        for data in (data_small, data_large):
            model = _semiparametric(config, data)
            psis.append(model.psi_hat_)
            if_pairs.append(model.result_.influence_values)
        res = overid_test(psis[0], psis[1], if_pairs[0], if_pairs[1],
                          alpha=config.alpha_level)
    else:
        kind = _GMM_ESTIMATORS[estimator]
        fits, ifs = [], []
        for data in (data_small, data_large):
            spec = _gmm_spec(kind, config)
            lam = _resolve_lambda(config, data, spec)
            fit = fit_gmm(data, spec, lam=lam, seed=config.master_seed)
            fits.append(fit)
            ifs.append(gmm_psi_influence(fit, data, spec))
        res = overid_test(fits[0].psi_hat, fits[1].psi_hat, ifs[0], ifs[1],
                          alpha=config.alpha_level)
    d = res.to_dict()
    d.update({"estimate": res.psi_large - res.psi_small, "se":
              float(np.sqrt(res.varsigma2 / len(data_large.y))),
              "ci": None, "per_fold": None, "diagnostics": {}})
    return d


def _cmd_simulate(config: RunConfig) -> dict:
    opts = config.options
    spec = DgpSpec(kind=opts["kind"], n=int(opts["n"]),
                   tau=float(opts.get("tau", 0.0)), seed=config.master_seed)
    out = generate(spec)
    if isinstance(out, tuple):
        data, fns = out
        truth = {"psi0_star": fns.psi0_star, "psi_star": fns.psi_star}
    else:
        data, truth = out, {"psi_star": spec.tau}

    header = (["y", "a"] + [f"w{i+1}" for i in range(data.d_w)]
              + [f"x{i+1}" for i in range(data.d_x)])
    with open(config.output, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(data.n):
            row = [repr(float(data.y[i])), int(data.a[i])]
            row += [repr(float(v)) for v in data.w[i]]
            row += [repr(float(v)) for v in data.x[i]]
            writer.writerow(row)
    sidecar = config.output + ".truth.json"
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump({"kind": opts["kind"], "n": int(opts["n"]),
                   "tau": float(opts.get("tau", 0.0)),
                   "seed": config.master_seed, **truth},
                  fh, sort_keys=True, indent=2)
        fh.write("\n")
    return {"estimate": None, "se": None, "ci": None, "per_fold": None,
            "rows_written": data.n, "sidecar": sidecar,
            "diagnostics": dict(truth)}


def _z(alpha: float) -> float:
    from scipy import stats
    return float(stats.norm.ppf(1.0 - alpha / 2.0))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    return obj

_COMMANDS = {
    "estimate": _cmd_estimate,
    "did": _cmd_did,
    "legacy-coca": _cmd_legacy,
    "sensitivity": _cmd_sensitivity,
    "overid": _cmd_overid,
    "simulate": _cmd_simulate,
}


def run(config: RunConfig) -> int:
    """Execute the configured command, write the JSON report, print a
    one-line summary, and map errors to exit codes."""
    started = time.time()
    try:
        block = _COMMANDS[config.command](config)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2

    report = {
        "config": config.echo(),
        "seed": config.master_seed,
        "wall_time": time.time() - started,
    }
    report.update(_jsonable(block))
    text = json.dumps(report, sort_keys=True, indent=2) + "\n"
    if config.output and config.command != "simulate":
        with open(config.output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)

    est = block.get("estimate")
    if est is not None:
        se = block.get("se")
        ci = block.get("ci")
        level = round(100 * (1 - config.alpha_level))
        if ci:
            print(f"ETT = {est:.4g} (SE {se:.4g}, {level}% CI "
                  f"[{ci[0]:.4g}, {ci[1]:.4g}])")
        else:
            print(f"ETT = {est:.4g} (SE {se:.4g})")
    return 0


def main(argv=None) -> int:
    try:
        config = parse_config(sys.argv[1:] if argv is None else argv)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
