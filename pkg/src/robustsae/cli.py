"""Command-line interface: ``robustsae {fit,predict,mse,select-alpha,simulate}``.

Exit codes: 0 success, 2 bad input or configuration, 3 numerical failure,
4 finished with warnings.
"""
from __future__ import annotations

import argparse
import csv
import io as _io
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .fitting import FitConfig, FitResult, NonConvergenceError, fit_dpd, fit_ml
from .io import InputError, RunConfig, default_threads, format_number, load_config, read_input_table, write_table
from .model import ModelParams
from .mse import mse_bootstrap, mse_components, mse_naive, mse_plugin, select_alpha
from .predictors import predict
from .simulation import Scenario, SimReport, StudyError, run_mse_estimator_study, run_prediction_study

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_WARN = 0, 2, 3, 4

logger = logging.getLogger("robustsae")


class _Counter(logging.Handler):
    def __init__(self):
        super().__init__(logging.WARNING)
        self.count = 0

    def emit(self, record):
        self.count += 1


def _fit_config(cfg: RunConfig) -> FitConfig:
    return FitConfig(tol=cfg.tol, max_iter=cfg.max_iter, a_floor=cfg.a_floor)


def _require_seed(cfg: RunConfig, what: str) -> int:
    if cfg.seed is None:
        if os.environ.get("CI"):
            raise InputError(f"--seed is required for {what} when CI is set")
        return 0
    return cfg.seed


def _resolve_alpha(data, cfg: RunConfig, fconf: FitConfig):
    """Return ``(alpha, ml_fit)`` from either an explicit alpha or a c-percent rule."""
    ml = fit_ml(data, fconf)
    if cfg.c_percent is not None:
        if not ml.converged:
            raise NonConvergenceError("ML fit used for alpha selection did not converge")
        return select_alpha(data, cfg.c_percent, a_hat=ml.params.a), ml
    return float(cfg.alpha), ml


def _fit(data, cfg: RunConfig, method: str) -> FitResult:
    fconf = _fit_config(cfg)
    if method == "ml":
        return fit_ml(data, fconf)
    cfg.require_one_alpha()
    alpha, ml = _resolve_alpha(data, cfg, fconf)
    return ml if alpha == 0.0 else fit_dpd(data, alpha, fconf)


def _load_params(path, data):
    try:
        blob = json.loads(Path(path).read_text(encoding="utf-8"))
        beta = np.asarray(blob["beta"], dtype=float)
        params = ModelParams(beta, float(blob["a"]))
        alpha = float(blob.get("alpha", 0.0))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"cannot read fitted parameters: {exc}", path) from None
    if beta.shape != (data.p,):
        raise InputError(f"parameter file has {beta.size} coefficients, data have {data.p}", path)
    return params, alpha


def _emit(text: str, output):
    if output:
        Path(output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _table_text(columns: dict) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(columns))
    for row in zip(*columns.values()):
        w.writerow([format_number(v) for v in row])
    return buf.getvalue()


def _write_columns(columns: dict, output):
    if output:
        write_table(output, columns)
    else:
        sys.stdout.write(_table_text(columns))


def cmd_fit(cfg: RunConfig) -> int:
    data = read_input_table(cfg.input)
    method = (cfg.method or "ml").lower()
    if method not in ("ml", "dpd"):
        raise InputError(f"fit method must be ml or dpd, got {method!r}")
    res = _fit(data, cfg, method)
    se_beta = np.sqrt(np.diag(res.cov_beta))
    se_a = float(np.sqrt(res.var_a))
    order = np.argsort(res.weights, kind="stable")
    lines = [
        f"method      {method}",
        f"alpha       {res.alpha:.10g}",
        f"converged   {'yes' if res.converged else 'no'} ({res.iterations} iterations)",
        f"objective   {res.objective:.10g}",
        "",
        "parameter   estimate        std.err",
    ]
    for j, (b, s) in enumerate(zip(res.params.beta, se_beta)):
        lines.append(f"beta{j + 1:<7d} {b:<15.6g} {s:.6g}")
    lines.append(f"A           {res.params.a:<15.6g} {se_a:.6g}")
    if res.at_floor:
        lines.append("note: A estimate is at the lower bound")
    lines += ["", "weights s_i (ascending)"]
    lines += [f"  {data.area_ids[i]:<12s} {res.weights[i]:.6g}" for i in order]
    sys.stdout.write("\n".join(lines) + "\n")
    if cfg.output:
        blob = {
            "method": method,
            "alpha": res.alpha,
            "beta": res.params.beta.tolist(),
            "a": res.params.a,
            "se_beta": se_beta.tolist(),
            "se_a": se_a,
            "cov_beta": res.cov_beta.tolist(),
            "converged": res.converged,
            "iterations": res.iterations,
            "objective": res.objective,
            "at_floor": res.at_floor,
            "weights": [{"area_id": data.area_ids[i], "s": float(res.weights[i])} for i in order],
        }
        Path(cfg.output).write_text(json.dumps(blob, indent=2) + "\n", encoding="utf-8")
    if not res.converged:
        raise NonConvergenceError(f"{method} iteration did not converge")
    if res.at_floor:
        warnings.warn("A estimate is at the lower bound", RuntimeWarning)
    return EXIT_OK


def cmd_predict(cfg: RunConfig) -> int:
    data = read_input_table(cfg.input)
    method = (cfg.method or "eb").lower()
    if method not in ("eb", "dpeb", "geb", "sreb"):
        raise InputError(f"predict method must be one of eb, dpeb, geb, sreb; got {method!r}")
    if cfg.params:
        params, alpha = _load_params(cfg.params, data)
        if cfg.alpha is not None:
            alpha = cfg.alpha
    elif method == "dpeb":
        res = _fit(data, cfg, "dpd")
        if not res.converged:
            raise NonConvergenceError("DPD iteration did not converge")
        params, alpha = res.params, res.alpha
    else:
        res = fit_ml(data, _fit_config(cfg))
        if not res.converged:
            raise NonConvergenceError("ML iteration did not converge")
        params, alpha = res.params, 0.0
    pred = predict(data, params, method, alpha=alpha, k=cfg.k)
    resid = (data.y - data.x @ params.beta) / np.sqrt(params.a + data.d)
    cols = {
        "area_id": list(data.area_ids),
        "direct": data.y,
        "estimate": pred.theta_hat,
        "shrink_weight": pred.shrink_weight,
        "standardized_residual": resid,
    }
    if pred.flags is not None:
        cols["flags"] = ["no_bracket" if f else "" for f in pred.flags]
        if np.any(pred.flags):
            warnings.warn(f"{int(np.sum(pred.flags))} areas used the fallback estimate", RuntimeWarning)
    _write_columns(cols, cfg.output)
    return EXIT_OK


def cmd_mse(cfg: RunConfig) -> int:
    data = read_input_table(cfg.input)
    variant = cfg.variant.lower()
    if variant not in ("naive", "plugin", "bootstrap"):
        raise InputError(f"variant must be naive, plugin or bootstrap; got {variant!r}")
    if cfg.alpha is None and cfg.c_percent is None:
        cfg = cfg.merged({"alpha": 0.0})
    res = _fit(data, cfg, "dpd")
    if not res.converged:
        raise NonConvergenceError("parameter fit did not converge")
    flags = [""] * data.m
    if variant == "bootstrap":
        seed = _require_seed(cfg, "bootstrap MSE")
        rep = mse_bootstrap(data, res, res.alpha, cfg.b, seed, g5_method=cfg.g5_method)
        comp, est = rep.components, rep.bootstrap
        flags = [
            ";".join(f for f in ("clamped" if c else "", f"boot_failures={rep.failures}" if rep.failures else "") if f)
            for c in rep.clamped
        ]
        if np.any(rep.clamped):
            warnings.warn(f"{int(rep.clamped.sum())} MSE estimates clamped at 1e-3 x naive", RuntimeWarning)
    else:
        comp = mse_components(data, res.params, res.alpha)
        est = mse_naive(comp) if variant == "naive" else mse_plugin(comp, data.m)
    cols = {"area_id": list(data.area_ids)}
    for name in ("g1", "g2", "g3", "g4", "g5"):
        cols[name] = getattr(comp, name)
    cols["mse_estimate"] = est
    cols["flags"] = flags
    _write_columns(cols, cfg.output)
    return EXIT_OK


def cmd_select_alpha(cfg: RunConfig) -> int:
    data = read_input_table(cfg.input)
    if cfg.c_percent is None:
        raise InputError("select-alpha needs --c")
    ml = fit_ml(data, _fit_config(cfg))
    if not ml.converged:
        raise NonConvergenceError("ML iteration did not converge")
    sel = select_alpha(data, cfg.c_percent, a_hat=ml.params.a, full_output=True)
    text = (
        f"alpha       {format_number(sel.alpha)}\n"
        f"excess_mse  {format_number(sel.excess)}\n"
        f"target      {format_number(cfg.c_percent / 100.0)}\n"
        f"a_ml        {format_number(sel.a_hat)}\n"
        f"iterations  {sel.iterations}\n"
    )
    _emit(text, cfg.output)
    return EXIT_OK


def _scenario(spec: dict, tag) -> Scenario:
    kw = {k: spec[k] for k in ("m", "beta", "a", "d_pattern", "covariate_seed") if k in spec}
    return Scenario(str(tag), **kw)


def cmd_simulate(cfg: RunConfig) -> int:
    if not cfg.input:
        raise InputError("simulate needs a scenario spec file")
    spec = load_config(cfg.input)
    if cfg.seed is None and spec.get("seed") is not None:
        cfg = cfg.merged({"seed": spec["seed"]})
    seed = _require_seed(cfg, "simulate")
    studies = spec.get("study", "prediction")
    studies = [studies] if isinstance(studies, str) else list(studies)
    bad = set(studies) - {"prediction", "mse"}
    if bad:
        raise InputError(f"unknown study {sorted(bad)}", cfg.input)
    out = Path(cfg.output or "simulation_out")
    out.mkdir(parents=True, exist_ok=True)
    n_jobs = cfg.threads if cfg.threads is not None else default_threads()
    fconf = _fit_config(cfg)
    tags = spec.get("scenarios", ["I"])
    for study in studies:
        reports = []
        for tag in tags:
            if study == "prediction":
                s = _scenario(spec, tag)
                rep = run_prediction_study(
                    s, r=int(spec.get("r", 1000)), seed=seed, c_values=tuple(spec.get("c_values", (1.0, 5.0))),
                    k=float(spec.get("k", cfg.k)), config=fconf, n_jobs=n_jobs,
                )
            else:
                s = _scenario({"m": 20, **spec, **spec.get("mse", {})}, tag)
                rep = run_mse_estimator_study(
                    s, variants=tuple(spec.get("variants", ("nMSE", "pMSE", "bMSE"))),
                    outer=int(spec.get("outer", 500)), truth_r=int(spec.get("truth_r", 2000)), seed=seed,
                    c_percent=float(spec.get("c_percent", 5.0)), b=int(spec.get("b", cfg.b)), config=fconf,
                    n_jobs=n_jobs, cache_dir=spec.get("cache_dir"),
                )
            reports.append(rep)
        frame = pd.concat([r.frame for r in reports], ignore_index=True)
        combined = SimReport(frame, {"study": study, "seed": seed, "runs": [r.meta for r in reports]})
        combined.to_csv(out / f"{study}.csv")
        (out / f"{study}.txt").write_text(combined.table() + "\n", encoding="utf-8")
        (out / f"{study}_meta.json").write_text(json.dumps(combined.meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        sys.stdout.write(combined.table() + "\n")
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "predict": cmd_predict,
    "mse": cmd_mse,
    "select-alpha": cmd_select_alpha,
    "simulate": cmd_simulate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file with default settings (flags override it)")
    common.add_argument("--seed", type=int, help="master RNG seed")
    common.add_argument("--threads", type=int, help="worker processes (default from ROBUSTSAE_THREADS, else 1)")
    common.add_argument("-o", "--output", help="output file (directory for simulate)")
    common.add_argument("-q", "--quiet", action="store_true", help="suppress warning messages")
    common.add_argument("--tol", type=float)
    common.add_argument("--max-iter", type=int)

    def alpha_opts(p):
        g = p.add_mutually_exclusive_group()
        g.add_argument("--alpha", type=float, help="DPD tuning constant in [0, 1)")
        g.add_argument("--c", dest="c_percent", type=float, help="choose alpha for this excess MSE percentage")

    parser = argparse.ArgumentParser(prog="robustsae", description="Robust empirical Bayes small-area estimation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", parents=[common], help="estimate beta and A")
    p.add_argument("input", nargs="?")
    p.add_argument("--method", choices=["ml", "dpd"])
    alpha_opts(p)

    p = sub.add_parser("predict", parents=[common], help="per-area predictions")
    p.add_argument("input", nargs="?")
    p.add_argument("--method", choices=["eb", "dpeb", "geb", "sreb"])
    p.add_argument("--params", help="JSON written by 'fit -o'; skips refitting")
    p.add_argument("--k", type=float, help="Huber tuning constant")
    alpha_opts(p)

    p = sub.add_parser("mse", parents=[common], help="per-area MSE estimates")
    p.add_argument("input", nargs="?")
    p.add_argument("--variant", choices=["naive", "plugin", "bootstrap"])
    p.add_argument("--b", type=int, help="bootstrap replicates")
    p.add_argument("--g5-method", choices=["analytic", "bootstrap"])
    alpha_opts(p)

    p = sub.add_parser("select-alpha", parents=[common], help="alpha from the excess-MSE rule")
    p.add_argument("input", nargs="?")
    p.add_argument("--c", dest="c_percent", type=float)

    p = sub.add_parser("simulate", parents=[common], help="run Monte-Carlo studies from a YAML spec")
    p.add_argument("input", nargs="?", help="scenario spec (YAML)")
    return parser


def _config(args) -> RunConfig:
    base = RunConfig()
    if args.config:
        base = RunConfig.from_mapping(load_config(args.config), args.config)
    skip = {"command", "config", "quiet"}
    overrides = {k: v for k, v in vars(args).items() if k not in skip}
    if overrides.get("alpha") is not None:
        base.c_percent = None
    if overrides.get("c_percent") is not None:
        base.alpha = None
    cfg = base.merged(overrides)
    if cfg.input is None:
        raise InputError("no input file given")
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    counter = _Counter()
    logger.addHandler(counter)
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            with np.errstate(over="ignore", under="ignore"):
                code = COMMANDS[args.command](_config(args))
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NonConvergenceError, StudyError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    finally:
        logger.removeHandler(counter)
    if caught and not args.quiet:
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
    if caught or counter.count:
        return EXIT_WARN
    return code


if __name__ == "__main__":
    sys.exit(main())
