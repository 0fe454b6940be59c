"""``ftreg`` command line: simulate, fit, tune, evaluate, experiment.

Exit codes: 0 success, 1 computation failure, 2 invalid input or usage.
With ``--json-errors`` failures are also reported as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import secrets
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import io as fio
from .experiments import EXPERIMENTS, ExperimentSpec, run_experiment
from .selection import (
    OverParameterizedError,
    gcv_details,
    kfold_cv,
    rise,
    select_rank,
)
from .simulate import SimConfig, gen_dataset
from .solver import DivergenceError, FitConfig, RegressionData, UnderdeterminedError, fit, profiled_fit
from .spline import Grid, SplineSystem, midpoint_grid

log = logging.getLogger("ftreg")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers
def _threads(args, cfg: fio.RunConfig | None) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("FTREG_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"FTREG_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise UsageError("FTREG_THREADS must be positive")
        return n
    if cfg is not None and cfg.threads is not None:
        return cfg.threads
    return os.cpu_count() or 1


def _seed(args, cfg: fio.RunConfig | None) -> int:
    if args.seed is not None:
        return args.seed
    if cfg is not None and cfg.seed is not None:
        return cfg.seed
    seed = secrets.randbits(32)
    print(f"seed: {seed}")
    return seed


def _config(args) -> fio.RunConfig:
    return fio.load_run_config(args.config) if args.config else fio.RunConfig()


def _sim_config(cfg: fio.RunConfig, seed: int) -> SimConfig:
    s = cfg.sim
    return SimConfig(
        n=s.n, p=tuple(s.p), r=tuple(s.r), kl_terms=s.kl_terms, sigma_X=s.sigma_X, sigma_y=s.sigma_y,
        seed=seed, response=s.response, basis_scale=s.basis_scale,
        grid_points=None if s.grid_points is None else tuple(s.grid_points),
    )


def _out_dir(args, cfg: fio.RunConfig | None, fallback: Path | None = None) -> Path:
    out = args.out or (cfg.out if cfg else None) or fallback
    if out is None:
        raise UsageError("--out is required")
    return Path(out)


def _load_dataset(path: Path) -> tuple[RegressionData, np.ndarray, dict]:
    path = Path(path)
    if not path.is_dir():
        raise UsageError(f"dataset directory {path} does not exist")
    manifest = {}
    if (path / "manifest.json").exists():
        manifest = json.loads((path / "manifest.json").read_text())
    lower, upper = manifest.get("domain", [0.0, 1.0])
    X = fio.read_tensor(path / "X.ftrt")
    y = fio.read_vector(path / "y.csv", "y")
    times = fio.read_vector(path / "grid.csv", "t")
    grid = Grid(times, float(lower), float(upper))
    if X.shape[0] != y.size:
        raise UsageError(f"X holds {X.shape[0]} samples but y has {y.size}")
    if X.ndim < 2 or X.shape[1] != grid.size:
        raise UsageError(f"X functional extent {X.shape[1:2]} does not match the {grid.size}-point grid")
    return RegressionData.from_raw(X, y, grid), X, manifest


def _rank_arg(text: str | None, cfg: fio.RunConfig, shape) -> tuple[int, ...]:
    if text is not None:
        rank = fio.parse_rank(text)
    elif cfg.fit.rank is not None:
        rank = tuple(cfg.fit.rank)
    else:
        raise UsageError("--rank is required")
    if len(rank) != len(shape):
        raise UsageError(f"rank {rank} does not match the {len(shape)}-mode coefficient shape {tuple(shape)}")
    if any(r > p for r, p in zip(rank, shape)):
        raise UsageError(f"rank {rank} exceeds dimensions {tuple(shape)}")
    return rank


def _fit_options(args, cfg: fio.RunConfig) -> tuple[int, float]:
    max_iter = args.max_iter if args.max_iter is not None else cfg.fit.max_iter
    rel_tol = args.rel_tol if args.rel_tol is not None else cfg.fit.rel_tol
    if max_iter < 1 or rel_tol < 0:
        raise UsageError("--max-iter must be positive and --rel-tol non-negative")
    return max_iter, rel_tol


# --------------------------------------------------------------- commands
def cmd_simulate(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    sim = _sim_config(cfg, seed)
    out = _out_dir(args, cfg)
    ds = gen_dataset(sim)
    g = ds.data.grid
    files = {
        "X": fio.write_tensor(out / "X.ftrt", ds.X).name,
        "y": fio.write_vector(out / "y.csv", ds.y, "y").name,
        "grid": fio.write_vector(out / "grid.csv", g.points, "t").name,
        "truth": fio.write_tensor(out / "truth.ftrt", ds.truth.theta).name,
    }
    manifest = {"seed": seed, "domain": [g.lower, g.upper], "config": asdict(sim), "files": files}
    fio.write_json(out / "manifest.json", manifest)
    print(json.dumps({"seed": seed, "out": str(out), "files": files}))
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = _config(args)
    data, X, _ = _load_dataset(args.data)
    rank = _rank_arg(args.rank, cfg, data.shape)
    rho = args.rho if args.rho is not None else cfg.fit.rho
    max_iter, rel_tol = _fit_options(args, cfg)
    out = _out_dir(args, cfg, Path(args.data))
    system = SplineSystem(data.grid)
    fc = FitConfig(rank, rho, max_iter, rel_tol)
    diag: dict = {"rank": list(rank), "rho": rho}
    if args.covariates:
        header, M = fio.read_matrix(args.covariates)
        if M.shape[0] != data.n:
            raise UsageError(f"{M.shape[0]} covariate rows for {data.n} samples")
        if not args.no_intercept and not np.allclose(M[:, 0], 1.0):
            raise UsageError("first covariate column must be an all-ones intercept (or pass --no-intercept)")
        prof = profiled_fit(data, M, system, fc)
        res = prof.result
        diag.update(gamma=dict(zip(header, prof.gamma.tolist())), outer_iterations=prof.outer_iterations,
                    profiled_objective_trace=prof.objective_trace)
    else:
        res = fit(data, system, fc)
    score = gcv_details(data, res, system, rho) if not args.covariates else None
    diag.update(
        iterations=res.iterations,
        converged=res.converged,
        lambda_min=res.spectral_gap,
        objective_trace=res.objective_trace,
        step_trace=res.step_trace,
        safeguard_events=res.safeguard_events,
        jitter_events=res.jitter_events,
    )
    if score is not None:
        diag.update(gcv=score.gcv, df=score.df, rss=score.rss)
    fio.write_tensor(out / "theta_hat.ftrt", res.theta)
    fio.write_json(out / "fit.json", diag)
    print(json.dumps({k: diag[k] for k in ("iterations", "converged", "lambda_min")}))
    return EXIT_OK


def cmd_tune(args) -> int:
    cfg = _config(args)
    data, _, _ = _load_dataset(args.data)
    max_iter, rel_tol = _fit_options(args, cfg)
    grid = fio.parse_rho_grid(args.rho_grid if args.rho_grid is not None else cfg.selection.rho_grid)
    if args.rank is not None:
        ranks = [_rank_arg(args.rank, cfg, data.shape)]
    else:
        ranks = fio.parse_ranks(args.ranks if args.ranks is not None else cfg.selection.ranks)
        for rk in ranks:
            _rank_arg(",".join(map(str, rk)), cfg, data.shape)
    truth = None
    if args.theta_true:
        truth = fio.read_tensor(args.theta_true)
    out = _out_dir(args, cfg, Path(args.data))
    system = SplineSystem(data.grid)
    best, report = select_rank(data, system, ranks, grid, truth=truth, max_iter=max_iter, rel_tol=rel_tol)
    fio.write_csv(out / "selection.csv", report.rows())
    chosen = report.best
    summary = {"rank": list(best), "rho": chosen.rho, "gcv": chosen.gcv, "df": chosen.df,
               "rise": chosen.rise, "candidates": len(report.candidates)}
    fio.write_json(out / "tune.json", summary)
    print(json.dumps(summary))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    result: dict = {}
    if args.theta_hat:
        if not args.theta_true:
            raise UsageError("--theta-hat needs --theta-true")
        a, b = fio.read_tensor(args.theta_hat), fio.read_tensor(args.theta_true)
        if a.shape != b.shape:
            raise UsageError(f"shape mismatch: {a.shape} vs {b.shape}")
        grid = _load_dataset(args.data)[0].grid if args.data else midpoint_grid(a.shape[0])
        result["rise"] = rise(a, b, SplineSystem(grid))
    if args.folds is not None:
        if not args.data:
            raise UsageError("--folds needs --data")
        data, _, _ = _load_dataset(args.data)
        rank = _rank_arg(args.rank, cfg, data.shape)
        rho = args.rho if args.rho is not None else cfg.fit.rho
        max_iter, rel_tol = _fit_options(args, cfg)
        seed = _seed(args, cfg)
        result.update(folds=args.folds, fold_seed=seed,
                      cv=kfold_cv(data, SplineSystem(data.grid), FitConfig(rank, rho, max_iter, rel_tol), args.folds, seed))
    if not result:
        raise UsageError("nothing to evaluate: give --theta-hat/--theta-true or --data with --folds")
    if args.out:
        fio.write_json(Path(args.out) / "evaluate.json", result)
    print(json.dumps(result))
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    name = args.name or cfg.experiment.name
    if name not in EXPERIMENTS:
        raise UsageError(f"unknown experiment {name!r}; expected one of {sorted(EXPERIMENTS)}")
    reps = args.replications or cfg.experiment.replications
    max_iter, rel_tol = _fit_options(args, cfg)
    grid = fio.parse_rho_grid(args.rho_grid if args.rho_grid is not None else cfg.selection.rho_grid)
    ranks = fio.parse_ranks(args.ranks if args.ranks is not None else cfg.selection.ranks)
    values = cfg.experiment.values
    if name == "rho_sweep" and values is None:
        values = list(grid) + [0.0]
    spec = ExperimentSpec(name, values=values, rho_grid=grid, ranks=ranks,
                          rho=args.rho if args.rho is not None else cfg.fit.rho,
                          max_iter=max_iter, rel_tol=rel_tol)
    out = _out_dir(args, cfg)
    res = run_experiment(name, _sim_config(cfg, seed), reps, spec, n_jobs=_threads(args, cfg))
    fio.write_csv(out / f"{name}.csv", res.rows, res.columns)
    fio.write_csv(out / f"{name}_summary.csv", res.summary)
    fio.write_json(out / f"{name}.json", {"seed": seed, "replications": reps, "failures": len(res.failures()),
                                         "config": cfg.to_dict()})
    print(json.dumps({"seed": seed, "rows": len(res.rows), "failures": len(res.failures()), "out": str(out)}))
    return EXIT_OK


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="master seed; a fresh one is drawn and printed if omitted")
    common.add_argument("--threads", type=int, help="worker count (overrides FTREG_THREADS)")
    common.add_argument("--json-errors", action="store_true", help="report failures as JSON on stderr")
    common.add_argument("-v", "--verbose", action="store_true")

    fitting = argparse.ArgumentParser(add_help=False)
    fitting.add_argument("--data", help="dataset directory written by 'simulate'")
    fitting.add_argument("--rank", help="Tucker rank, e.g. 2,3,3")
    fitting.add_argument("--rho", type=float, help="roughness tuning parameter")
    fitting.add_argument("--max-iter", type=int, help="iteration cap (default 80)")
    fitting.add_argument("--rel-tol", type=float, help="relative step tolerance (default 1e-8)")

    p = argparse.ArgumentParser(prog="ftreg", description="Functional tensor regression by Riemannian Gauss-Newton.")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset")

    f = sub.add_parser("fit", parents=[common, fitting], help="fit at one rank and rho")
    f.add_argument("--covariates", help="CSV of scalar covariates for a profiled fit")
    f.add_argument("--no-intercept", action="store_true", help="covariate CSV has no leading ones column")

    t = sub.add_parser("tune", parents=[common, fitting], help="select rho (and rank) by GCV")
    t.add_argument("--rho-grid", help='e.g. "logspace(-12,-4,17)" or "1e-9,1e-8"')
    t.add_argument("--ranks", help='"table1" or "2,3,3;2,4,3"')
    t.add_argument("--theta-true", help="truth tensor file, adds RISE per candidate")

    e = sub.add_parser("evaluate", parents=[common, fitting], help="RISE against a truth, or K-fold CV")
    e.add_argument("--theta-hat", help="estimated coefficient tensor file")
    e.add_argument("--theta-true", help="true coefficient tensor file")
    e.add_argument("--folds", type=int, help="number of CV folds")

    x = sub.add_parser("experiment", parents=[common], help="run a Monte Carlo sweep")
    x.add_argument("--name", choices=sorted(EXPERIMENTS))
    x.add_argument("--replications", type=int)
    x.add_argument("--rho", type=float, help="fixed rho for the convergence sweep")
    x.add_argument("--rho-grid")
    x.add_argument("--ranks")
    x.add_argument("--max-iter", type=int)
    x.add_argument("--rel-tol", type=float)
    return p


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "tune": cmd_tune,
    "evaluate": cmd_evaluate,
    "experiment": cmd_experiment,
}

_USAGE_ERRORS = (UsageError, fio.ConfigError, fio.FormatError, FileNotFoundError, ValueError)
_COMPUTE_ERRORS = (OverParameterizedError, UnderdeterminedError, DivergenceError, np.linalg.LinAlgError, OSError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be positive")
    if getattr(args, "data", None) is not None:
        args.data = Path(args.data)
    try:
        return COMMANDS[args.command](args)
    except _COMPUTE_ERRORS + _USAGE_ERRORS as exc:
        # compute errors subclass ValueError in places, so test them first
        code = EXIT_FAIL if isinstance(exc, _COMPUTE_ERRORS) and not isinstance(exc, (FileNotFoundError, UsageError)) else EXIT_USAGE
        if args.json_errors:
            print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
        else:
            print(f"ftreg {args.command}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
