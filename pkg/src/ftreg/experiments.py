"""Monte Carlo sweeps over the simulation design.

Every replication is an independent task with its own random streams, so
results do not depend on how tasks are scheduled.  A failing fit is recorded
in its row (``error`` column) and does not stop the sweep.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from joblib import Parallel, delayed

from .selection import TABLE1_RANKS, default_rho_grid, gcv_details, rise, select_rho
from .simulate import SimConfig, gen_dataset
from .solver import FitConfig, fit

COLUMNS = ["sweep_var", "replication", "gcv", "rise", "iterations", "converged"]
EXTRA = ["method", "rank", "rho", "rel_error", "df", "chosen", "error"]


@dataclass
class ExperimentSpec:
    name: str
    values: Sequence | None = None
    rho_grid: Sequence[float] | None = None
    ranks: Sequence[Sequence[int]] | None = None
    rho: float = 1e-9  # fixed rho for the convergence sweep
    max_iter: int = 80
    rel_tol: float = 1e-8


@dataclass
class ExperimentResult:
    name: str
    rows: list[dict]
    summary: list[dict]

    @property
    def columns(self) -> list[str]:
        return COLUMNS + EXTRA

    def failures(self) -> list[dict]:
        return [r for r in self.rows if r.get("error")]


def _row(sweep_var, rep, **kw) -> dict:
    row = {c: None for c in COLUMNS + EXTRA}
    row.update(sweep_var=sweep_var, replication=rep, gcv=math.nan, rise=math.nan, iterations=0, converged=False)
    row.update(kw)
    return row


def _rank_label(rank) -> str:
    return "x".join(str(int(r)) for r in rank)


def _tuned_rows(sweep_var, rep, ds, rank, spec: ExperimentSpec, method="functional") -> list[dict]:
    grid = default_rho_grid() if spec.rho_grid is None else spec.rho_grid
    rho, rep_ = select_rho(ds.data, ds.system, rank, grid, truth=ds.truth.theta,
                           max_iter=spec.max_iter, rel_tol=spec.rel_tol)
    b = rep_.best
    return [_row(sweep_var, rep, gcv=b.gcv, rise=b.rise, iterations=b.iterations, converged=b.converged,
                 method=method, rank=_rank_label(rank), rho=rho, df=b.df)]


def _plain_row(sweep_var, rep, ds, rank, rho, spec: ExperimentSpec, method) -> dict:
    res = fit(ds.data, ds.system, FitConfig(rank, rho, spec.max_iter, spec.rel_tol))
    score = gcv_details(ds.data, res, ds.system, rho)
    return _row(sweep_var, rep, gcv=score.gcv, rise=rise(res.theta, ds.truth.theta, ds.system),
                iterations=res.iterations, converged=res.converged, method=method,
                rank=_rank_label(rank), rho=rho, df=score.df)


# --------------------------------------------------------------- sweeps
def _convergence(config: SimConfig, rep: int, spec: ExperimentSpec) -> list[dict]:
    ds = gen_dataset(config, replication=rep)
    res = fit(ds.data, ds.system, FitConfig(config.r, spec.rho, spec.max_iter, spec.rel_tol), truth=ds.truth.theta)
    final = rise(res.theta, ds.truth.theta, ds.system)
    return [
        _row(k, rep, rise=final, iterations=res.iterations, converged=res.converged, rel_error=e,
             method="functional", rank=_rank_label(config.r), rho=spec.rho)
        for k, e in enumerate(res.error_trace)
    ]


def _rho_sweep(config: SimConfig, rep: int, spec: ExperimentSpec) -> list[dict]:
    ds = gen_dataset(config, replication=rep)
    grid = list(spec.values if spec.values is not None else np.concatenate([default_rho_grid(), [0.0]]))
    _, report = select_rho(ds.data, ds.system, config.r, grid, truth=ds.truth.theta,
                           max_iter=spec.max_iter, rel_tol=spec.rel_tol)
    rows = []
    for i, c in enumerate(report.candidates):
        rows.append(_row(c.rho, rep, gcv=c.gcv, rise=c.rise if c.rise is not None else math.nan,
                         iterations=c.iterations, converged=c.converged, method="functional",
                         rank=_rank_label(c.rank), rho=c.rho, df=c.df, chosen=i == report.chosen,
                         error=c.error))
    return rows


def _with_tabular(sweep_var, rep, ds, config, spec) -> list[dict]:
    rows = _tuned_rows(sweep_var, rep, ds, config.r, spec)
    rows.append(_plain_row(sweep_var, rep, ds, config.r, 0.0, spec, "tabular"))
    return rows


def _sigma_sweep(config: SimConfig, rep: int, spec: ExperimentSpec, value) -> list[dict]:
    cfg = config.with_(sigma_y=float(value))
    return _with_tabular(float(value), rep, gen_dataset(cfg, replication=rep), cfg, spec)


def _n_sweep(config: SimConfig, rep: int, spec: ExperimentSpec, value) -> list[dict]:
    cfg = config.with_(n=int(value))
    return _tuned_rows(int(value), rep, gen_dataset(cfg, replication=rep), cfg.r, spec)


def _p0_sweep(config: SimConfig, rep: int, spec: ExperimentSpec, value) -> list[dict]:
    p0 = int(value)
    cfg = config.with_(p=(p0,) + tuple(config.p[1:]), r=(min(config.r[0], p0),) + tuple(config.r[1:]), grid_points=None)
    return _tuned_rows(p0, rep, gen_dataset(cfg, replication=rep), cfg.r, spec)


def _rank_table(config: SimConfig, rep: int, spec: ExperimentSpec) -> list[dict]:
    ds = gen_dataset(config, replication=rep)
    ranks = spec.ranks if spec.ranks is not None else TABLE1_RANKS
    rows = []
    for rank in ranks:
        try:
            rows.extend(_tuned_rows(_rank_label(rank), rep, ds, rank, spec))
        except Exception as exc:  # noqa: BLE001 - recorded, sweep continues
            rows.append(_row(_rank_label(rank), rep, rank=_rank_label(rank), error=f"{type(exc).__name__}: {exc}"))
    scores = [r["gcv"] if np.isfinite(r["gcv"]) else np.inf for r in rows]
    best = int(np.argmin(scores))
    for i, r in enumerate(rows):
        r["chosen"] = i == best and np.isfinite(scores[best])
    return rows


EXPERIMENTS: dict[str, tuple[Callable, tuple | None]] = {
    "convergence": (_convergence, None),
    "rho_sweep": (_rho_sweep, None),
    "sigma_sweep": (_sigma_sweep, (0.02, 0.04, 0.06, 0.08, 0.1)),
    "n_sweep": (_n_sweep, (125, 250, 500, 1000)),
    "p0_sweep": (_p0_sweep, (3, 6, 9, 12, 15, 18)),
    "rank_table": (_rank_table, None),
}


def _task(name, config, rep, spec, value):
    fn, values = EXPERIMENTS[name]
    label = value if values is not None else None
    try:
        if values is None:
            return fn(config, rep, spec)
        return fn(config, rep, spec, value)
    except Exception as exc:  # noqa: BLE001 - one failed replication is data, not a crash
        return [_row(label, rep, error=f"{type(exc).__name__}: {exc}")]


def summarize(rows: Sequence[dict]) -> list[dict]:
    """Mean, std and count of GCV and RISE per (sweep_var, method, rank)."""
    groups: dict[tuple, list[dict]] = defaultdict(list)
    order = []
    for r in rows:
        key = (r["sweep_var"], r.get("method"), r.get("rank"))
        if key not in groups:
            order.append(key)
        groups[key].append(r)
    out = []
    for key in order:
        g = groups[key]
        ok = [r for r in g if not r.get("error")]
        entry = {"sweep_var": key[0], "method": key[1], "rank": key[2], "count": len(ok), "failed": len(g) - len(ok)}
        for col in ("gcv", "rise", "rel_error", "iterations"):
            vals = np.array([r[col] for r in ok if r.get(col) is not None], dtype=float)
            vals = vals[np.isfinite(vals)]
            entry[f"{col}_mean"] = float(vals.mean()) if vals.size else math.nan
            entry[f"{col}_std"] = float(vals.std(ddof=1)) if vals.size > 1 else math.nan
        if any(r.get("chosen") is not None for r in g):
            entry["chosen_frac"] = float(np.mean([bool(r.get("chosen")) for r in g]))
        out.append(entry)
    return out


def run_experiment(
    name: str,
    config: SimConfig,
    replications: int,
    spec: ExperimentSpec | None = None,
    n_jobs: int = 1,
) -> ExperimentResult:
    if name not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {name!r}; expected one of {sorted(EXPERIMENTS)}")
    if replications < 1:
        raise ValueError("replications must be positive")
    spec = spec or ExperimentSpec(name)
    _, default_values = EXPERIMENTS[name]
    values = default_values if default_values is None or spec.values is None else tuple(spec.values)
    if values is None:
        tasks = [(rep, None) for rep in range(replications)]
    else:
        tasks = [(rep, v) for v in values for rep in range(replications)]
    chunks = Parallel(n_jobs=n_jobs)(delayed(_task)(name, config, rep, spec, v) for rep, v in tasks)
    rows = [r for chunk in chunks for r in chunk]
    return ExperimentResult(name, rows, summarize(rows))
