"""Persistence: binary tensor files, CSV tables, JSON run configurations.

A tensor file is one line of JSON followed by the raw payload::

    {"magic": "FTRT1", "dims": [q0, q1, ...], "dtype": "f64", "layout": "mode0-fastest"}\\n
    <prod(dims) little-endian float64 values, mode 0 varying fastest>

All writers go through :func:`atomic_write`, so a failed write never leaves a
partial file behind.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

MAGIC = "FTRT1"
LAYOUT = "mode0-fastest"
_LE_F64 = np.dtype("<f8")


class FormatError(ValueError):
    """A file does not follow the expected format."""


class ConfigError(ValueError):
    """A run configuration fails validation."""


def atomic_write(path: str | os.PathLike, data: bytes) -> Path:
    """Write ``data`` to a sibling temporary file, then rename it over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise
    return path


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


# ------------------------------------------------------------------ tensors
def encode_tensor(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    if t.dtype.kind not in "fiu":
        raise TypeError(f"cannot store dtype {t.dtype}")
    header = {"magic": MAGIC, "dims": [int(q) for q in t.shape], "dtype": "f64", "layout": LAYOUT}
    payload = np.asarray(t, dtype=_LE_F64).tobytes(order="F")
    return json.dumps(header, separators=(",", ":")).encode() + b"\n" + payload


def decode_tensor(blob: bytes) -> np.ndarray:
    end = blob.find(b"\n")
    if end < 0:
        raise FormatError("missing tensor header")
    try:
        header = json.loads(blob[:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable tensor header: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError("tensor header must be a JSON object")
    if header.get("magic") != MAGIC:
        raise FormatError(f"bad magic {header.get('magic')!r}")
    if header.get("layout") != LAYOUT:
        raise FormatError(f"unsupported layout {header.get('layout')!r}")
    if header.get("dtype", "f64") != "f64":
        raise FormatError(f"unsupported dtype {header.get('dtype')!r}")
    dims = header.get("dims")
    if not isinstance(dims, list) or not all(isinstance(q, int) and q >= 0 for q in dims):
        raise FormatError("dims must be a list of non-negative integers")
    payload = blob[end + 1:]
    count = int(np.prod(dims, dtype=np.int64))
    if len(payload) != 8 * count:
        raise FormatError(f"payload holds {len(payload)} bytes, header declares {8 * count}")
    flat = np.frombuffer(payload, dtype=_LE_F64)
    return flat.reshape(dims, order="F").astype(float)


def write_tensor(path: str | os.PathLike, t: np.ndarray) -> Path:
    return atomic_write(path, encode_tensor(t))


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# --------------------------------------------------------------------- CSV
def _fmt(v: Any) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


def encode_csv(rows: Iterable[Mapping[str, Any]], columns: Sequence[str] | None = None) -> bytes:
    rows = list(rows)
    if columns is None:
        if not rows:
            raise ValueError("cannot infer CSV columns from an empty table")
        columns = list(rows[0].keys())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue().encode("utf-8")


def write_csv(path, rows: Iterable[Mapping[str, Any]], columns: Sequence[str] | None = None) -> Path:
    return atomic_write(path, encode_csv(rows, columns))


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty CSV (header row is mandatory)") from None
        return header, [r for r in reader if r]


def write_vector(path, values: np.ndarray, name: str) -> Path:
    return write_csv(path, ({name: float(v)} for v in np.ravel(values)), [name])


def read_vector(path, name: str | None = None) -> np.ndarray:
    header, rows = read_csv(path)
    col = 0 if name is None else header.index(name)
    try:
        return np.array([float(r[col]) for r in rows])
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: non-numeric or missing values in column {header[col]!r}") from exc


def read_matrix(path) -> tuple[list[str], np.ndarray]:
    header, rows = read_csv(path)
    try:
        m = np.array([[float(x) for x in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric entry") from exc
    if m.ndim != 2 or m.shape[1] != len(header):
        raise FormatError(f"{path}: rows do not match the {len(header)}-column header")
    return header, m


def write_json(path, obj: Any) -> Path:
    return atomic_write(path, (json.dumps(obj, indent=2, default=_json_default) + "\n").encode())


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# ------------------------------------------------------------- run config
@dataclass
class SimSection:
    n: int = 500
    p: list[int] = field(default_factory=lambda: [12, 8, 8])
    r: list[int] = field(default_factory=lambda: [2, 3, 3])
    kl_terms: int = 30
    sigma_X: float = 0.05
    sigma_y: float = 0.1
    response: str = "integral"
    grid_points: list[float] | None = None
    basis_scale: float = 1.4142135623730951


@dataclass
class FitSection:
    rank: list[int] | None = None
    rho: float = 1e-9
    max_iter: int = 80
    rel_tol: float = 1e-8


@dataclass
class SelectionSection:
    rho_grid: str | list[float] = "logspace(-12,-4,17)"
    ranks: str | list[list[int]] = "table1"
    folds: int = 10


@dataclass
class ExperimentSection:
    name: str = "rank_table"
    replications: int = 10
    values: list[float] | None = None


@dataclass
class RunConfig:
    seed: int | None = None
    threads: int | None = None
    out: str | None = None
    sim: SimSection = field(default_factory=SimSection)
    fit: FitSection = field(default_factory=FitSection)
    selection: SelectionSection = field(default_factory=SelectionSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {"sim": SimSection, "fit": FitSection, "selection": SelectionSection, "experiment": ExperimentSection}


def _check_keys(obj: Mapping, cls, where: str):
    if not isinstance(obj, Mapping):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


def _check_int(v, where: str, lo: int = 0, optional: bool = False):
    if v is None and optional:
        return
    if isinstance(v, bool) or not isinstance(v, int) or v < lo:
        raise ConfigError(f"{where}: expected an integer >= {lo}, got {v!r}")


def _check_num(v, where: str, lo: float = 0.0):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v) or v < lo:
        raise ConfigError(f"{where}: expected a finite number >= {lo}, got {v!r}")


def _check_ints(v, where: str, lo: int = 1):
    if not isinstance(v, list) or not v:
        raise ConfigError(f"{where}: expected a non-empty list of integers")
    for i, x in enumerate(v):
        _check_int(x, f"{where}[{i}]", lo)


def parse_run_config(obj: Mapping) -> RunConfig:
    """Validate a JSON document and build a :class:`RunConfig`; nothing is computed first."""
    _check_keys(obj, RunConfig, "config")
    top = {k: v for k, v in obj.items() if k not in _SECTIONS}
    _check_int(top.get("seed"), "seed", 0, optional=True)
    _check_int(top.get("threads"), "threads", 1, optional=True)
    if top.get("out") is not None and not isinstance(top["out"], str):
        raise ConfigError("out: expected a string")
    sections = {}
    for name, cls in _SECTIONS.items():
        raw = obj.get(name, {})
        _check_keys(raw, cls, name)
        sections[name] = cls(**raw)

    s = sections["sim"]
    _check_int(s.n, "sim.n", 1)
    _check_ints(s.p, "sim.p")
    _check_ints(s.r, "sim.r")
    if len(s.p) != len(s.r) or len(s.p) < 2:
        raise ConfigError("sim.p and sim.r must have equal length of at least 2")
    if any(r > p for r, p in zip(s.r, s.p)):
        raise ConfigError("sim.r exceeds sim.p")
    _check_int(s.kl_terms, "sim.kl_terms", 1)
    _check_num(s.sigma_X, "sim.sigma_X")
    _check_num(s.sigma_y, "sim.sigma_y")
    _check_num(s.basis_scale, "sim.basis_scale")
    if s.response not in ("integral", "discrete"):
        raise ConfigError(f"sim.response: unknown mode {s.response!r}")
    if s.grid_points is not None:
        if not isinstance(s.grid_points, list) or len(s.grid_points) != s.p[0]:
            raise ConfigError("sim.grid_points must list p[0] points")
        for i, t in enumerate(s.grid_points):
            _check_num(t, f"sim.grid_points[{i}]")

    f = sections["fit"]
    if f.rank is not None:
        _check_ints(f.rank, "fit.rank")
    _check_num(f.rho, "fit.rho")
    _check_int(f.max_iter, "fit.max_iter", 1)
    _check_num(f.rel_tol, "fit.rel_tol")

    sel = sections["selection"]
    try:
        parse_rho_grid(sel.rho_grid)
        parse_ranks(sel.ranks)
    except ValueError as exc:
        raise ConfigError(f"selection: {exc}") from exc
    _check_int(sel.folds, "selection.folds", 2)

    e = sections["experiment"]
    from .experiments import EXPERIMENTS

    if e.name not in EXPERIMENTS:
        raise ConfigError(f"experiment.name: expected one of {sorted(EXPERIMENTS)}, got {e.name!r}")
    _check_int(e.replications, "experiment.replications", 1)
    if e.values is not None:
        if not isinstance(e.values, list) or not e.values:
            raise ConfigError("experiment.values: expected a non-empty list")
        for i, v in enumerate(e.values):
            _check_num(v, f"experiment.values[{i}]")
    return RunConfig(**top, **sections)


def load_run_config(path) -> RunConfig:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_run_config(obj)


# ------------------------------------------------------------ flag parsing
def parse_rho_grid(spec: str | Sequence[float]) -> np.ndarray:
    """``"logspace(a,b,k)"``, ``"linspace(a,b,k)"``, a comma list, or a list of numbers."""
    if isinstance(spec, str):
        s = spec.replace(" ", "")
        for fn in ("logspace", "linspace"):
            if s.startswith(fn + "(") and s.endswith(")"):
                parts = s[len(fn) + 1: -1].split(",")
                if len(parts) != 3:
                    raise ValueError(f"{fn} needs three arguments: {spec!r}")
                a, b, k = float(parts[0]), float(parts[1]), int(parts[2])
                if k < 1:
                    raise ValueError(f"grid size must be positive: {spec!r}")
                grid = getattr(np, fn)(a, b, k)
                break
        else:
            grid = np.array([float(x) for x in s.split(",") if x])
    else:
        grid = np.asarray([float(x) for x in spec])
    if grid.size == 0 or np.any(grid < 0) or not np.all(np.isfinite(grid)):
        raise ValueError(f"rho grid must be non-empty, finite and non-negative: {spec!r}")
    return grid


def parse_rank(spec: str | Sequence[int]) -> tuple[int, ...]:
    if isinstance(spec, str):
        parts = spec.replace("x", ",").split(",")
        rank = tuple(int(x) for x in parts if x.strip())
    else:
        rank = tuple(int(x) for x in spec)
    if not rank or any(r < 1 for r in rank):
        raise ValueError(f"invalid rank {spec!r}")
    return rank


def parse_ranks(spec: str | Sequence) -> list[tuple[int, ...]]:
    """``"table1"``, ``"2,3,3;2,4,3"``, or a list of rank lists."""
    from .selection import TABLE1_RANKS

    if isinstance(spec, str):
        if spec.strip() == "table1":
            return [tuple(r) for r in TABLE1_RANKS]
        items = [s for s in spec.split(";") if s.strip()]
        ranks = [parse_rank(s) for s in items]
    else:
        ranks = [parse_rank(r) for r in spec]
    if not ranks:
        raise ValueError("empty rank list")
    return ranks
