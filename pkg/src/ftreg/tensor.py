"""Dense multilinear algebra on numpy arrays.

Tensors are plain ``ndarray`` objects of shape ``(q_0, ..., q_D)``.  The
mode-``d`` unfolding orders its columns so that, among the remaining modes,
the lowest-numbered one varies fastest::

    [M_d(T)]_{j_d, k} = T[j_0, ..., j_D],
    k = sum_{e != d} j_e * prod_{f < e, f != d} q_f      (0-based)

which is a Fortran-order reshape after moving mode ``d`` to the front.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

MAX_ORDER = 8


class DegenerateRankWarning(UserWarning):
    """A requested number of singular vectors exceeds the numerical rank."""


def as_tensor(values, max_order: int = MAX_ORDER) -> np.ndarray:
    t = np.asarray(values, dtype=float)
    if t.ndim < 1 or t.ndim > max_order:
        raise ValueError(f"tensor order must be in 1..{max_order}, got {t.ndim}")
    if not np.all(np.isfinite(t)):
        raise ValueError("tensor has non-finite entries")
    return t


def inner(a: np.ndarray, b: np.ndarray) -> float:
    """Frobenius inner product of two same-shape tensors."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a.ravel(), b.ravel()))


def matricize(t: np.ndarray, d: int) -> np.ndarray:
    t = np.asarray(t)
    if not 0 <= d < t.ndim:
        raise ValueError(f"mode {d} out of range for order {t.ndim}")
    return np.moveaxis(t, d, 0).reshape(t.shape[d], -1, order="F")


def tensorize(m: np.ndarray, d: int, dims: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`matricize` for a tensor of shape ``dims``."""
    dims = tuple(int(q) for q in dims)
    m = np.asarray(m)
    if not 0 <= d < len(dims):
        raise ValueError(f"mode {d} out of range for order {len(dims)}")
    rest = dims[:d] + dims[d + 1:]
    expected = (dims[d], int(np.prod(rest, dtype=int)))
    if m.shape != expected:
        raise ValueError(f"shape mismatch: expected {expected}, got {m.shape}")
    return np.moveaxis(m.reshape((dims[d],) + rest, order="F"), 0, d)


def mode_product(t: np.ndarray, m: np.ndarray, d: int) -> np.ndarray:
    """``t x_d m``: multiply every mode-``d`` fiber of ``t`` by ``m``."""
    t = np.asarray(t)
    m = np.asarray(m)
    if not 0 <= d < t.ndim:
        raise ValueError(f"mode {d} out of range for order {t.ndim}")
    if m.ndim != 2 or m.shape[1] != t.shape[d]:
        raise ValueError(
            f"shape mismatch: matrix {m.shape} against mode {d} of extent {t.shape[d]}"
        )
    return apply_along_mode(t, m, d)


def apply_along_mode(t: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    """Unchecked mode product on ``axis`` via a batched matmul on a C-contiguous view."""
    t = np.ascontiguousarray(t)
    shape = t.shape
    pre = int(np.prod(shape[:axis], dtype=int))
    post = int(np.prod(shape[axis + 1:], dtype=int))
    new_shape = shape[:axis] + (m.shape[0],) + shape[axis + 1:]
    if post == 1:
        return (t.reshape(pre, shape[axis]) @ m.T).reshape(new_shape)
    return np.matmul(m, t.reshape(pre, shape[axis], post)).reshape(new_shape)


def multi_mode_product(t: np.ndarray, ms: Sequence[np.ndarray | None]) -> np.ndarray:
    """Fold :func:`mode_product` over all modes; ``None`` entries are skipped."""
    t = np.asarray(t)
    if len(ms) != t.ndim:
        raise ValueError(f"need {t.ndim} matrices, got {len(ms)}")
    for d, m in enumerate(ms):
        if m is not None:
            t = mode_product(t, m, d)
    return t


def fix_signs(u: np.ndarray) -> np.ndarray:
    """Flip columns so that each column's largest-magnitude entry is positive."""
    u = np.array(u, dtype=float, copy=True)
    if u.size == 0:
        return u
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs


def leading_singular_vectors(m: np.ndarray, r: int) -> np.ndarray:
    """Orthonormal basis of the leading ``r``-dimensional left singular subspace.

    If ``sigma_r`` falls below ``1e-12 * sigma_1`` the trailing columns are an
    arbitrary orthonormal completion and a :class:`DegenerateRankWarning` is
    issued.
    """
    m = np.asarray(m, dtype=float)
    p, q = m.shape
    if not 0 <= r <= p:
        raise ValueError(f"rank {r} out of range for {p} rows")
    if r == 0:
        return np.zeros((p, 0))
    # full_matrices keeps an orthonormal completion available when r > q
    u, s, _ = np.linalg.svd(m, full_matrices=r > min(p, q))
    s = np.concatenate([s, np.zeros(max(0, r - s.size))])
    if s[0] == 0.0 or s[r - 1] < 1e-12 * s[0]:
        warnings.warn(
            f"degenerate rank: sigma_{r} = {s[r - 1]:.3e} (sigma_1 = {s[0]:.3e})",
            DegenerateRankWarning,
            stacklevel=2,
        )
    return fix_signs(u[:, :r])


@dataclass(frozen=True)
class TuckerTensor:
    """``core x_0 U_0 x_1 ... x_D U_D`` with orthonormal factors."""

    core: np.ndarray
    factors: tuple[np.ndarray, ...]

    def __post_init__(self):
        core = np.asarray(self.core, dtype=float)
        factors = tuple(np.asarray(u, dtype=float) for u in self.factors)
        if core.ndim != len(factors):
            raise ValueError("need one factor per core mode")
        if core.ndim > MAX_ORDER:
            raise ValueError(f"tensor order above {MAX_ORDER} is not supported")
        for d, u in enumerate(factors):
            if u.ndim != 2 or u.shape[1] != core.shape[d]:
                raise ValueError(f"factor {d} has shape {u.shape}, core extent {core.shape[d]}")
            if u.shape[1] > u.shape[0]:
                raise ValueError(f"rank {u.shape[1]} exceeds dimension {u.shape[0]} in mode {d}")
        object.__setattr__(self, "core", core)
        object.__setattr__(self, "factors", factors)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(u.shape[0] for u in self.factors)

    @property
    def rank(self) -> tuple[int, ...]:
        return self.core.shape

    def full(self) -> np.ndarray:
        return multi_mode_product(self.core, self.factors)

    def orthonormality_error(self) -> float:
        return max(
            float(np.max(np.abs(u.T @ u - np.eye(u.shape[1])), initial=0.0))
            for u in self.factors
        )


def tucker_rank(t: np.ndarray, tol: float = 1e-10) -> tuple[int, ...]:
    """Numerical rank of every matricization, relative to the largest singular value."""
    t = np.asarray(t)
    out = []
    for d in range(t.ndim):
        s = np.linalg.svd(matricize(t, d), compute_uv=False)
        out.append(int(np.sum(s > tol * s[0])) if s.size and s[0] > 0 else 0)
    return tuple(out)


def thosvd(t: np.ndarray, rank: Sequence[int]) -> TuckerTensor:
    """Truncated HOSVD: project every mode onto its leading singular subspace."""
    t = np.asarray(t, dtype=float)
    rank = tuple(int(r) for r in rank)
    if len(rank) != t.ndim:
        raise ValueError(f"rank has {len(rank)} entries for an order-{t.ndim} tensor")
    if t.ndim > MAX_ORDER:
        raise ValueError(f"tensor order above {MAX_ORDER} is not supported")
    with warnings.catch_warnings():
        # the zero tensor and exactly-low-rank inputs are legitimate here
        warnings.simplefilter("ignore", DegenerateRankWarning)
        factors = tuple(
            leading_singular_vectors(matricize(t, d), r) for d, r in enumerate(rank)
        )
    core = multi_mode_product(t, [u.T for u in factors])
    return TuckerTensor(core, factors)
