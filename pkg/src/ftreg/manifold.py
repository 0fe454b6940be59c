"""Tangent spaces of the fixed-Tucker-rank manifold.

A tangent vector at ``theta = S x_d U_d`` is parameterized by a core-sized
block ``C`` and one ``(p_d - r_d) x r_d`` block ``D_d`` per mode:

    extend(C, D) = C x_d U_d + sum_d T_d(U_dperp D_d W_d^T)

with ``W_d = (U_D kron ... kron U_0, mode d skipped) V_d`` and
``V_d = QR(M_d(S)^T)``.  ``W_d`` is never formed; products with it go
through the factors one mode at a time.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import reduce
from typing import Sequence

import numpy as np

from .tensor import TuckerTensor, apply_along_mode, fix_signs, matricize, mode_product, multi_mode_product, tensorize


class NearBoundaryWarning(UserWarning):
    """The core is close to losing Tucker rank."""


_mp = apply_along_mode


def batch_matricize(x: np.ndarray, d: int) -> np.ndarray:
    """Mode-``d`` unfolding of every tensor in a stack ``x[i]``: shape ``(n, q_d, q_-d)``."""
    order = x.ndim - 1
    rest = [1 + e for e in range(order) if e != d]
    cols = int(np.prod([x.shape[e] for e in rest], dtype=int))
    return x.transpose([0, 1 + d] + rest[::-1]).reshape(x.shape[0], x.shape[1 + d], cols)


def batch_tensorize(m: np.ndarray, d: int, dims: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`batch_matricize` for tensors of shape ``dims``."""
    order = len(dims)
    rest = [e for e in range(order) if e != d][::-1]
    x = m.reshape((m.shape[0], dims[d]) + tuple(dims[e] for e in rest))
    # axis positions of each mode in x
    pos = {d: 1}
    pos.update({e: 2 + i for i, e in enumerate(rest)})
    return x.transpose([0] + [pos[e] for e in range(order)])


def manifold_dim(shape: Sequence[int], rank: Sequence[int]) -> int:
    return int(np.prod(rank)) + sum(r * (p - r) for p, r in zip(shape, rank))


@dataclass
class TangentCoords:
    core: np.ndarray
    blocks: list[np.ndarray]

    def __add__(self, other: "TangentCoords") -> "TangentCoords":
        return TangentCoords(self.core + other.core, [a + b for a, b in zip(self.blocks, other.blocks)])

    def __mul__(self, c: float) -> "TangentCoords":
        return TangentCoords(c * self.core, [c * b for b in self.blocks])

    __rmul__ = __mul__

    def vector(self) -> np.ndarray:
        return np.concatenate([self.core.ravel()] + [b.ravel() for b in self.blocks])

    def dot(self, other: "TangentCoords") -> float:
        return float(self.vector() @ other.vector())


class TangentFrame:
    """Orthonormal frames ``U_d``, ``U_dperp``, ``V_d`` at a Tucker point."""

    def __init__(self, point: TuckerTensor):
        self.point = point
        self.core = point.core
        self.U = point.factors
        self.shape = point.shape
        self.rank = point.rank
        self.order = len(self.shape)

        self.U_perp = []
        for u in self.U:
            q, _ = np.linalg.qr(u, mode="complete")
            self.U_perp.append(fix_signs(q[:, u.shape[1]:]))

        self.V = []
        for d in range(self.order):
            m = matricize(self.core, d)
            s = np.linalg.svd(m, compute_uv=False)
            if s[0] == 0.0 or s[-1] <= 1e-12 * s[0]:
                raise ValueError(f"core is rank deficient in mode {d}; point is not on the manifold")
            if s[-1] <= 1e-8 * s[0]:
                warnings.warn(f"core nearly rank deficient in mode {d}", NearBoundaryWarning, stacklevel=2)
            q, _ = np.linalg.qr(m.T)
            self.V.append(fix_signs(q))

        self.block_shapes = [(p - r, r) for p, r in zip(self.shape, self.rank)]
        sizes = [int(np.prod(self.rank))] + [a * b for a, b in self.block_shapes]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.dim = int(self.offsets[-1])

    # ------------------------------------------------------------------ coords
    def unpack(self, v: np.ndarray) -> TangentCoords:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.dim,):
            raise ValueError(f"expected a vector of length {self.dim}, got {v.shape}")
        o = self.offsets
        core = v[: o[1]].reshape(self.rank)
        blocks = [v[o[d + 1]: o[d + 2]].reshape(self.block_shapes[d]) for d in range(self.order)]
        return TangentCoords(core, blocks)

    def zeros(self) -> TangentCoords:
        return self.unpack(np.zeros(self.dim))

    def _check(self, xi: TangentCoords):
        if xi.core.shape != tuple(self.rank) or [b.shape for b in xi.blocks] != self.block_shapes:
            raise ValueError("tangent coordinates do not match the frame")

    def _check_ambient(self, t: np.ndarray):
        if t.shape != tuple(self.shape):
            raise ValueError(f"expected a tensor of shape {self.shape}, got {t.shape}")

    def dense_W(self, d: int) -> np.ndarray:
        """Materialized ``W_d`` (only for small shapes and tests)."""
        others = [self.U[e] for e in range(self.order) if e != d]
        return reduce(np.kron, others[::-1]) @ self.V[d]

    # -------------------------------------------------------------------- maps
    def _block_tensor(self, d: int, block: np.ndarray) -> np.ndarray:
        """``T_d(block V_d^T)`` in the small space with mode ``d`` of extent ``rows(block)``."""
        dims = list(self.rank)
        dims[d] = block.shape[0]
        return tensorize(block @ self.V[d].T, d, dims)

    def extend(self, xi: TangentCoords) -> np.ndarray:
        self._check(xi)
        out = multi_mode_product(xi.core, self.U)
        for d in range(self.order):
            y = mode_product(self._block_tensor(d, xi.blocks[d]), self.U_perp[d], d)
            for e in range(self.order):
                if e != d:
                    y = mode_product(y, self.U[e], e)
            out = out + y
        return out

    def contract(self, upsilon: np.ndarray) -> TangentCoords:
        upsilon = np.asarray(upsilon, dtype=float)
        self._check_ambient(upsilon)
        return self.unpack(self.contract_batch(upsilon[None])[0])

    def contract_batch(self, z: np.ndarray) -> np.ndarray:
        """Packed contraction of every tensor in the stack ``z`` (shape ``(n, *shape)``)."""
        z = np.asarray(z, dtype=float)
        if z.shape[1:] != tuple(self.shape):
            raise ValueError(f"expected tensors of shape {self.shape}, got {z.shape[1:]}")
        n = z.shape[0]
        out = np.empty((n, self.dim))
        # rotate every mode into the [U_d, U_dperp] basis once, then slice
        rot = z
        for e in range(self.order):
            rot = _mp(rot, np.hstack([self.U[e], self.U_perp[e]]).T, 1 + e)
        head = tuple(slice(0, r) for r in self.rank)
        out[:, : self.offsets[1]] = rot[(slice(None),) + head].reshape(n, -1)
        for d in range(self.order):
            idx = list(head)
            idx[d] = slice(self.rank[d], None)
            blk = batch_matricize(rot[(slice(None),) + tuple(idx)], d) @ self.V[d]
            out[:, self.offsets[d + 1]: self.offsets[d + 2]] = blk.reshape(n, blk[0].size)
        return out

    def project(self, upsilon: np.ndarray) -> np.ndarray:
        return self.extend(self.contract(upsilon))

    def penalty_on_tangent(self, A: np.ndarray, xi: TangentCoords) -> TangentCoords:
        """Coordinates of ``contract(extend(xi) x_0 A)`` from small blocks only."""
        self._check(xi)
        return self.unpack(self.penalty_batch(A, xi.vector()[None])[0])

    def penalty_batch(self, A: np.ndarray, coords: np.ndarray) -> np.ndarray:
        """Row-wise :meth:`penalty_on_tangent` on packed coordinates of shape ``(nb, dim)``.

        Only mode 0 couples with ``A``: the core and the mode-0 block mix
        through ``U_0^T A U_0``, ``U_0^T A U_0perp`` and ``U_0perp^T A U_0perp``,
        while each block ``D_d`` (d >= 1) sees ``U_0^T A U_0`` through ``V_d``.
        """
        A = np.asarray(A, dtype=float)
        p0 = self.shape[0]
        if A.shape != (p0, p0):
            raise ValueError(f"penalty matrix must be {p0} x {p0}")
        coords = np.asarray(coords, dtype=float)
        nb = coords.shape[0]
        o = self.offsets
        core = coords[:, : o[1]].reshape((nb,) + tuple(self.rank))
        blocks = [coords[:, o[d + 1]: o[d + 2]].reshape((nb,) + self.block_shapes[d]) for d in range(self.order)]

        U0, P0 = self.U[0], self.U_perp[0]
        a_uu = U0.T @ A @ U0
        a_up = U0.T @ A @ P0
        a_pu = P0.T @ A @ U0
        a_pp = P0.T @ A @ P0

        out = np.empty_like(coords)
        new_core = _mp(core, a_uu, 1)
        if P0.shape[1]:
            new_core = new_core + _mp(self._block_tensor_batch(0, blocks[0]), a_up, 1)
        out[:, : o[1]] = new_core.reshape(nb, o[1])
        b0 = a_pu @ batch_matricize(core, 0) @ self.V[0] + a_pp @ blocks[0]
        out[:, o[1]: o[2]] = b0.reshape(nb, o[2] - o[1])
        for d in range(1, self.order):
            y = _mp(self._block_tensor_batch(d, blocks[d]), a_uu, 1)
            out[:, o[d + 1]: o[d + 2]] = (batch_matricize(y, d) @ self.V[d]).reshape(nb, o[d + 2] - o[d + 1])
        return out

    def _block_tensor_batch(self, d: int, blocks: np.ndarray) -> np.ndarray:
        dims = list(self.rank)
        dims[d] = blocks.shape[1]
        return batch_tensorize(blocks @ self.V[d].T, d, dims)

    def penalty_gram(self, A: np.ndarray) -> np.ndarray:
        """Matrix of :meth:`penalty_on_tangent` in packed coordinates."""
        n = self.penalty_batch(A, np.eye(self.dim)).T
        return (n + n.T) / 2


def build_frame(point: TuckerTensor) -> TangentFrame:
    return TangentFrame(point)


def extend(frame: TangentFrame, xi: TangentCoords) -> np.ndarray:
    return frame.extend(xi)


def contract(frame: TangentFrame, upsilon: np.ndarray) -> TangentCoords:
    return frame.contract(upsilon)


def project(frame: TangentFrame, upsilon: np.ndarray) -> np.ndarray:
    return frame.project(upsilon)


def penalty_on_tangent(frame: TangentFrame, A: np.ndarray, xi: TangentCoords) -> TangentCoords:
    return frame.penalty_on_tangent(A, xi)
