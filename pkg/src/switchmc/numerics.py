"""Random streams and small dense linear algebra."""

from __future__ import annotations

from typing import Sequence

import numpy as np

__all__ = [
    "PIVOT_TOL",
    "RngStream",
    "SingularMatrixError",
    "gaussian_vector",
    "lu_inverse",
]

PIVOT_TOL = 1e-12


class SingularMatrixError(ArithmeticError):
    """A pivot fell below :data:`PIVOT_TOL` during LU factorisation."""


class RngStream:
    """Reproducible random stream identified by ``(seed, stream_id)``.

    Distinct ``stream_id`` values map to distinct spawn keys of one
    :class:`numpy.random.SeedSequence`, so the resulting PCG64DXSM
    generators are independent substreams. ``stream_id`` may be an int or
    a tuple of ints, e.g. ``(replication, block)``.
    """

    def __init__(self, seed: int, stream_id: int | Sequence[int] = 0):
        if isinstance(stream_id, (int, np.integer)):
            key: tuple[int, ...] = (int(stream_id),)
        else:
            key = tuple(int(s) for s in stream_id)
        self.seed = int(seed)
        self.stream_id = key
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=key)
        self.gen = np.random.Generator(np.random.PCG64DXSM(seq))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def normal(self, size=None) -> np.ndarray:
        return self.gen.standard_normal(size)

    def uniform(self, size=None) -> np.ndarray:
        return self.gen.random(size)

    def exponential(self, size=None) -> np.ndarray:
        return self.gen.standard_exponential(size)


def gaussian_vector(stream: RngStream, d: int) -> np.ndarray:
    """Return ``d`` i.i.d. standard normal components."""
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    return stream.normal(d)


def lu_inverse(m: np.ndarray, tol: float = PIVOT_TOL) -> np.ndarray:
    """Invert one matrix or a stack of matrices with partial pivoting.

    The elimination is the Gauss-Jordan form of an LU factorisation with
    row pivoting, run in lockstep over the batch axis.

    Parameters
    ----------
    m : ndarray, shape (d, d) or (..., d, d)
        Matrices to invert. Leading axes are treated as a batch.
    tol : float
        Absolute pivot threshold; any pivot with ``|p| <= tol`` raises.

    Returns
    -------
    ndarray
        Inverse(s) with the same shape as ``m``.

    Raises
    ------
    SingularMatrixError
        If some matrix in the batch has a pivot below ``tol``.
    """
    a = np.array(m, dtype=float, copy=True)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"expected square matrices, got shape {a.shape}")
    single = a.ndim == 2
    shape = a.shape
    d = a.shape[-1]
    a = a.reshape(-1, d, d)
    n = a.shape[0]

    if d == 1:
        piv = a[:, 0, 0]
        if np.any(np.abs(piv) <= tol):
            raise SingularMatrixError("pivot below threshold in 1x1 inversion")
        out = (1.0 / piv).reshape(n, 1, 1)
        return out[0] if single else out.reshape(shape)

    # Gauss-Jordan on the augmented block [A | I], batched over the first axis.
    inv = np.broadcast_to(np.eye(d), (n, d, d)).copy()
    rows = np.arange(n)
    for col in range(d):
        p = col + np.argmax(np.abs(a[:, col:, col]), axis=1)
        pv = a[rows, p, col]
        if np.any(np.abs(pv) <= tol):
            raise SingularMatrixError(f"pivot below {tol:g} in column {col}")
        swap = p != col
        if np.any(swap):
            r = rows[swap]
            ps = p[swap]
            a[r, col], a[r, ps] = a[r, ps].copy(), a[r, col].copy()
            inv[r, col], inv[r, ps] = inv[r, ps].copy(), inv[r, col].copy()
        pv = a[:, col, col][:, None].copy()
        a[:, col] /= pv
        inv[:, col] /= pv
        f = a[:, :, col].copy()
        f[:, col] = 0.0
        a -= f[:, :, None] * a[:, col][:, None, :]
        inv -= f[:, :, None] * inv[:, col][:, None, :]

    return inv[0] if single else inv.reshape(shape)
