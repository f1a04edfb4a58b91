"""Lifted (stacked-over-time) representation of a time-varying linear system.

The system is ``x[k+1] = A[k] x[k] + B[k] u[k] + D[k] w[k]`` for ``k = 0..N-1``
with unit-covariance white noise ``w``.  Stacking gives
``X = calA x0 + calB U + calD W``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class DimensionError(ValueError):
    """A matrix in a system schedule has the wrong shape."""


@dataclass(frozen=True)
class LinearSystemSchedule:
    A: tuple[np.ndarray, ...]
    B: tuple[np.ndarray, ...]
    D: tuple[np.ndarray, ...]

    def __init__(self, A: Sequence, B: Sequence, D: Sequence):
        A = tuple(np.atleast_2d(np.asarray(a, dtype=float)) for a in A)
        B = tuple(np.atleast_2d(np.asarray(b, dtype=float)) for b in B)
        D = tuple(np.atleast_2d(np.asarray(d, dtype=float)) for d in D)
        if len(A) < 1:
            raise DimensionError("horizon must be at least 1")
        if not len(A) == len(B) == len(D):
            raise DimensionError(
                f"sequence lengths differ: len(A)={len(A)}, len(B)={len(B)}, len(D)={len(D)}"
            )
        nx = A[0].shape[0]
        nu = B[0].shape[1]
        nw = D[0].shape[1]
        for k, (a, b, d) in enumerate(zip(A, B, D)):
            if a.shape != (nx, nx):
                raise DimensionError(f"A[{k}] has shape {a.shape}, expected {(nx, nx)}")
            if b.shape != (nx, nu):
                raise DimensionError(f"B[{k}] has shape {b.shape}, expected {(nx, nu)}")
            if d.shape != (nx, nw):
                raise DimensionError(f"D[{k}] has shape {d.shape}, expected {(nx, nw)}")
        for arr in A + B + D:
            arr.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "D", D)

    @classmethod
    def time_invariant(cls, A, B, D, horizon: int) -> "LinearSystemSchedule":
        if horizon < 1:
            raise DimensionError("horizon must be at least 1")
        return cls([A] * horizon, [B] * horizon, [D] * horizon)

    @property
    def horizon(self) -> int:
        return len(self.A)

    @property
    def nx(self) -> int:
        return self.A[0].shape[0]

    @property
    def nu(self) -> int:
        return self.B[0].shape[1]

    @property
    def nw(self) -> int:
        return self.D[0].shape[1]

    def step(self, k: int, x, u, w) -> np.ndarray:
        return self.A[k] @ x + self.B[k] @ u + self.D[k] @ w


def double_integrator_2d(dt: float, horizon: int, noise_scale: float = 1e-2) -> LinearSystemSchedule:
    """Planar double integrator with state ``[x, y, vx, vy]`` and input ``[ax, ay]``."""
    A = np.array(
        [
            [1.0, 0.0, dt, 0.0],
            [0.0, 1.0, 0.0, dt],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    B = np.array(
        [
            [dt**2 / 2, 0.0],
            [0.0, dt**2 / 2],
            [dt, 0.0],
            [0.0, dt],
        ]
    )
    D = noise_scale * np.eye(4)
    return LinearSystemSchedule.time_invariant(A, B, D, horizon)


@dataclass(frozen=True)
class BlockOperators:
    """Stacked operators with ``X = calA @ x0 + calB @ U + calD @ W``."""

    calA: np.ndarray
    calB: np.ndarray
    calD: np.ndarray
    horizon: int
    nx: int
    nu: int
    nw: int

    def block_B(self, k: int, j: int) -> np.ndarray:
        """Input-to-state block mapping ``u[j]`` into ``x[k]``."""
        nx, nu = self.nx, self.nu
        return self.calB[k * nx : (k + 1) * nx, j * nu : (j + 1) * nu]

    def rows(self, k: int) -> slice:
        return slice(k * self.nx, (k + 1) * self.nx)

    def stack(self, x0, U, W) -> np.ndarray:
        return self.calA @ x0 + self.calB @ U + self.calD @ W


def transition_product(sys: LinearSystemSchedule, k1: int, k0: int) -> np.ndarray:
    """Ordered product ``A[k1] @ A[k1-1] @ ... @ A[k0]``."""
    if not 0 <= k0 <= k1 < sys.horizon:
        raise IndexError(f"need 0 <= k0 <= k1 < {sys.horizon}, got k0={k0}, k1={k1}")
    out = sys.A[k0]
    for k in range(k0 + 1, k1 + 1):
        out = sys.A[k] @ out
    return out


def assemble_block_operators(sys: LinearSystemSchedule) -> BlockOperators:
    N, nx, nu, nw = sys.horizon, sys.nx, sys.nu, sys.nw
    calA = np.zeros(((N + 1) * nx, nx))
    calB = np.zeros(((N + 1) * nx, N * nu))
    calD = np.zeros(((N + 1) * nx, N * nw))
    calA[:nx] = np.eye(nx)
    # Block row k+1 is A[k] times block row k plus the new input/noise column.
    for k in range(N):
        prev = slice(k * nx, (k + 1) * nx)
        cur = slice((k + 1) * nx, (k + 2) * nx)
        calA[cur] = sys.A[k] @ calA[prev]
        calB[cur, : k * nu] = sys.A[k] @ calB[prev, : k * nu]
        calB[cur, k * nu : (k + 1) * nu] = sys.B[k]
        calD[cur, : k * nw] = sys.A[k] @ calD[prev, : k * nw]
        calD[cur, k * nw : (k + 1) * nw] = sys.D[k]
    for arr in (calA, calB, calD):
        arr.setflags(write=False)
    return BlockOperators(calA, calB, calD, N, nx, nu, nw)


def selector(k: int, N: int, nx: int) -> np.ndarray:
    """``E_k`` with ``E_k @ X == x[k]`` for a stacked ``X`` of ``N + 1`` states."""
    if not 0 <= k <= N:
        raise IndexError(f"time index {k} outside 0..{N}")
    E = np.zeros((nx, (N + 1) * nx))
    E[:, k * nx : (k + 1) * nx] = np.eye(nx)
    return E
