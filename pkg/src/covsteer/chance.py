"""Gaussian quantiles and deterministic forms of half-space chance constraints.

For a Gaussian state ``x_k`` with mean ``E_k Xbar`` and covariance
``E_k Sigma_X E_k^T`` the requirement ``Pr(alpha^T x_k > beta) <= p`` is
equivalent to

    alpha^T E_k Xbar + Phi^{-1}(1 - p) * ||L^T (I + calB K)^T E_k^T alpha|| <= beta

for any factor ``L`` with ``L L^T = calA Sigma0 calA^T + calD calD^T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import BlockOperators


class NotPSDError(ValueError):
    pass


# Wichura's AS241 (PPND16) coefficients.
_A = (
    3.387132872796366608, 133.14166789178437745, 1971.5909503065514427,
    13731.693765509461125, 45921.953931549871457, 67265.770927008700853,
    33430.575583588128105, 2509.0809287301226727,
)
_B = (
    1.0, 42.313330701600911252, 687.1870074920579083, 5394.1960214247511077,
    21213.794301586595867, 39307.89580009271061, 28729.085735721942674,
    5226.495278852545925,
)
_C = (
    1.42343711074968357734, 4.6303378461565452959, 5.7694972214606914055,
    3.64784832476320460504, 1.27045825245236838258, 0.24178072517745061177,
    0.0227238449892691845833, 7.7454501427834140764e-4,
)
_D = (
    1.0, 2.05319162663775882187, 1.6763848301838038494, 0.68976733498510000455,
    0.14810397642748007459, 0.0151986665636164571966, 5.475938084995344946e-4,
    1.05075007164441684324e-9,
)
_E = (
    6.6579046435011037772, 5.4637849111641143699, 1.7848265399172913358,
    0.29656057182850489123, 0.026532189526576123093, 0.0012426609473880784386,
    2.71155556874348757815e-5, 2.01033439929228813265e-7,
)
_F = (
    1.0, 0.59983220655588793769, 0.13692988092273580531, 0.0148753612908506148525,
    7.868691311456132591e-4, 1.8463183175100546818e-5, 1.4215117583164458887e-7,
    2.04426310338993978564e-15,
)


def _poly(coeffs, x: float) -> float:
    acc = 0.0
    for c in reversed(coeffs):
        acc = acc * x + c
    return acc


def standard_normal_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def inverse_standard_normal_cdf(p: float) -> float:
    """Return ``z`` with ``Phi(z) = p``.

    Rational approximation (AS241) followed by one Newton step on the
    erfc-based CDF.
    """
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        z = q * _poly(_A, r) / _poly(_B, r)
    else:
        r = p if q < 0 else 1.0 - p
        r = math.sqrt(-math.log(r))
        if r <= 5.0:
            r -= 1.6
            z = _poly(_C, r) / _poly(_D, r)
        else:
            r -= 5.0
            z = _poly(_E, r) / _poly(_F, r)
        if q < 0:
            z = -z
    # Newton refinement; work with the smaller tail to avoid cancellation.
    dens = math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    if dens > 0.0:
        if z > 0:
            resid = (1.0 - p) - 0.5 * math.erfc(z / math.sqrt(2.0))
            z -= resid / dens
        else:
            resid = standard_normal_cdf(z) - p
            z -= resid / dens
    return z


def psd_tolerance(eigvals: np.ndarray) -> float:
    top = float(np.max(np.abs(eigvals))) if eigvals.size else 0.0
    return 1e-9 * (1.0 + top)


def check_psd(S, name: str = "matrix") -> np.ndarray:
    """Symmetrize ``S`` and raise ``NotPSDError`` if it has a materially negative eigenvalue."""
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"{name} must be square, got shape {S.shape}")
    S = 0.5 * (S + S.T)
    w = np.linalg.eigvalsh(S)
    if w.size and w[0] < -psd_tolerance(w):
        raise NotPSDError(f"{name} is not positive semidefinite (min eigenvalue {w[0]:.3e})")
    return S


def psd_sqrt(S) -> np.ndarray:
    """Symmetric PSD square root; tiny negative eigenvalues are clipped to zero."""
    S = np.asarray(S, dtype=float)
    S = 0.5 * (S + S.T)
    w, U = np.linalg.eigh(S)
    if w.size and w[0] < -psd_tolerance(w):
        raise NotPSDError(f"matrix is not positive semidefinite (min eigenvalue {w[0]:.3e})")
    R = (U * np.sqrt(np.clip(w, 0.0, None))) @ U.T
    return 0.5 * (R + R.T)


def inverse_psd_sqrt(S) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    S = 0.5 * (S + S.T)
    w, U = np.linalg.eigh(S)
    if w[0] <= 0.0:
        raise NotPSDError(f"matrix is not positive definite (min eigenvalue {w[0]:.3e})")
    R = (U / np.sqrt(w)) @ U.T
    return 0.5 * (R + R.T)


def noise_factor(ops: BlockOperators, Sigma0) -> np.ndarray:
    """Factor ``L`` with ``L @ L.T == calA Sigma0 calA^T + calD calD^T``.

    ``L = [calA Sigma0^{1/2}, calD]`` keeps the block lower staircase of
    ``calD``, so row block ``k`` is zero beyond column ``nx + k*nw``.
    """
    return np.hstack([ops.calA @ psd_sqrt(Sigma0), ops.calD])


def deviation_map(ops: BlockOperators, L: np.ndarray, k: int, W) -> tuple[np.ndarray, np.ndarray]:
    """Affine map from feedback gains to ``W @ E_k @ (I + calB K) @ L``.

    Returns ``(const, coeff)`` with
    ``(W E_k (I + calB K) L).ravel() == const.ravel() + coeff @ kvec``, where
    ``kvec`` concatenates the row-major flattened blocks ``K[0], ..., K[N-1]``.
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    m, nL = W.shape[0], L.shape[1]
    nx, nu, N = ops.nx, ops.nu, ops.horizon
    const = W @ L[ops.rows(k)]
    coeff = np.zeros((m * nL, N * nu * nx))
    for j in range(min(k, N)):
        WB = W @ ops.block_B(k, j)
        Lj = L[ops.rows(j)]
        block = np.einsum("ma,cl->mlac", WB, Lj).reshape(m * nL, nu * nx)
        coeff[:, j * nu * nx : (j + 1) * nu * nx] = block
    return const, coeff


@dataclass(frozen=True)
class DeterministicHalfspaceConstraint:
    """``v_const + v_coeff @ V + multiplier * ||norm_const + norm_coeff @ kvec|| - beta <= 0``."""

    k: int
    v_const: float
    v_coeff: np.ndarray
    norm_const: np.ndarray
    norm_coeff: np.ndarray
    multiplier: float
    beta: float

    def mean_term(self, V) -> float:
        return float(self.v_const + self.v_coeff @ np.asarray(V, dtype=float))

    def spread(self, kvec) -> float:
        return float(np.linalg.norm(self.norm_const + self.norm_coeff @ np.asarray(kvec, dtype=float)))

    def lhs(self, V, kvec) -> float:
        return self.mean_term(V) + self.multiplier * self.spread(kvec) - self.beta

    def satisfied(self, V, kvec, tol: float = 0.0) -> bool:
        return self.lhs(V, kvec) <= tol


def build_halfspace_constraint(
    ops: BlockOperators, Sigma0, alpha, beta: float, k: int, p: float, mu0=None, L=None
) -> DeterministicHalfspaceConstraint:
    """Deterministic equivalent of ``Pr(alpha^T x_k > beta) <= p``."""
    if not 0.0 < p < 0.5:
        raise ValueError(f"risk must lie in (0, 0.5), got {p}")
    if not 0 <= k <= ops.horizon:
        raise IndexError(f"time index {k} outside 0..{ops.horizon}")
    alpha = np.asarray(alpha, dtype=float).ravel()
    if mu0 is None:
        mu0 = np.zeros(ops.nx)
    if L is None:
        L = noise_factor(ops, Sigma0)
    rows = ops.rows(k)
    v_const = float(alpha @ ops.calA[rows] @ np.asarray(mu0, dtype=float))
    v_coeff = alpha @ ops.calB[rows]
    const, coeff = deviation_map(ops, L, k, alpha[None, :])
    return DeterministicHalfspaceConstraint(
        k=k,
        v_const=v_const,
        v_coeff=v_coeff,
        norm_const=const.ravel(),
        norm_coeff=coeff,
        multiplier=inverse_standard_normal_cdf(1.0 - p),
        beta=float(beta),
    )


def gaussian_tail(mean: float, var: float, beta: float) -> float:
    """``Pr(z > beta)`` for ``z ~ N(mean, var)``."""
    if var <= 0.0:
        return 1.0 if mean > beta else 0.0
    return 0.5 * math.erfc((beta - mean) / math.sqrt(2.0 * var))
