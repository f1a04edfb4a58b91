"""Affine disturbance-feedback policies ``u_k = v_k + K_k y_k``.

``y_k`` is the uncontrolled deviation state: ``y_0 = x_0 - mu0`` and
``y_{k+1} = A_k y_k + D_k w_k``.  Under this policy the stacked state mean is
affine in ``V`` and the stacked covariance is quadratic in ``K``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .chance import NotPSDError, check_psd
from .dynamics import BlockOperators, LinearSystemSchedule


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Policy:
    v: np.ndarray  # (N, nu)
    K: np.ndarray  # (N, nu, nx)

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float)
        K = np.asarray(self.K, dtype=float)
        if v.ndim != 2 or K.ndim != 3 or K.shape[:2] != v.shape:
            raise ShapeError(f"inconsistent policy shapes v={v.shape}, K={K.shape}")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "K", K)

    @classmethod
    def zeros(cls, N: int, nu: int, nx: int) -> "Policy":
        return cls(np.zeros((N, nu)), np.zeros((N, nu, nx)))

    @classmethod
    def from_vectors(cls, V, kvec, N: int, nu: int, nx: int) -> "Policy":
        return cls(np.asarray(V, dtype=float).reshape(N, nu), np.asarray(kvec, dtype=float).reshape(N, nu, nx))

    @property
    def horizon(self) -> int:
        return self.v.shape[0]

    @property
    def V(self) -> np.ndarray:
        return self.v.ravel()

    @property
    def kvec(self) -> np.ndarray:
        return self.K.ravel()

    def lifted_K(self) -> np.ndarray:
        """Block-diagonal ``N*nu x (N+1)*nx`` gain; the column block for ``y_N`` is zero."""
        N, nu, nx = self.K.shape
        out = np.zeros((N * nu, (N + 1) * nx))
        for k in range(N):
            out[k * nu : (k + 1) * nu, k * nx : (k + 1) * nx] = self.K[k]
        return out

    def with_gains(self, K) -> "Policy":
        return Policy(self.v, K)


@dataclass(frozen=True)
class GaussianBoundary:
    mu0: np.ndarray
    Sigma0: np.ndarray
    muN: np.ndarray
    SigmaN: np.ndarray

    def __post_init__(self):
        mu0 = np.asarray(self.mu0, dtype=float).ravel()
        muN = np.asarray(self.muN, dtype=float).ravel()
        n = mu0.size
        Sigma0 = check_psd(self.Sigma0, "Sigma0")
        SigmaN = np.asarray(self.SigmaN, dtype=float)
        if muN.size != n or Sigma0.shape != (n, n) or SigmaN.shape != (n, n):
            raise ShapeError("boundary means and covariances have inconsistent sizes")
        SigmaN = 0.5 * (SigmaN + SigmaN.T)
        if np.linalg.eigvalsh(SigmaN)[0] <= 0.0:
            raise NotPSDError("SigmaN must be positive definite")
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "muN", muN)
        object.__setattr__(self, "Sigma0", Sigma0)
        object.__setattr__(self, "SigmaN", SigmaN)


def _check_weight_seq(mats, n: int, definite: bool, name: str) -> tuple[np.ndarray, ...]:
    out = []
    for k, m in enumerate(mats):
        m = np.atleast_2d(np.asarray(m, dtype=float))
        if m.shape != (n, n):
            raise ShapeError(f"{name}[{k}] has shape {m.shape}, expected {(n, n)}")
        m = check_psd(m, f"{name}[{k}]")
        if definite and np.linalg.eigvalsh(m)[0] <= 0.0:
            raise NotPSDError(f"{name}[{k}] must be positive definite")
        out.append(m)
    return tuple(out)


@dataclass(frozen=True)
class CostWeights:
    """Separate mean and covariance weights; ``Q_*`` are PSD, ``R_*`` positive definite."""

    Q_mean: tuple
    R_mean: tuple
    Q_cov: tuple
    R_cov: tuple

    @classmethod
    def build(cls, Q_mean: Sequence, R_mean: Sequence, Q_cov: Sequence, R_cov: Sequence) -> "CostWeights":
        N = len(Q_mean)
        if not len(R_mean) == len(Q_cov) == len(R_cov) == N:
            raise ShapeError("weight sequences must all have length N")
        nx = np.atleast_2d(Q_mean[0]).shape[0]
        nu = np.atleast_2d(R_mean[0]).shape[0]
        return cls(
            _check_weight_seq(Q_mean, nx, False, "Q_mean"),
            _check_weight_seq(R_mean, nu, True, "R_mean"),
            _check_weight_seq(Q_cov, nx, False, "Q_cov"),
            _check_weight_seq(R_cov, nu, True, "R_cov"),
        )

    @classmethod
    def uniform(cls, Q, R, N: int, Q_cov=None, R_cov=None) -> "CostWeights":
        Q_cov = Q if Q_cov is None else Q_cov
        R_cov = R if R_cov is None else R_cov
        return cls.build([Q] * N, [R] * N, [Q_cov] * N, [R_cov] * N)

    @property
    def horizon(self) -> int:
        return len(self.Q_mean)

    @staticmethod
    def lift_state(mats) -> np.ndarray:
        """``blkdiag(Q_0, ..., Q_{N-1}, 0)``."""
        n = mats[0].shape[0]
        N = len(mats)
        out = np.zeros(((N + 1) * n, (N + 1) * n))
        for k, m in enumerate(mats):
            out[k * n : (k + 1) * n, k * n : (k + 1) * n] = m
        return out

    @staticmethod
    def lift_input(mats) -> np.ndarray:
        n = mats[0].shape[0]
        N = len(mats)
        out = np.zeros((N * n, N * n))
        for k, m in enumerate(mats):
            out[k * n : (k + 1) * n, k * n : (k + 1) * n] = m
        return out


def _check_policy(ops: BlockOperators, policy: Policy) -> None:
    if policy.K.shape != (ops.horizon, ops.nu, ops.nx):
        raise ShapeError(
            f"policy gains have shape {policy.K.shape}, expected {(ops.horizon, ops.nu, ops.nx)}"
        )


def mean_trajectory(ops: BlockOperators, mu0, policy: Policy) -> np.ndarray:
    _check_policy(ops, policy)
    mu0 = np.asarray(mu0, dtype=float)
    if mu0.shape != (ops.nx,):
        raise ShapeError(f"mu0 has shape {mu0.shape}, expected {(ops.nx,)}")
    return ops.calA @ mu0 + ops.calB @ policy.V


def open_loop_covariance(ops: BlockOperators, Sigma0) -> np.ndarray:
    """``calA Sigma0 calA^T + calD calD^T``: covariance of the stacked ``y``."""
    return ops.calA @ Sigma0 @ ops.calA.T + ops.calD @ ops.calD.T


def closed_loop_map(ops: BlockOperators, policy: Policy) -> np.ndarray:
    """``I + calB K``."""
    return np.eye(ops.calB.shape[0]) + ops.calB @ policy.lifted_K()


def state_covariance(ops: BlockOperators, Sigma0, policy: Policy) -> np.ndarray:
    _check_policy(ops, policy)
    Sigma0 = check_psd(Sigma0, "Sigma0")
    T = closed_loop_map(ops, policy)
    S = T @ open_loop_covariance(ops, Sigma0) @ T.T
    return 0.5 * (S + S.T)


def step_covariance(ops: BlockOperators, Sigma_X: np.ndarray, k: int) -> np.ndarray:
    r = ops.rows(k)
    return Sigma_X[r, r]


def evaluate_cost(ops: BlockOperators, boundary: GaussianBoundary, weights: CostWeights, policy: Policy) -> float:
    """Expected quadratic cost with separate mean/covariance weights."""
    _check_policy(ops, policy)
    if weights.horizon != ops.horizon:
        raise ShapeError("weights horizon does not match the system")
    S = open_loop_covariance(ops, boundary.Sigma0)
    T = closed_loop_map(ops, policy)
    Kl = policy.lifted_K()
    Qc = CostWeights.lift_state(weights.Q_cov)
    Rc = CostWeights.lift_input(weights.R_cov)
    Qm = CostWeights.lift_state(weights.Q_mean)
    Rm = CostWeights.lift_input(weights.R_mean)
    xbar = ops.calA @ boundary.mu0 + ops.calB @ policy.V
    V = policy.V
    J = np.trace(T.T @ Qc @ T @ S) + np.trace(Kl.T @ Rc @ Kl @ S) + xbar @ Qm @ xbar + V @ Rm @ V
    return float(J)


@dataclass
class Rollouts:
    x: np.ndarray  # (n_draws, N+1, nx)
    u: np.ndarray  # (n_draws, N, nu)
    y: np.ndarray  # (n_draws, N+1, nx)


def simulate_closed_loop(sys: LinearSystemSchedule, boundary: GaussianBoundary, policy: Policy, noise_draws, x0_draws) -> Rollouts:
    """Run the coupled state / deviation-state recursions for a batch of draws.

    ``noise_draws`` has shape ``(n, N*nw)`` (or ``(n, N, nw)``) and ``x0_draws``
    has shape ``(n, nx)``.
    """
    N, nx, nu, nw = sys.horizon, sys.nx, sys.nu, sys.nw
    W = np.asarray(noise_draws, dtype=float)
    x0 = np.atleast_2d(np.asarray(x0_draws, dtype=float))
    n = x0.shape[0]
    if x0.shape != (n, nx):
        raise ShapeError(f"x0 draws have shape {x0.shape}, expected (n, {nx})")
    if W.ndim == 1:
        W = W[None, :]
    if W.size != n * N * nw:
        raise ShapeError(f"noise draws have shape {W.shape}, expected ({n}, {N * nw})")
    W = W.reshape(n, N, nw)
    if policy.K.shape != (N, nu, nx):
        raise ShapeError("policy does not match the system dimensions")
    x = np.empty((n, N + 1, nx))
    y = np.empty((n, N + 1, nx))
    u = np.empty((n, N, nu))
    x[:, 0] = x0
    y[:, 0] = x0 - boundary.mu0
    for k in range(N):
        u[:, k] = policy.v[k] + y[:, k] @ policy.K[k].T
        dw = W[:, k] @ sys.D[k].T
        x[:, k + 1] = x[:, k] @ sys.A[k].T + u[:, k] @ sys.B[k].T + dw
        y[:, k + 1] = y[:, k] @ sys.A[k].T + dw
    return Rollouts(x=x, u=u, y=y)


def sample_rollouts(sys: LinearSystemSchedule, boundary: GaussianBoundary, policy: Policy, n: int, rng: np.random.Generator) -> Rollouts:
    """Draw ``x0 ~ N(mu0, Sigma0)`` and unit white noise from ``rng``, then simulate."""
    N, nx, nw = sys.horizon, sys.nx, sys.nw
    root = _sym_root(boundary.Sigma0)
    x0 = boundary.mu0 + rng.standard_normal((n, nx)) @ root.T
    W = rng.standard_normal((n, N * nw))
    return simulate_closed_loop(sys, boundary, policy, W, x0)


def _sym_root(S) -> np.ndarray:
    w, U = np.linalg.eigh(S)
    return U * np.sqrt(np.clip(w, 0.0, None))


def stage_cost_samples(ro: Rollouts, weights: CostWeights) -> np.ndarray:
    """Per-draw realized cost ``sum_k x_k^T Q_k x_k + u_k^T R_k u_k`` (mean weights)."""
    N = ro.u.shape[1]
    total = np.zeros(ro.x.shape[0])
    for k in range(N):
        xk, uk = ro.x[:, k], ro.u[:, k]
        total += np.einsum("ni,ij,nj->n", xk, weights.Q_mean[k], xk)
        total += np.einsum("ni,ij,nj->n", uk, weights.R_mean[k], uk)
    return total
