"""Discrete-time linear models, granularity projection, and LQR gains."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .sets import Zonotope, _as_matrix


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianNoise:
    """Zero-mean Gaussian disturbance with covariance `cov`."""

    cov: np.ndarray

    def __post_init__(self):
        c = _as_matrix(self.cov)
        if not np.allclose(c, c.T, atol=1e-12):
            raise ModelError("covariance must be symmetric")
        if np.min(np.linalg.eigvalsh((c + c.T) / 2.0)) < -1e-12:
            raise ModelError("covariance must be positive semidefinite")
        object.__setattr__(self, "cov", c)


@dataclass(frozen=True)
class LinearModel:
    """x_{k+1} = A x_k + B u_k + G d_k with bounded or Gaussian disturbance."""

    A: np.ndarray
    B: np.ndarray
    G: np.ndarray
    dt: float
    disturbance: Union[Zonotope, GaussianNoise, None] = None

    def __post_init__(self):
        A, B, G = _as_matrix(self.A), _as_matrix(self.B), _as_matrix(self.G)
        n = A.shape[0]
        if A.shape != (n, n) or B.shape[0] != n or G.shape[0] != n:
            raise ModelError("inconsistent model dimensions")
        if self.dt <= 0.0:
            raise ModelError("sampling time must be positive")
        d = self.disturbance
        if isinstance(d, Zonotope):
            if d.dim != G.shape[1]:
                raise ModelError("disturbance set dimension mismatch")
            if not np.allclose(np.abs(d.center), 0.0) and not d.contains(np.zeros(d.dim)):
                raise ModelError("bounded disturbance set must contain the origin")
        elif isinstance(d, GaussianNoise):
            if d.cov.shape[0] != G.shape[1]:
                raise ModelError("disturbance covariance dimension mismatch")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "G", G)

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.B.shape[1]


def step(model: LinearModel, x, u, d=None) -> np.ndarray:
    """One step of the disturbed dynamics A x + B u + G d."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if x.shape[0] != model.n_states or u.shape[0] != model.n_inputs:
        raise ModelError("state/input dimension mismatch")
    out = model.A @ x + model.B @ u
    if d is not None:
        d = np.atleast_1d(np.asarray(d, dtype=float))
        if d.shape[0] != model.G.shape[1]:
            raise ModelError("disturbance dimension mismatch")
        out = out + model.G @ d
    return out


@dataclass(frozen=True)
class ProjectionMap:
    """Surjective map from stacked (x, u) of the detailed model to (xi, v)."""

    matrix: np.ndarray
    n_coarse_states: int

    def __post_init__(self):
        M = _as_matrix(self.matrix)
        if np.linalg.matrix_rank(M) != M.shape[0]:
            raise ModelError("projection must be surjective (full row rank)")
        if not 0 < self.n_coarse_states < M.shape[0]:
            raise ModelError("invalid coarse state dimension")
        object.__setattr__(self, "matrix", M)

    @property
    def state_block(self) -> np.ndarray:
        """Rows mapping (x, u) to the coarse state xi."""
        return self.matrix[: self.n_coarse_states]

    @property
    def input_block(self) -> np.ndarray:
        """Rows mapping (x, u) to the coarse input v."""
        return self.matrix[self.n_coarse_states:]


def project(pm: ProjectionMap, x, u):
    """Apply the projection, returning (xi, v)."""
    xu = np.concatenate([np.atleast_1d(np.asarray(x, dtype=float)),
                         np.atleast_1d(np.asarray(u, dtype=float))])
    if xu.shape[0] != pm.matrix.shape[1]:
        raise ModelError("projection dimension mismatch")
    out = pm.matrix @ xu
    return out[: pm.n_coarse_states], out[pm.n_coarse_states:]


def spectral_radius(M) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(_as_matrix(M)))))


def closed_loop(model: LinearModel, K) -> np.ndarray:
    """Stabilized system matrix Phi = A + B K; raises if unstable."""
    K = _as_matrix(K)
    if K.shape != (model.n_inputs, model.n_states):
        raise ModelError("gain dimension mismatch")
    Phi = model.A + model.B @ K
    rho = spectral_radius(Phi)
    if rho >= 1.0:
        raise ModelError(f"closed loop is unstable (spectral radius {rho:.4f})")
    return Phi


@dataclass(frozen=True)
class GainPair:
    """Feedback gains for both granularities, validated for stability."""

    K: np.ndarray
    Kc: np.ndarray
    Phi: np.ndarray
    Phi_c: np.ndarray

    @classmethod
    def build(cls, detailed: LinearModel, coarse: LinearModel, K, Kc) -> "GainPair":
        Phi = closed_loop(detailed, K)
        Phi_c = closed_loop(coarse, Kc)
        return cls(_as_matrix(K), _as_matrix(Kc), Phi, Phi_c)


def dlqr(A, B, Q, R, tol: float = 1e-10, max_iter: int = 200000):
    """Infinite-horizon discrete LQR via fixed-point iteration of the Riccati equation.

    Returns (K, P) with A - B K stable and u = -K x the optimal regulator.
    """
    A, B, Q, R = map(_as_matrix, (A, B, Q, R))
    if np.min(np.linalg.eigvalsh((R + R.T) / 2.0)) <= 0.0:
        raise ModelError("R must be positive definite")
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        K = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = Q + A.T @ P @ (A - B @ K)
        P_next = (P_next + P_next.T) / 2.0
        done = np.max(np.abs(P_next - P)) <= tol
        P = P_next
        if done:
            break
    else:
        raise ModelError(f"Riccati iteration did not converge within {max_iter} steps")
    BtP = B.T @ P
    K = np.linalg.solve(R + BtP @ B, BtP @ A)
    if spectral_radius(A - B @ K) >= 1.0:
        raise ModelError("Riccati iteration produced an unstable gain")
    return K, P


def dare_residual(A, B, Q, R, P) -> float:
    """Norm of the discrete algebraic Riccati equation residual at P."""
    A, B, Q, R, P = map(_as_matrix, (A, B, Q, R, P))
    BtP = B.T @ P
    rhs = Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(R + BtP @ B, BtP @ A)
    return float(np.linalg.norm(P - rhs))
