"""Robust short-stage machinery: invariant tube and tightened constraint sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import LinearModel, closed_loop
from .sets import (
    EmptySetError,
    HPolytope,
    Zonotope,
    linear_map,
    mrpi_outer,
    pontryagin_diff,
)


@dataclass(frozen=True)
class TubeSpec:
    """Invariant tube cross-section and the constraint sets tightened by it."""

    Z: Zonotope
    KZ: Zonotope
    Xbar: HPolytope
    Ubar: HPolytope
    K: np.ndarray
    Phi: np.ndarray
    alpha: float
    s: int

    def to_json(self) -> dict:
        return {
            "Z": self.Z.to_json(),
            "KZ": self.KZ.to_json(),
            "Xbar": self.Xbar.to_json(),
            "Ubar": self.Ubar.to_json(),
            "K": self.K.tolist(),
            "Phi": self.Phi.tolist(),
            "alpha": self.alpha,
            "s": self.s,
        }


def build_tube(model: LinearModel, K, eps: float, X: HPolytope, U: HPolytope) -> TubeSpec:
    """Compute the invariant tube Z and tightened sets Xbar = X - Z, Ubar = U - KZ.

    Fails loudly (EmptySetError) if the disturbance is too large for either
    constraint set to survive the tightening.
    """
    if not isinstance(model.disturbance, Zonotope):
        raise ValueError("build_tube requires a model with a bounded disturbance set")
    K = np.asarray(K, dtype=float)
    Phi = closed_loop(model, K)
    D = linear_map(model.G, model.disturbance)
    Z, alpha, s = mrpi_outer(Phi, D, eps)
    KZ = linear_map(K, Z)
    try:
        Xbar = pontryagin_diff(X, Z)
    except EmptySetError as e:
        raise EmptySetError(f"state set vanished under tube tightening: {e}") from None
    try:
        Ubar = pontryagin_diff(U, KZ)
    except EmptySetError as e:
        raise EmptySetError(f"input set vanished under tube tightening: {e}") from None
    return TubeSpec(Z=Z, KZ=KZ, Xbar=Xbar, Ubar=Ubar, K=K, Phi=Phi, alpha=alpha, s=s)


def nominal_step(Phi, B, xbar, nu) -> np.ndarray:
    """Disturbance-free nominal rollout step Phi xbar + B nu."""
    Phi = np.asarray(Phi, dtype=float)
    B = np.asarray(B, dtype=float)
    xbar = np.atleast_1d(np.asarray(xbar, dtype=float))
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    if Phi.shape[1] != xbar.shape[0] or B.shape[1] != nu.shape[0]:
        raise ValueError("dimension mismatch in nominal step")
    return Phi @ xbar + B @ nu


@dataclass(frozen=True)
class InitialStateEncoding:
    """Affine encoding of the tube-membership constraint x0 - xbar0 in Z.

    xbar0 = (x0 - center) - generators @ beta with box bounds |beta_i| <= 1,
    one auxiliary variable per generator.
    """

    offset: np.ndarray       # x0 - center of Z
    generators: np.ndarray   # columns multiply the auxiliary beta variables

    @property
    def n_aux(self) -> int:
        return self.generators.shape[1]

    def xbar0(self, beta) -> np.ndarray:
        return self.offset - self.generators @ np.atleast_1d(np.asarray(beta, dtype=float))


def initial_state_constraint(Z: Zonotope, x0) -> InitialStateEncoding:
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape[0] != Z.dim:
        raise ValueError("state dimension mismatch")
    return InitialStateEncoding(offset=x0 - Z.center, generators=Z.generators.copy())
