"""Convex set primitives and disturbance-invariant set computation.

Constraint sets are kept in H-representation (HPolytope); disturbance
propagation sets are zonotopes, which are closed under linear maps and
Minkowski sums. The Pontryagin difference of an H-polytope minus a zonotope
is exact via support-function offset tightening, so no general polytope
Minkowski sums are ever needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog


class SetError(ValueError):
    """Raised for ill-posed set operations (unbounded support, empty result)."""


class EmptySetError(SetError):
    """Pontryagin difference (or construction) produced an empty set."""


def _as_matrix(a) -> np.ndarray:
    m = np.array(a, dtype=float)
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {m.shape}")
    return m


@dataclass(frozen=True)
class HPolytope:
    """Set {x : normals @ x <= offsets}. Rows exist only for constrained directions."""

    normals: np.ndarray
    offsets: np.ndarray
    check_nonempty: bool = True

    def __post_init__(self):
        A = _as_matrix(self.normals)
        b = np.atleast_1d(np.array(self.offsets, dtype=float))
        if A.shape[0] != b.shape[0]:
            raise ValueError("normals/offsets row count mismatch")
        if not np.all(np.isfinite(A)) or not np.all(np.isfinite(b)):
            raise ValueError("non-finite polytope data")
        if np.any(np.linalg.norm(A, axis=1) == 0.0):
            raise ValueError("zero normal row")
        object.__setattr__(self, "normals", A)
        object.__setattr__(self, "offsets", b)
        if self.check_nonempty and self.chebyshev_radius() < 0.0:
            raise EmptySetError("polytope is empty")

    @property
    def dim(self) -> int:
        return self.normals.shape[1]

    def chebyshev_radius(self) -> float:
        """Radius of the largest inscribed ball (negative means empty)."""
        A, b = self.normals, self.offsets
        norms = np.linalg.norm(A, axis=1)
        # max r s.t. A x + ||a_i|| r <= b; variables (x, r)
        c = np.zeros(self.dim + 1)
        c[-1] = -1.0
        A_ub = np.hstack([A, norms[:, None]])
        res = linprog(c, A_ub=A_ub, b_ub=b, bounds=[(None, None)] * self.dim + [(None, None)])
        if not res.success:
            return -np.inf
        return float(res.x[-1])

    def contains(self, x, tol: float = 1e-9) -> bool:
        return bool(np.all(self.normals @ np.asarray(x, dtype=float) <= self.offsets + tol))

    def to_json(self) -> dict:
        return {"type": "hpolytope", "normals": self.normals.tolist(), "offsets": self.offsets.tolist()}


@dataclass(frozen=True)
class Zonotope:
    """Set {center + G beta : |beta_i| <= 1}, generators as columns of G."""

    center: np.ndarray
    generators: np.ndarray = field(default=None)

    def __post_init__(self):
        c = np.atleast_1d(np.array(self.center, dtype=float))
        G = self.generators
        if G is None:
            G = np.zeros((c.shape[0], 0))
        G = _as_matrix(G)
        if G.shape[0] != c.shape[0]:
            raise ValueError("center/generator dimension mismatch")
        if not np.all(np.isfinite(c)) or not np.all(np.isfinite(G)):
            raise ValueError("non-finite zonotope data")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "generators", G)

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def n_generators(self) -> int:
        return self.generators.shape[1]

    @classmethod
    def box(cls, half_widths) -> "Zonotope":
        """Axis-aligned box centered at the origin."""
        w = np.atleast_1d(np.array(half_widths, dtype=float))
        return cls(np.zeros_like(w), np.diag(w))

    def interval_hull(self) -> np.ndarray:
        """Per-axis half-widths of the tightest enclosing axis box (about center)."""
        return np.sum(np.abs(self.generators), axis=1)

    def contains(self, x, tol: float = 1e-9) -> bool:
        """Membership via LP: x = c + G beta with |beta| <= 1."""
        r = np.asarray(x, dtype=float) - self.center
        G = self.generators
        if G.shape[1] == 0:
            return bool(np.max(np.abs(r), initial=0.0) <= tol)
        res = linprog(
            np.zeros(G.shape[1]),
            A_eq=G,
            b_eq=r,
            bounds=[(-1.0 - tol, 1.0 + tol)] * G.shape[1],
        )
        return bool(res.success)

    def to_json(self) -> dict:
        return {"type": "zonotope", "center": self.center.tolist(), "generators": self.generators.tolist()}


def support(s, direction) -> float:
    """Support function max_{x in s} d.x for a Zonotope or HPolytope."""
    d = np.atleast_1d(np.array(direction, dtype=float))
    if not np.all(np.isfinite(d)) or np.linalg.norm(d) == 0.0:
        raise ValueError("direction must be finite and nonzero")
    if isinstance(s, Zonotope):
        return float(s.center @ d + np.sum(np.abs(s.generators.T @ d)))
    if isinstance(s, HPolytope):
        res = linprog(-d, A_ub=s.normals, b_ub=s.offsets, bounds=[(None, None)] * s.dim)
        if res.status == 3:
            raise SetError(f"polytope unbounded in direction {d.tolist()}")
        if not res.success:
            raise SetError(f"support LP failed: {res.message}")
        return float(-res.fun)
    raise TypeError(f"unsupported set type {type(s)!r}")


def minkowski_sum(a: Zonotope, b: Zonotope) -> Zonotope:
    if a.dim != b.dim:
        raise ValueError("dimension mismatch in Minkowski sum")
    return Zonotope(a.center + b.center, np.hstack([a.generators, b.generators]))


def linear_map(M, s: Zonotope) -> Zonotope:
    M = _as_matrix(M)
    if M.shape[1] != s.dim:
        raise ValueError("dimension mismatch in linear map")
    return Zonotope(M @ s.center, M @ s.generators)


def pontryagin_diff(p: HPolytope, z: Zonotope) -> HPolytope:
    """Tighten each half-space offset by the subtrahend's support.

    Exact for a convex compact subtrahend. Raises EmptySetError naming the
    most violated half-space if the result is empty.
    """
    if p.dim != z.dim:
        raise ValueError("dimension mismatch in Pontryagin difference")
    tightened = p.offsets - np.array([support(z, a) for a in p.normals])
    try:
        return HPolytope(p.normals, tightened)
    except EmptySetError:
        # Least-infeasibility LP to attribute the emptiness to a half-space.
        A = p.normals
        c = np.zeros(p.dim + 1)
        c[-1] = 1.0
        A_ub = np.hstack([A, -np.ones((A.shape[0], 1))])
        res = linprog(c, A_ub=A_ub, b_ub=tightened, bounds=[(None, None)] * p.dim + [(0, None)])
        worst = int(np.argmax(A @ res.x[:-1] - tightened)) if res.success else 0
        raise EmptySetError(
            "Pontryagin difference is empty: subtrahend exceeds half-space "
            f"{worst} (normal {A[worst].tolist()}, offset {p.offsets[worst]:.6g}); "
            "the disturbance set is too large for the constraint set"
        ) from None


def reduce_generators(z: Zonotope, max_generators: int = 512) -> Zonotope:
    """Cap the generator count, merging the smallest-norm tail into an axis box.

    The result is an outer approximation of the input (support never shrinks).
    """
    if z.n_generators <= max_generators:
        return z
    norms = np.linalg.norm(z.generators, axis=0)
    order = np.argsort(norms)[::-1]
    n_keep = max(max_generators - z.dim, 0)
    keep = z.generators[:, order[:n_keep]]
    tail = z.generators[:, order[n_keep:]]
    box = np.diag(np.sum(np.abs(tail), axis=1))
    return Zonotope(z.center, np.hstack([keep, box]))


def _box_facet_data(d: Zonotope) -> np.ndarray:
    """Half-widths of an origin-centered axis-box zonotope (validated)."""
    if np.any(d.center != 0.0):
        raise SetError("disturbance set must be centered at the origin")
    G = d.generators
    w = np.sum(np.abs(G), axis=1)
    if np.any(w <= 0.0):
        raise SetError("disturbance set must have full-dimensional axis extent")
    # Each generator must be axis-aligned for the facet directions to be +-e_i.
    for j in range(G.shape[1]):
        if np.count_nonzero(G[:, j]) > 1:
            raise SetError("mrpi_outer requires an axis-aligned box disturbance set")
    return w


def mrpi_outer(Phi, D: Zonotope, eps: float = 1e-3, max_power: int = 500):
    """Outer approximation of the minimal disturbance-invariant set.

    Finds the smallest s with Phi^s D inside alpha*D for
    alpha <= eps/(1+eps), then returns
    Z = (1-alpha)^{-1} (D + Phi D + ... + Phi^{s-1} D), which is
    disturbance invariant (Phi Z + D inside Z) and within a factor (1+eps)
    of the minimal set in every support direction.

    Returns (Z, alpha, s).
    """
    Phi = _as_matrix(Phi)
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    rho = np.max(np.abs(np.linalg.eigvals(Phi)))
    if rho >= 1.0:
        raise SetError(f"closed-loop matrix is not stable (spectral radius {rho:.4f})")
    w = _box_facet_data(D)
    target = eps / (1.0 + eps)
    gens = []
    M = np.eye(Phi.shape[0])
    for s in range(1, max_power + 1):
        gens.append(M @ D.generators)
        M = Phi @ M
        # alpha(s): smallest scaling with Phi^s D inside alpha*D, via box facets
        PD = M @ D.generators
        alpha = float(np.max(np.sum(np.abs(PD), axis=1) / w))
        if alpha <= target:
            G = np.hstack(gens) / (1.0 - alpha)
            return reduce_generators(Zonotope(np.zeros(Phi.shape[0]), G)), alpha, s
    raise SetError(f"mrpi_outer did not terminate within {max_power} powers")
