"""Half-space polytopes in state space and the convex decomposition of
box-minus-obstacle free space.

Every region emitted by the decomposition is the outer set intersected with
the complement half-space of one obstacle facet, so the union of regions is
exactly the outer set minus the obstacle interior whenever the obstacle is a
convex polytope.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Polytope:
    """{x : H x <= h} with one row per half-space."""

    H: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        h = np.atleast_1d(np.asarray(self.h, dtype=float)).reshape(-1)
        if H.shape[0] != h.shape[0]:
            raise ValueError(f"row mismatch: H has {H.shape[0]} rows, h has {h.shape[0]}")
        if not (np.all(np.isfinite(H)) and np.all(np.isfinite(h))):
            raise ValueError("polytope data must be finite")
        if H.shape[0] and np.any(np.all(H == 0.0, axis=1)):
            raise ValueError("polytope has an all-zero row")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "h", h)

    @property
    def n_rows(self):
        return self.H.shape[0]

    @property
    def dim(self):
        return self.H.shape[1]

    def contains(self, x, tol=1e-9):
        """Row-wise H x <= h + tol*(1+|h|)."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim and x.shape[0] != self.dim:
            raise ValueError(f"point dimension {x.shape} does not match polytope dim {self.dim}")
        slack = tol * (1.0 + np.abs(self.h))
        if x.ndim == 1:
            return bool(np.all(self.H @ x <= self.h + slack))
        # batch: points are columns
        return np.all(self.H @ x <= (self.h + slack)[:, None], axis=0)

    def intersect_halfspace(self, normal, offset):
        """New polytope with one extra row normal . x <= offset."""
        return Polytope(
            H=np.vstack([self.H, np.asarray(normal, dtype=float).reshape(1, -1)]),
            h=np.concatenate([self.h, [float(offset)]]),
        )


def contains(poly, x, tol=1e-9):
    return poly.contains(x, tol=tol)


def box(lower, upper):
    """Axis-aligned box as a polytope: x_i <= u_i and -x_i <= -l_i."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if lower.shape != upper.shape or lower.ndim != 1:
        raise ValueError("bounds must be 1-D and of equal length")
    if np.any(lower >= upper):
        raise ValueError("each lower bound must be below its upper bound")
    n = lower.size
    return Polytope(H=np.vstack([np.eye(n), -np.eye(n)]), h=np.concatenate([upper, -lower]))


@dataclass(frozen=True)
class RegionSet:
    """Convex cover of the free space outer \\ interior(obstacle)."""

    regions: tuple
    outer: Polytope
    obstacle: Polytope | None

    @property
    def n_regions(self):
        return len(self.regions)

    def covering_regions(self, x, tol=1e-9):
        """Indices of regions containing x."""
        return [i for i, reg in enumerate(self.regions) if reg.contains(x, tol=tol)]


def decompose_free_space(outer, obstacle):
    """Cover outer \\ interior(obstacle) with one convex region per obstacle facet.

    Region i is outer intersected with {x : Q_i x >= q_i}, the complement of
    facet i. For a convex polytopic obstacle the union of regions equals the
    free set exactly: a point is free iff it violates at least one facet.
    """
    if obstacle is None or obstacle.n_rows == 0:
        return RegionSet(regions=(outer,), outer=outer, obstacle=None)
    if obstacle.dim != outer.dim:
        raise ValueError(
            f"obstacle dim {obstacle.dim} does not match outer dim {outer.dim}"
        )
    regions = tuple(
        outer.intersect_halfspace(-obstacle.H[i], -obstacle.h[i])
        for i in range(obstacle.n_rows)
    )
    return RegionSet(regions=regions, outer=outer, obstacle=obstacle)


def pyramid_obstacle(apex, axis, half_angle, faces, dim=6):
    """Polyhedral keep-out cone with the given number of planar facets.

    The facets are planes through the apex containing adjacent pairs of rays
    on the circular cone of the given half-angle, so the polyhedron is
    inscribed in (a subset of) the true cone. Rows act on the position
    coordinates only; velocity columns are zero. Returns Q x <= q with
    q = Q @ apex (apex at the origin gives a homogeneous cone).
    """
    apex = np.asarray(apex, dtype=float).reshape(3)
    axis = np.asarray(axis, dtype=float).reshape(3)
    norm = np.linalg.norm(axis)
    if norm < 1e-12:
        raise ValueError("cone axis must be a nonzero vector")
    if not 0.0 < half_angle < np.pi / 2:
        raise ValueError(f"half angle must lie in (0, pi/2), got {half_angle}")
    if faces < 3:
        raise ValueError(f"a polyhedral cone needs at least 3 faces, got {faces}")
    a = axis / norm

    # orthonormal pair spanning the plane normal to the axis
    helper = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(a, helper)
    u /= np.linalg.norm(u)
    w = np.cross(a, u)

    thetas = 2.0 * np.pi * np.arange(faces) / faces
    rays = (
        np.cos(half_angle) * a[None, :]
        + np.sin(half_angle) * (np.cos(thetas)[:, None] * u[None, :] + np.sin(thetas)[:, None] * w[None, :])
    )

    Q_pos = np.zeros((faces, 3))
    for i in range(faces):
        n_i = np.cross(rays[i], rays[(i + 1) % faces])
        n_i /= np.linalg.norm(n_i)
        if n_i @ a > 0:
            n_i = -n_i
        Q_pos[i] = n_i

    Q = np.zeros((faces, dim))
    Q[:, :3] = Q_pos
    q = Q_pos @ apex
    return Polytope(H=Q, h=q)
