"""Chance-constrained admissible sets around forced equilibria.

A set for set-point r and convex region {Hx <= h} collects, over prediction
steps t >= 0, the tightened half-spaces

    [H_i H_i] A_aug^t [x~0; 0]  <=  h_i(r) - sqrt(2 Sigma_t_i) erfinv(1 - 2 a')

with h_i(r) = h_i - H_i (I - A_c)^-1 B_c r, Sigma_t_i the predicted row
variance, and a' = alpha / n_h the per-row risk after a Boole split of the
total risk alpha.

The infinite family is truncated at a finite horizon T with a computable
certificate: once the covariance recursion has converged and the geometric
decay of ||[H_i H_i] A_aug^t|| guarantees every later row is satisfied by
all candidates in a ball of radius `radius`, rows beyond T are provably
redundant there. Truncation is therefore sound (never admits a point the
infinite set rejects) for queries within the ball; queries outside the ball
return False.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dynamics import equilibrium_state
from .errors import ConstructionError, StabilityError
from .numerics import erf_inv, is_schur, solve_dlyap, spectral_radius

_COV_STEP_RTOL = 1e-10      # relative step change declaring the schedule converged
_HORIZON_CAP = 10_000
_EMPTY_SEARCH_POINTS = 512


@dataclass
class CovarianceSchedule:
    """Predicted covariance of [x~; e] over the horizon, plus per-row variances."""

    P_tilde: np.ndarray               # (T+1, 2n, 2n)
    Sigma: np.ndarray | None = None   # (T+1, n_h) when built against rows H

    @property
    def horizon(self):
        return self.P_tilde.shape[0] - 1


def _augmented_noise(cl):
    return cl.B_aug @ cl.B_aug.T + cl.Gamma_aug @ cl.Gamma_aug.T


def _initial_p_tilde(cl):
    n = cl.n_x
    P0 = np.zeros((2 * n, 2 * n))
    P0[n:, n:] = cl.P_inf   # estimate shift is measured at decision time
    return P0


def propagate_covariance(cl, T, H=None):
    """Run the augmented covariance recursion for T steps.

    P~_{t+1} = A_aug P~_t A_aug' + B_aug B_aug' + Gamma_aug Gamma_aug',
    started from blkdiag(0, P_inf). When constraint rows H are given, also
    returns Sigma[t, i] = [H_i H_i] P~_t [H_i H_i]'.
    """
    if T < 0:
        raise ValueError(f"horizon must be nonnegative, got {T}")
    W = _augmented_noise(cl)
    P = np.empty((T + 1,) + W.shape)
    P[0] = _initial_p_tilde(cl)
    for t in range(T):
        P[t + 1] = cl.A_aug @ P[t] @ cl.A_aug.T + W
    Sigma = None
    if H is not None:
        H = np.atleast_2d(np.asarray(H, dtype=float))
        Haug = np.hstack([H, H])
        Sigma = np.einsum("ij,tjk,ik->ti", Haug, P, Haug)
        Sigma = np.maximum(Sigma, 0.0)
    return CovarianceSchedule(P_tilde=P, Sigma=Sigma)


def tightening_margin(sigma_ti, alpha_prime):
    """Constraint tightening sqrt(2 Sigma) erfinv(1 - 2 alpha'), elementwise.

    Nonnegative for alpha' < 0.5; beyond that the probabilistic guarantee
    degenerates and a warning is issued (the margin turns into a relaxation).
    """
    if not 0.0 < alpha_prime < 1.0:
        raise ValueError(f"row risk must lie in (0, 1), got {alpha_prime}")
    if alpha_prime >= 0.5:
        warnings.warn(
            f"row risk {alpha_prime:.3f} >= 0.5: tightening margin is non-positive "
            "and the chance guarantee degenerates",
            stacklevel=2,
        )
    q = erf_inv(1.0 - 2.0 * alpha_prime)
    return np.sqrt(2.0 * np.asarray(sigma_ti, dtype=float)) * q


@dataclass
class AdmissibleSet:
    """Finitely determined tightened half-spaces on the shifted estimate.

    ``normals @ x <= offsets`` over the stored rows is the membership test;
    ``t_index``/``row_index`` record which prediction step and region row each
    stored row came from. ``radius`` is the certificate ball: verdicts are
    exact for ||x|| <= radius and conservatively False outside.
    """

    r: np.ndarray
    region_id: int
    normals: np.ndarray            # (m, n_x)
    offsets: np.ndarray            # (m,)
    t_index: np.ndarray            # (m,)
    row_index: np.ndarray          # (m,)
    horizon: int
    empty: bool
    radius: float
    h_shift: np.ndarray = field(repr=False)        # h(r), per region row
    offsets_steady: np.ndarray = field(repr=False)  # asymptotic tightened offsets

    @property
    def n_rows(self):
        return self.normals.shape[0]


def set_contains(S, x_tilde0, strict=False):
    """Membership of the estimate shift in the admissible set.

    Strict variant tests g.x <= b - eps with eps = 1e-6 (1+|b|), the interior
    test the connectivity condition requires.
    """
    if S.empty:
        return False
    x = np.asarray(x_tilde0, dtype=float)
    if x.ndim == 1:
        if np.linalg.norm(x) > S.radius * (1.0 + 1e-9):
            return False
        lhs = S.normals @ x
        rhs = S.offsets - 1e-6 * (1.0 + np.abs(S.offsets)) if strict else S.offsets
        return bool(np.all(lhs <= rhs))
    return contains_batch(S, x, strict=strict)


def contains_batch(S, X, strict=False):
    """Vectorized membership for points stored as columns of X (n_x, N)."""
    if S.empty:
        return np.zeros(X.shape[1], dtype=bool)
    inside_ball = np.linalg.norm(X, axis=0) <= S.radius * (1.0 + 1e-9)
    rhs = S.offsets - 1e-6 * (1.0 + np.abs(S.offsets)) if strict else S.offsets
    ok = np.all(S.normals @ X <= rhs[:, None], axis=0)
    return ok & inside_ball


class RegionRowSchedule:
    """Shared per-region data for admissible sets: row normals, variances and
    margins over the prediction horizon, the covariance limit, and the
    geometric-decay constants of the closed loop.

    One schedule serves every set-point, since the set depends on r only
    through the offset shift h(r).
    """

    def __init__(self, cl, region, alpha, radius):
        if not (is_schur(cl.A_c) and is_schur(cl.A_o)):
            raise StabilityError("closed loop must be Schur to build admissible sets")
        if not 0.0 < alpha < 1.0:
            raise ValueError(f"total risk must lie in (0, 1), got {alpha}")
        if region.n_rows < 1:
            raise ValueError("region must have at least one row")
        self.cl = cl
        self.region = region
        self.alpha = float(alpha)
        self.alpha_prime = float(alpha) / region.n_rows
        self.radius = float(radius)
        self.n_x = cl.n_x

        H = region.H
        self.Haug = np.hstack([H, H])
        self.q_row = erf_inv(1.0 - 2.0 * self.alpha_prime)
        if self.alpha_prime >= 0.5:
            warnings.warn(
                f"per-row risk {self.alpha_prime:.3f} >= 0.5: guarantee degenerates",
                stacklevel=2,
            )

        self.W = _augmented_noise(cl)
        self.P_limit = solve_dlyap(cl.A_aug, self.W)
        self.sigma_inf = np.maximum(
            np.einsum("ij,jk,ik->i", self.Haug, self.P_limit, self.Haug), 0.0
        )
        self.margin_inf = np.sqrt(2.0 * self.sigma_inf) * self.q_row
        self.haug_norm2 = np.sum(self.Haug**2, axis=1)

        self._rho, self._growth = self._contraction_constants(cl.A_aug)
        P0 = _initial_p_tilde(cl)
        self._d0_norm = np.linalg.norm(P0 - self.P_limit, 2)

        # per-step arrays, grown on demand
        self._P = P0
        self._rows = np.atleast_2d(self.Haug.copy())      # Haug @ A_aug^t
        self.g = [self._rows[:, : self.n_x].copy()]       # restriction to the x~ block
        self.full_norm = [np.linalg.norm(self._rows, axis=1)]
        self.sigma = [np.maximum(np.einsum("ij,jk,ik->i", self.Haug, self._P, self.Haug), 0.0)]
        self.step_diff = [np.inf]                          # ||P~_t - P~_{t-1}||_F
        self._p_norm = [np.linalg.norm(self._P)]

    @staticmethod
    def _contraction_constants(A):
        """(rho_hat, C) with ||A^s|| <= C rho_hat^s for all s >= 0 and rho_hat < 1."""
        m = 1
        Am = A.copy()
        norms = [1.0, np.linalg.norm(A, 2)]
        while m <= 4096:
            eta = np.linalg.norm(Am, 2)
            if eta < 1.0:
                rho = eta ** (1.0 / m)
                powers = np.eye(A.shape[0])
                growth = 1.0
                for j in range(1, m):
                    powers = powers @ A
                    growth = max(growth, np.linalg.norm(powers, 2) / rho**j)
                return rho, growth
            Am = Am @ Am
            m *= 2
        raise StabilityError(
            f"could not certify contraction: spectral radius {spectral_radius(A):.6f}"
        )

    @property
    def horizon(self):
        return len(self.sigma) - 1

    def ensure_horizon(self, T):
        while self.horizon < T:
            self._advance()

    def _advance(self):
        Pn = self.cl.A_aug @ self._P @ self.cl.A_aug.T + self.W
        self.step_diff.append(np.linalg.norm(Pn - self._P))
        self._P = Pn
        self._p_norm.append(np.linalg.norm(Pn))
        self._rows = self._rows @ self.cl.A_aug
        self.g.append(self._rows[:, : self.n_x].copy())
        self.full_norm.append(np.linalg.norm(self._rows, axis=1))
        self.sigma.append(
            np.maximum(np.einsum("ij,jk,ik->i", self.Haug, self._P, self.Haug), 0.0)
        )

    def margins(self, T):
        self.ensure_horizon(T)
        return np.sqrt(2.0 * np.asarray(self.sigma[: T + 1])) * self.q_row

    def sigma_envelope(self, t):
        """Bounds on Sigma_{t',i} for all t' >= t from the Lyapunov difference decay.

        P~_t - P~_inf = A^t (P~_0 - P~_inf) A'^t, so the deviation norm is at
        most (C rho^t)^2 ||P~_0 - P~_inf||, decreasing in t.
        """
        delta = self.haug_norm2 * (self._growth * self._rho**t) ** 2 * self._d0_norm
        upper = self.sigma_inf + delta
        lower = np.maximum(self.sigma_inf - delta, 0.0)
        return lower, upper

    def offsets_floor_beyond(self, t, h_r):
        """Lower bound on the tightened offsets at every step t' >= t."""
        lower, upper = self.sigma_envelope(t)
        if self.q_row >= 0.0:
            return h_r - np.sqrt(2.0 * upper) * self.q_row
        return h_r - np.sqrt(2.0 * lower) * self.q_row

    def finite_determination(self, h_r):
        """Smallest T whose tail is certified redundant within the radius ball.

        Requires the covariance step change below the convergence tolerance
        and, for every row, ||row_T|| C rho radius <= floor of all offsets
        beyond T (the floor must also be positive, otherwise no finite
        certificate exists and the set is empty by its steady offsets).
        """
        while True:
            T_avail = self.horizon
            if T_avail < 4:
                self.ensure_horizon(16)
                continue
            ts = np.arange(1, T_avail)                     # candidate T values
            step = np.asarray(self.step_diff[: T_avail + 1])
            p_norm = np.asarray(self._p_norm[: T_avail + 1])
            cov_ok = step[ts + 1] <= _COV_STEP_RTOL * np.maximum(p_norm[ts], 1e-300)

            delta = (self._growth * self._rho ** (ts + 1)) ** 2 * self._d0_norm
            sig_dev = self.haug_norm2[None, :] * delta[:, None]
            if self.q_row >= 0.0:
                floor = h_r[None, :] - np.sqrt(2.0 * (self.sigma_inf[None, :] + sig_dev)) * self.q_row
            else:
                floor = h_r[None, :] - np.sqrt(
                    2.0 * np.maximum(self.sigma_inf[None, :] - sig_dev, 0.0)
                ) * self.q_row
            tail = np.stack(self.full_norm[1:T_avail]) * (self._growth * self._rho * self.radius)
            ok = cov_ok & np.all((floor > 0.0) & (tail <= floor), axis=1)
            if np.any(ok):
                return int(ts[np.argmax(ok)]), True
            if T_avail >= _HORIZON_CAP:
                raise ConstructionError(
                    f"finite determination exceeded {_HORIZON_CAP} steps"
                )
            self.ensure_horizon(min(2 * T_avail, _HORIZON_CAP))

    def stamp(self, r, region_id, horizon=None):
        """Admissible set for set-point r, reusing the shared schedule."""
        r = np.asarray(r, dtype=float)
        x_eq = equilibrium_state(self.cl, r)
        h_r = self.region.h - self.region.H @ x_eq
        b_inf = h_r - self.margin_inf

        def _empty(T):
            return AdmissibleSet(
                r=r, region_id=region_id,
                normals=np.zeros((0, self.n_x)), offsets=np.zeros(0),
                t_index=np.zeros(0, dtype=int), row_index=np.zeros(0, dtype=int),
                horizon=T, empty=True, radius=self.radius,
                h_shift=h_r, offsets_steady=b_inf,
            )

        if np.min(b_inf) <= 0.0:
            # the equilibrium itself violates an asymptotic tightened row
            return _empty(0)

        if horizon is None:
            T, _ = self.finite_determination(h_r)
        else:
            T = int(horizon)
            self.ensure_horizon(T)

        margins = self.margins(T)                       # (T+1, n_h)
        offsets = h_r[None, :] - margins                # (T+1, n_h)
        g = np.asarray(self.g[: T + 1])                 # (T+1, n_h, n_x)
        g_norm = np.linalg.norm(g, axis=2)

        reach = g_norm * self.radius
        infeasible = offsets < -reach
        if np.any(infeasible):
            return _empty(T)
        keep = offsets <= reach                         # rows that can be active in the ball

        tt, ii = np.nonzero(keep)
        S = AdmissibleSet(
            r=r, region_id=region_id,
            normals=g[tt, ii], offsets=offsets[tt, ii],
            t_index=tt, row_index=ii,
            horizon=T, empty=False, radius=self.radius,
            h_shift=h_r, offsets_steady=b_inf,
        )
        if np.all(S.offsets >= 0.0):
            return S  # the equilibrium shift 0 is a feasibility witness
        if _feasible_point_exists(S):
            return S
        S.empty = True   # conservative: no witness found, drop the set
        return S


def _feasible_point_exists(S, n_points=_EMPTY_SEARCH_POINTS):
    """Multi-start sampled search for any point satisfying all stored rows."""
    if np.all(S.offsets >= 0.0):
        return True
    rng = np.random.Generator(np.random.Philox(12345))
    dim = S.normals.shape[1]
    for scale in (0.01, 0.1, 0.5, 1.0):
        X = rng.standard_normal((dim, n_points)) * (scale * S.radius / math.sqrt(dim))
        if np.any(contains_batch(S, X)):
            return True
    return False


def _infer_radius(region):
    """Certificate ball radius from the region's axis-aligned bounds.

    Uses the diameter of the box spanned by unit-vector rows, which bounds
    the shift between any estimate and any equilibrium inside the region.
    """
    dim = region.dim
    lo = np.full(dim, np.nan)
    hi = np.full(dim, np.nan)
    for Hi, hi_val in zip(region.H, region.h):
        nz = np.nonzero(Hi)[0]
        if nz.size != 1:
            continue
        j = nz[0]
        if Hi[j] > 0:
            hi[j] = min(hi_val / Hi[j], hi[j]) if not np.isnan(hi[j]) else hi_val / Hi[j]
        else:
            lo[j] = max(hi_val / Hi[j], lo[j]) if not np.isnan(lo[j]) else hi_val / Hi[j]
    if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
        raise ValueError(
            "region is not axis-bounded in every coordinate; pass an explicit radius"
        )
    return float(np.linalg.norm(hi - lo))


def build_admissible_set(cl, region, r, alpha, radius=None, horizon=None, region_id=0):
    """Chance-constrained admissible set for one set-point and one region.

    ``horizon`` overrides finite determination with an explicit truncation
    step (diagnostics; used to validate that extending the horizon changes
    nothing). ``radius`` is the certificate ball; by default it is inferred
    from the region's axis-aligned bounds.
    """
    if radius is None:
        radius = _infer_radius(region)
    sched = RegionRowSchedule(cl, region, alpha, radius)
    return sched.stamp(r, region_id, horizon=horizon)


def pointwise_chance_oracle(cl, region, r, x_tilde0, T, alpha):
    """Direct per-step Gaussian evaluation of the chance constraints.

    For every prediction step t <= T and region row i, computes
    Prob(H_i x_t <= h_i) from the predicted mean and variance with the
    Gaussian CDF (stdlib erf), and requires every row probability to reach
    1 - alpha/n_h. Reference path for set_contains; not used in construction.
    """
    x = np.asarray(x_tilde0, dtype=float)
    r = np.asarray(r, dtype=float)
    n_h = region.n_rows
    alpha_prime = alpha / n_h
    h_r = region.h - region.H @ equilibrium_state(cl, r)
    sched = propagate_covariance(cl, T, H=region.H)
    Haug = np.hstack([region.H, region.H])

    z = np.concatenate([x, np.zeros(cl.n_x)])
    rows = Haug.copy()
    for t in range(T + 1):
        mean = rows @ z
        sig = np.sqrt(sched.Sigma[t])
        for i in range(n_h):
            if sig[i] > 0.0:
                p = 0.5 * (1.0 + math.erf((h_r[i] - mean[i]) / (sig[i] * math.sqrt(2.0))))
            else:
                p = 1.0 if mean[i] <= h_r[i] else 0.0
            if p < 1.0 - alpha_prime:
                return False
        rows = rows @ cl.A_aug
    return True
