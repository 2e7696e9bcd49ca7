"""CWH relative-motion model: continuous matrices, zero-order-hold
discretization, noise/output maps, and the closed-loop / augmented
prediction systems used for covariance propagation.

State ordering is [x1, x2, x3, dx1, dx2, dx3]: x1 radial, x3 along the
target's angular momentum, x2 completing the right-handed triad.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import StabilityError
from .numerics import is_schur, mat_exp, solve_dlyap, spectral_radius


@dataclass(frozen=True)
class LinearSystem:
    """Discrete-time plant x+ = Ax + Bu + Gamma w, y = Cx + Fv."""

    A: np.ndarray
    B: np.ndarray
    Gamma: np.ndarray
    C: np.ndarray
    F: np.ndarray
    dt: float

    def __post_init__(self):
        n_x = self.A.shape[0]
        n_y = self.C.shape[0]
        if self.A.shape != (n_x, n_x):
            raise ValueError(f"A must be square, got {self.A.shape}")
        if self.B.shape[0] != n_x:
            raise ValueError(f"B row count {self.B.shape[0]} != n_x {n_x}")
        if self.Gamma.shape[0] != n_x:
            raise ValueError(f"Gamma row count {self.Gamma.shape[0]} != n_x {n_x}")
        if self.C.shape[1] != n_x:
            raise ValueError(f"C column count {self.C.shape[1]} != n_x {n_x}")
        if self.F.shape[0] != n_y:
            raise ValueError(f"F row count {self.F.shape[0]} != n_y {n_y}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")

    @property
    def n_x(self):
        return self.A.shape[0]

    @property
    def n_u(self):
        return self.B.shape[1]

    @property
    def n_y(self):
        return self.C.shape[0]


@dataclass(frozen=True)
class ClosedLoop:
    """Plant plus stabilizing gains and all derived prediction matrices.

    Immutable after assembly; safe to share across workers.
    """

    sys: LinearSystem
    K: np.ndarray
    L: np.ndarray
    G: np.ndarray
    A_c: np.ndarray = field(repr=False)
    B_c: np.ndarray = field(repr=False)
    Gamma_c: np.ndarray = field(repr=False)
    A_o: np.ndarray = field(repr=False)
    B_o: np.ndarray = field(repr=False)
    A_aug: np.ndarray = field(repr=False)
    B_aug: np.ndarray = field(repr=False)
    Gamma_aug: np.ndarray = field(repr=False)
    P_inf: np.ndarray = field(repr=False)

    @property
    def n_x(self):
        return self.sys.n_x


def cwh_continuous(n):
    """Continuous-time CWH matrices (A_ct, B_ct) for orbital rate n [rad/s]."""
    if n < 0:
        raise ValueError(f"orbital rate must be nonnegative, got {n}")
    A_ct = np.zeros((6, 6))
    A_ct[0, 3] = A_ct[1, 4] = A_ct[2, 5] = 1.0
    A_ct[3, 0] = 3.0 * n * n
    A_ct[3, 4] = 2.0 * n
    A_ct[4, 3] = -2.0 * n
    A_ct[5, 2] = -n * n
    B_ct = np.vstack([np.zeros((3, 3)), np.eye(3)])
    return A_ct, B_ct


def discretize(A_ct, B_ct, dt):
    """Zero-order-hold discretization via the augmented matrix exponential.

    exp([[A, B], [0, 0]] * dt) carries both e^{A dt} and the held-input
    integral in one evaluation, so A and B stay mutually consistent.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    A_ct = np.asarray(A_ct, dtype=float)
    B_ct = np.asarray(B_ct, dtype=float)
    n, m = B_ct.shape
    M = np.zeros((n + m, n + m))
    M[:n, :n] = A_ct * dt
    M[:n, n:] = B_ct * dt
    E = mat_exp(M)
    return E[:n, :n], E[:n, n:]


def default_noise_model():
    """Process/sensor noise maps and position-only output matrix.

    Disturbance enters the velocity states and the position measurement is
    corrupted additively, both scaled to centimeter-level unit noise.
    """
    Gamma = np.vstack([np.zeros((3, 3)), np.eye(3)]) / 100.0
    F = np.eye(3) / 100.0
    C = np.hstack([np.eye(3), np.zeros((3, 3))])
    return Gamma, F, C


def cwh_system(n, dt):
    """Discrete CWH plant with the default noise and output maps."""
    A_ct, B_ct = cwh_continuous(n)
    A, B = discretize(A_ct, B_ct, dt)
    Gamma, F, C = default_noise_model()
    return LinearSystem(A=A, B=B, Gamma=Gamma, C=C, F=F, dt=dt)


def assemble_closed_loop(sys, K, L, G):
    """Populate every derived closed-loop matrix and the steady covariance.

    Raises StabilityError when A+BK or A+LC is not Schur, since every
    downstream guarantee assumes both.
    """
    K = np.asarray(K, dtype=float)
    L = np.asarray(L, dtype=float)
    G = np.asarray(G, dtype=float)
    n_x = sys.n_x

    A_c = sys.A + sys.B @ K
    A_o = sys.A + L @ sys.C
    if not is_schur(A_c):
        raise StabilityError(
            f"A+BK has spectral radius {spectral_radius(A_c):.6f}; gain K is not stabilizing"
        )
    if not is_schur(A_o):
        raise StabilityError(
            f"A+LC has spectral radius {spectral_radius(A_o):.6f}; gain L is not stabilizing"
        )

    B_c = sys.B @ G
    Gamma_c = np.hstack([-L @ sys.C, -L @ sys.F])
    B_o = np.hstack([sys.Gamma, L @ sys.F])
    P_inf = solve_dlyap(A_o, B_o @ B_o.T)

    n_v = sys.F.shape[1]
    A_aug = np.zeros((2 * n_x, 2 * n_x))
    A_aug[:n_x, :n_x] = A_c
    A_aug[:n_x, n_x:] = -L @ sys.C
    A_aug[n_x:, n_x:] = A_o
    B_aug = np.vstack([-L @ sys.F, L @ sys.F])
    Gamma_aug = np.vstack([np.zeros((n_x, sys.Gamma.shape[1])), sys.Gamma])
    assert B_aug.shape == (2 * n_x, n_v)

    return ClosedLoop(
        sys=sys, K=K, L=L, G=G,
        A_c=A_c, B_c=B_c, Gamma_c=Gamma_c,
        A_o=A_o, B_o=B_o,
        A_aug=A_aug, B_aug=B_aug, Gamma_aug=Gamma_aug,
        P_inf=P_inf,
    )


def equilibrium_state(cl, r):
    """Forced equilibrium (I - A_c)^-1 B_c r held by constant feedback+feedforward."""
    r = np.asarray(r, dtype=float)
    I = np.eye(cl.n_x)
    try:
        return np.linalg.solve(I - cl.A_c, cl.B_c @ r)
    except np.linalg.LinAlgError:
        raise StabilityError("I - A_c is singular; closed loop has no unique equilibrium") from None
