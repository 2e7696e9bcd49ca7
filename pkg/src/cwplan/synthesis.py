"""Gain synthesis: LQR feedback, dual-Riccati observer gain, set-point
feedforward, and the one-call closed-loop assembly used by the CLI.
"""

import numpy as np

from .dynamics import assemble_closed_loop
from .errors import SynthesisError
from .numerics import solve_dare


def lqr_gain(A, B, Q_K, R_K):
    """Stabilizing state-feedback gain K with A+BK Schur."""
    _, K = solve_dare(A, B, Q_K, R_K)
    return K


def observer_gain(A, C, Q_L, R_L):
    """Observer gain L making A+LC Schur.

    Solved as the dual Riccati problem on (A^T, C^T); the sign convention
    matches an innovation term +L(y_hat - y), so the stable error matrix is
    A+LC and L = -A P C^T (C P C^T + R_L)^-1.
    """
    A = np.asarray(A, dtype=float)
    C = np.asarray(C, dtype=float)
    _, K_dual = solve_dare(A.T, C.T, Q_L, R_L)
    return K_dual.T


def feedforward_gain(A, B, C, K):
    """Feedforward G = (C (I - A - BK)^-1 B)^-1 so steady-state output tracks r."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    C = np.asarray(C, dtype=float)
    K = np.asarray(K, dtype=float)
    inner = C @ np.linalg.solve(np.eye(A.shape[0]) - A - B @ K, B)
    if inner.shape[0] != inner.shape[1]:
        raise SynthesisError(
            f"feedforward map is {inner.shape}, not square; set-point not trackable"
        )
    cond = np.linalg.cond(inner)
    if not np.isfinite(cond) or cond > 1e12:
        raise SynthesisError(f"feedforward map is singular (cond {cond:.2e})")
    return np.linalg.inv(inner)


def synthesize(sys, Q_K, R_K, Q_L, R_L):
    """Compute (K, L, G) for the plant and assemble the closed loop."""
    K = lqr_gain(sys.A, sys.B, Q_K, R_K)
    L = observer_gain(sys.A, sys.C, Q_L, R_L)
    G = feedforward_gain(sys.A, sys.B, sys.C, K)
    return assemble_closed_loop(sys, K, L, G)
