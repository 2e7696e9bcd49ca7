"""Self-contained numerical routines: matrix exponential, Riccati and Lyapunov
solvers, error function and its inverse, chi-squared quantiles, and seeded
Gaussian sampling.

The scalar special functions are implemented from scratch (series, continued
fractions, Newton refinement) so results are bit-reproducible across platforms
and the module has no dependency beyond numpy arrays.
"""

import math

import numpy as np

from .errors import StabilityError, SynthesisError

SQRT_PI = math.sqrt(math.pi)

# Monte Carlo streams use numpy's Philox counter-based generator; the name is
# recorded in every output file so runs can be replayed.
RNG_ALGORITHM = "philox4x64"


# ---------------------------------------------------------------------------
# random streams


class RngStream:
    """Single-owner stream of reproducible Gaussian draws.

    Identical ``(seed, spawn_key)`` pairs yield identical sample sequences.
    Parallel consumers must each hold their own substream.
    """

    def __init__(self, seed, spawn_key=()):
        self.seed = int(seed)
        self.spawn_key = tuple(int(k) for k in spawn_key)
        self.algorithm = RNG_ALGORITHM
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def substream(self, index):
        """Independent stream derived from this stream's seed and an index."""
        return RngStream(self.seed, self.spawn_key + (index,))

    def standard_normal(self, *shape):
        return self._gen.standard_normal(shape)


def sample_standard_normal(stream, n):
    """n i.i.d. N(0,1) draws from the stream."""
    if n < 0:
        raise ValueError(f"sample count must be nonnegative, got {n}")
    return stream.standard_normal(n)


# ---------------------------------------------------------------------------
# matrix routines


def _square(M):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    return M


def spectral_radius(M):
    """Largest eigenvalue magnitude.

    CWH closed loops carry complex-conjugate dominant pairs, for which plain
    power iteration oscillates without converging; numpy's eigvalues on these
    desk-scale matrices are exact and cheap.
    """
    return float(np.max(np.abs(np.linalg.eigvals(_square(M)))))


def is_schur(M, slack=1e-6):
    """True when all eigenvalues are at least ``slack`` inside the unit circle."""
    return spectral_radius(M) < 1.0 - slack


def mat_exp(M):
    """Matrix exponential by scaling-and-squaring with a [6/6] Pade approximant.

    Relative accuracy is ~1e-13 on well-conditioned inputs, comfortably inside
    the 1e-10 contract.
    """
    M = _square(M)
    n = M.shape[0]
    norm = np.linalg.norm(M, np.inf)
    # theta chosen so the Pade-6 truncation error is below double rounding
    s = max(0, int(math.ceil(math.log2(norm / 0.5))) if norm > 0.5 else 0)
    A = M / (2.0**s)

    # [6/6] Pade: N(A) V(A)^-1 with N/V built from powers of A
    c = [1.0, 0.5, 5 / 44, 1 / 66, 1 / 792, 1 / 15840, 1 / 665280]
    A2 = A @ A
    A4 = A2 @ A2
    A6 = A4 @ A2
    U = A @ (c[1] * np.eye(n) + c[3] * A2 + c[5] * A4)
    V = c[0] * np.eye(n) + c[2] * A2 + c[4] * A4 + c[6] * A6
    E = np.linalg.solve(V - U, V + U)
    for _ in range(s):
        E = E @ E
    return E


def solve_dlyap(A, W):
    """Solve P = A P A^T + W for Schur A by the vectorized linear system.

    (I - A (x) A) vec(P) = vec(W) is exact for desk-scale dimensions; the
    result is symmetrized before return.
    """
    A = _square(A)
    W = _square(W)
    if A.shape != W.shape:
        raise ValueError(f"dimension mismatch: A {A.shape} vs W {W.shape}")
    if not is_schur(A, slack=0.0):
        raise StabilityError(
            f"spectral radius {spectral_radius(A):.6f} >= 1; Lyapunov fixed point undefined"
        )
    n = A.shape[0]
    lhs = np.eye(n * n) - np.kron(A, A)
    P = np.linalg.solve(lhs, W.reshape(-1)).reshape(n, n)
    P = 0.5 * (P + P.T)
    resid = np.linalg.norm(P - A @ P @ A.T - W) / (1.0 + np.linalg.norm(P))
    if resid > 1e-12:
        raise StabilityError(f"Lyapunov residual {resid:.2e} exceeds 1e-12")
    return P


def solve_dare(A, B, Q, R, tol=1e-12, max_iter=200_000):
    """Solve the discrete algebraic Riccati equation by fixed-point iteration.

    Iterates P <- Q + A'PA - A'PB (R + B'PB)^-1 B'PA from P = Q until the
    normalized update is below ``tol``. Returns (P, K) with
    K = -(R + B'PB)^-1 B'PA, so A + BK is Schur.
    """
    A = _square(A)
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B.reshape(-1, 1)
    Q = _square(Q)
    R = _square(R)
    n, m = B.shape
    if A.shape[0] != n or Q.shape[0] != n or R.shape[0] != m:
        raise ValueError(
            f"inconsistent dimensions: A {A.shape}, B {B.shape}, Q {Q.shape}, R {R.shape}"
        )
    try:
        np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        raise ValueError("R must be positive definite") from None

    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        S = R + BtP @ B
        Pn = Q + A.T @ P @ A - (BtP @ A).T @ np.linalg.solve(S, BtP @ A)
        Pn = 0.5 * (Pn + Pn.T)
        delta = np.linalg.norm(Pn - P) / (1.0 + np.linalg.norm(Pn))
        P = Pn
        if delta <= tol:
            break
    else:
        raise SynthesisError(
            f"Riccati iteration did not converge within {max_iter} steps"
        )

    K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    resid = np.linalg.norm(
        P - (Q + A.T @ P @ A - (B.T @ P @ A).T @ np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A))
    ) / (1.0 + np.linalg.norm(P))
    if resid > 1e-10:
        raise SynthesisError(f"Riccati residual {resid:.2e} exceeds 1e-10")
    return P, K


# ---------------------------------------------------------------------------
# scalar special functions


def erf(x):
    """Error function, (2/sqrt(pi)) * integral_0^x exp(-t^2) dt.

    Uses the non-alternating power series for |x| <= 2 (no cancellation) and
    the Lentz continued fraction for the complement beyond; absolute error is
    below 1e-15 everywhere.
    """
    if x != x:
        return x
    ax = abs(x)
    if ax == 0.0:
        return 0.0
    if ax <= 2.0:
        # erf(x) = 2x/sqrt(pi) * exp(-x^2) * sum (2x^2)^k / (2k+1)!!
        t = 2.0 * ax * ax
        term = 1.0
        total = 1.0
        k = 0
        while True:
            k += 1
            term *= t / (2 * k + 1)
            total += term
            if term < 1e-18 * total:
                break
        val = 2.0 * ax * math.exp(-ax * ax) / SQRT_PI * total
    else:
        val = 1.0 - _erfc_cf(ax)
    return val if x > 0 else -val


def _erfc_cf(x):
    """erfc for x > 2 via the continued fraction 1/(x + (1/2)/(x + (2/2)/(x + ...)))."""
    tiny = 1e-300
    f = x
    c = x
    d = 0.0
    k = 0
    while True:
        k += 1
        a = 0.5 * k
        d = x + a * d
        if abs(d) < tiny:
            d = tiny
        c = x + a / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = c * d
        f *= delta
        if abs(delta - 1.0) < 1e-17:
            break
        if k > 300:
            break
    return math.exp(-x * x) / (SQRT_PI * f)


def erf_inv(y):
    """Inverse error function on (-1, 1), |erf(erf_inv(y)) - y| <= 1e-14.

    Winitzki's closed-form estimate seeds a safeguarded Newton iteration
    against the series/continued-fraction erf above.
    """
    if not -1.0 < y < 1.0:
        raise ValueError(f"erf_inv domain is (-1, 1), got {y}")
    if y == 0.0:
        return 0.0
    ay = abs(y)

    # Winitzki 2008 initial estimate, ~3 digits
    a = 0.147
    ln1my2 = math.log1p(-ay * ay)
    u = 2.0 / (math.pi * a) + 0.5 * ln1my2
    x = math.sqrt(math.sqrt(u * u - ln1my2 / a) - u)

    lo, hi = 0.0, 6.5  # erf(6.5) == 1 at double precision
    for _ in range(60):
        fx = erf(x) - ay
        if fx > 0:
            hi = x
        else:
            lo = x
        step = fx * SQRT_PI / 2.0 * math.exp(x * x)
        xn = x - step
        if not lo < xn < hi:
            xn = 0.5 * (lo + hi)
        if abs(xn - x) <= 1e-16 * (1.0 + abs(xn)):
            x = xn
            break
        x = xn
    return x if y > 0 else -x


def _ln_gamma(a):
    """Lanczos log-gamma, |rel err| < 1e-13 for a > 0."""
    g = 7.0
    coeffs = (
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    )
    if a < 0.5:
        # reflection
        return math.log(math.pi / math.sin(math.pi * a)) - _ln_gamma(1.0 - a)
    a -= 1.0
    x = coeffs[0]
    for i in range(1, len(coeffs)):
        x += coeffs[i] / (a + i)
    t = a + g + 0.5
    return 0.5 * math.log(2.0 * math.pi) + (a + 0.5) * math.log(t) - t + math.log(x)


def _gammainc_lower_reg(a, x):
    """Regularized lower incomplete gamma P(a, x), series/continued fraction split."""
    if x < 0 or a <= 0:
        raise ValueError("gammainc requires x >= 0 and a > 0")
    if x == 0.0:
        return 0.0
    lg = _ln_gamma(a)
    if x < a + 1.0:
        # series: P(a,x) = x^a e^-x / Gamma(a) * sum_n x^n / (a (a+1) ... (a+n))
        term = 1.0 / a
        total = term
        n = 0
        while True:
            n += 1
            term *= x / (a + n)
            total += term
            if term < 1e-17 * total:
                break
        return total * math.exp(a * math.log(x) - x - lg)
    # Lentz continued fraction for Q(a,x)
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    f = d
    n = 0
    while True:
        n += 1
        an = -n * (n - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        f *= delta
        if abs(delta - 1.0) < 1e-17 or n > 500:
            break
    q = math.exp(a * math.log(x) - x - lg) * f
    return 1.0 - q


def chi2_cdf(dof, c):
    """P(chi^2_dof <= c)."""
    if dof < 1:
        raise ValueError(f"dof must be >= 1, got {dof}")
    if c <= 0.0:
        return 0.0
    return _gammainc_lower_reg(0.5 * dof, 0.5 * c)


def chi2_quantile(dof, beta):
    """Value c2 with Prob(chi^2_dof <= c2) = beta, to better than 1e-9.

    Bisection bracket refined by Newton steps on the CDF; the density is the
    CDF derivative in closed form.
    """
    if dof < 1:
        raise ValueError(f"dof must be >= 1, got {dof}")
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    if beta == 0.0:
        return 0.0

    hi = float(max(dof, 1))
    while chi2_cdf(dof, hi) < beta:
        hi *= 2.0
        if hi > 1e12:
            raise ValueError("quantile bracket exceeded 1e12")
    lo = 0.0
    x = 0.5 * hi
    a = 0.5 * dof
    lg = _ln_gamma(a)
    for _ in range(200):
        fx = chi2_cdf(dof, x) - beta
        if fx > 0:
            hi = x
        else:
            lo = x
        if x > 0:
            log_pdf = (a - 1.0) * math.log(0.5 * x) - 0.5 * x - lg - math.log(2.0)
            pdf = math.exp(log_pdf)
        else:
            pdf = 0.0
        xn = x - fx / pdf if pdf > 0 else 0.5 * (lo + hi)
        if not lo < xn < hi:
            xn = 0.5 * (lo + hi)
        if abs(xn - x) <= 1e-13 * (1.0 + abs(xn)):
            x = xn
            break
        x = xn
    return x
