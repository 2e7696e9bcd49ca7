"""Stochastic closed-loop simulator: plant + Luenberger observer + switching
supervisor executing a planned node sequence, plus the Monte Carlo harness
that aggregates chance-constraint satisfaction, error covariance, trajectory
tubes, and arrival statistics.

The Monte Carlo path is vectorized across episodes but draws noise from
per-episode substreams in the same order as the single-episode path, so a
batch run and a loop of `run_episode` calls produce identical states.
"""

from dataclasses import dataclass, field

import numpy as np

from .admissible import contains_batch, set_contains
from .dynamics import equilibrium_state
from .errors import StartError
from .net import switching_ready
from .numerics import RngStream, chi2_quantile, erf_inv

DEFAULT_STEP_CAP = 5_000
_BAND_BINS = 4096


@dataclass
class SimState:
    k: int
    x: np.ndarray
    x_hat: np.ndarray
    r: np.ndarray
    cursor: int = 0


@dataclass
class Trace:
    x: np.ndarray            # (steps+1, 6)
    x_hat: np.ndarray        # (steps+1, 6)
    u: np.ndarray            # (steps, 3)
    r_index: np.ndarray      # (steps+1,) path cursor active at each step
    sat_box: np.ndarray      # (steps+1, n_box_rows) row-wise true-state satisfaction
    outside_obstacle: np.ndarray  # (steps+1,) true when clear of the keep-out zone
    arrival_step: int        # first step with the final set-point active, -1 if never
    e0_mode: str
    meta: dict = field(default_factory=dict)

    @property
    def e(self):
        return self.x - self.x_hat


@dataclass
class TubeEllipsoid:
    center: np.ndarray       # mean position at one step
    shape: np.ndarray        # 3x3 position covariance
    radius2: float           # chi-squared quantile for the tube probability
    mode: str                # "empirical" or "analytic"

    def contains(self, p):
        d = np.asarray(p, dtype=float) - self.center
        return float(d @ np.linalg.solve(self.shape, d)) <= self.radius2


@dataclass
class ExecutablePlan:
    """Plan data the supervisor needs at run time: node set-points along the
    path, per-hop certificate sets, and the start node's sets."""

    set_points: np.ndarray   # (n_path, 3)
    equilibria: np.ndarray   # (n_path, 6)
    hop_sets: list           # hop c: admissible set of path node c+1 in its certificate region
    start_sets: list         # non-empty region sets of the start node

    @classmethod
    def from_net(cls, net, path, cl):
        sp = np.array([net.nodes[i] for i in path.nodes])
        eq = np.array([equilibrium_state(cl, r) for r in sp])
        hop_sets = [
            net.node_sets[path.nodes[c + 1]][path.regions[c]]
            for c in range(path.n_hops)
        ]
        start_sets = [S for S in net.node_sets[path.nodes[0]] if not S.empty]
        return cls(set_points=sp, equilibria=eq, hop_sets=hop_sets, start_sets=start_sets)

    @property
    def n_path(self):
        return self.set_points.shape[0]


def step(cl, state, w, v, plan=None):
    """One closed-loop step: control from the current estimate and set-point,
    plant and observer updates, then at most one supervisor switch tried
    against the next hop's certificate set using the new estimate."""
    sys = cl.sys
    u = cl.K @ state.x_hat + cl.G @ state.r
    x_next = sys.A @ state.x + sys.B @ u + sys.Gamma @ w
    y = sys.C @ state.x + sys.F @ v
    x_hat_next = sys.A @ state.x_hat + sys.B @ u + cl.L @ (sys.C @ state.x_hat - y)

    cursor = state.cursor
    r = state.r
    if plan is not None and cursor < plan.n_path - 1:
        r_next = plan.set_points[cursor + 1]
        if switching_ready(cl, plan.hop_sets[cursor], x_hat_next, r_next):
            cursor += 1
            r = r_next
    return SimState(k=state.k + 1, x=x_next, x_hat=x_hat_next, r=r, cursor=cursor)


def _chol_psd(P, jitter=1e-12):
    """Cholesky factor with a symmetric-psd projection fallback."""
    P = 0.5 * (P + P.T)
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(P)
        if np.min(vals) < -jitter * max(1.0, np.max(np.abs(vals))):
            raise ValueError("covariance is not positive semidefinite") from None
        vals = np.clip(vals, 0.0, None)
        return np.linalg.cholesky(vecs @ np.diag(vals) @ vecs.T + jitter * np.eye(P.shape[0]))


def _draw_e0(cl, stream, e0_mode):
    if e0_mode == "steady":
        return _chol_psd(cl.P_inf) @ stream.standard_normal(cl.n_x)
    if e0_mode == "zero":
        return np.zeros(cl.n_x)
    raise ValueError(f"unknown e0 mode {e0_mode!r}")


def _start_admissible(cl, plan, x_hat0):
    shift = x_hat0 - plan.equilibria[0]
    return any(set_contains(S, shift, strict=False) for S in plan.start_sets)


def run_episode(
    cl, net, path, x0, steps, stream,
    e0_mode="steady", check_start=True,
):
    """Simulate one noisy episode along the path from true state x0.

    The initial estimation error is drawn from N(0, P_inf) (mode "steady",
    the standing assumption behind the chance guarantee) or zeroed (mode
    "zero", diagnostics only: the guarantee does not apply and the trace is
    labeled accordingly). Constraint bookkeeping evaluates the TRUE state.
    """
    plan = ExecutablePlan.from_net(net, path, cl)
    box = net.region_map.outer
    obstacle = net.region_map.obstacle
    x0 = np.asarray(x0, dtype=float)
    e0 = _draw_e0(cl, stream, e0_mode)
    x_hat0 = x0 - e0
    if check_start and not _start_admissible(cl, plan, x_hat0):
        raise StartError(
            "initial estimate shift lies in no admissible set of the start node"
        )

    xs = np.empty((steps + 1, cl.n_x))
    xhs = np.empty((steps + 1, cl.n_x))
    us = np.empty((steps, cl.sys.n_u))
    r_idx = np.empty(steps + 1, dtype=int)
    sat_box = np.empty((steps + 1, box.n_rows), dtype=bool)
    outside = np.empty(steps + 1, dtype=bool)

    state = SimState(k=0, x=x0, x_hat=x_hat0, r=plan.set_points[0], cursor=0)
    arrival = -1
    for k in range(steps + 1):
        xs[k] = state.x
        xhs[k] = state.x_hat
        r_idx[k] = state.cursor
        sat_box[k] = box.H @ state.x <= box.h
        outside[k] = (
            True if obstacle is None else not bool(np.all(obstacle.H @ state.x <= obstacle.h))
        )
        if arrival < 0 and state.cursor == plan.n_path - 1:
            arrival = k
        if k == steps:
            break
        w = stream.standard_normal(3)
        v = stream.standard_normal(3)
        us[k] = cl.K @ state.x_hat + cl.G @ state.r
        state = step(cl, state, w, v, plan=plan)

    return Trace(
        x=xs, x_hat=xhs, u=us, r_index=r_idx,
        sat_box=sat_box, outside_obstacle=outside,
        arrival_step=arrival, e0_mode=e0_mode,
        meta={"seed": stream.seed, "spawn_key": stream.spawn_key, "rng": stream.algorithm},
    )


def monte_carlo(
    cl, net, path, x0, n_runs, steps, seed,
    e0_mode="steady", beta=0.9, collect_traces=0, check_start=True,
    chunk=256,
):
    """Batch of independent episodes with deterministically merged summaries.

    Episode i draws from substream (seed, i); `run_episode` with the same
    substream reproduces episode i's states. Returns (summary, traces) with
    full traces kept for the first `collect_traces` episodes.
    """
    if n_runs < 1:
        raise ValueError(f"need at least one run, got {n_runs}")
    plan = ExecutablePlan.from_net(net, path, cl)
    box = net.region_map.outer
    obstacle = net.region_map.obstacle
    n_x = cl.n_x
    x0 = np.asarray(x0, dtype=float)
    root = RngStream(seed)
    streams = [root.substream(i) for i in range(n_runs)]

    if e0_mode == "steady":
        Lc = _chol_psd(cl.P_inf)
        E0 = np.column_stack([Lc @ s.standard_normal(n_x) for s in streams])
    elif e0_mode == "zero":
        E0 = np.zeros((n_x, n_runs))
    else:
        raise ValueError(f"unknown e0 mode {e0_mode!r}")

    X = np.tile(x0[:, None], (1, n_runs))
    Xh = X - E0
    if check_start:
        shifts = Xh - plan.equilibria[0][:, None]
        ok = np.zeros(n_runs, dtype=bool)
        for S in plan.start_sets:
            ok |= contains_batch(S, shifts, strict=False)
        if not np.all(ok):
            raise StartError(
                f"{int(np.sum(~ok))}/{n_runs} episodes start outside every "
                "admissible set of the start node"
            )

    cursor = np.zeros(n_runs, dtype=int)
    arrival = np.full(n_runs, -1, dtype=int)

    sat_box_freq = np.zeros(steps + 1)
    outside_freq = np.zeros(steps + 1)
    safe_freq = np.zeros(steps + 1)
    tube_cover = np.zeros(steps + 1)
    pos_mean = np.zeros((steps + 1, 3))
    pos_cov = np.zeros((steps + 1, 3, 3))

    e_sum = np.zeros(n_x)
    e_outer = np.zeros((n_x, n_x))
    e_count = 0
    band_scale = 10.0 * np.sqrt(np.maximum(np.diag(cl.P_inf), 1e-300))
    band_hist = np.zeros((n_x, _BAND_BINS), dtype=np.int64)

    m = min(collect_traces, n_runs)
    if m:
        tx = np.empty((steps + 1, m, n_x))
        txh = np.empty((steps + 1, m, n_x))
        tu = np.empty((steps, m, cl.sys.n_u))
        tcur = np.empty((steps + 1, m), dtype=int)

    c2 = chi2_quantile(3, beta)
    noise = None
    last_hop = plan.n_path - 1
    if last_hop == 0:
        arrival[:] = 0

    for k in range(steps + 1):
        sat_rows = box.H @ X <= box.h[:, None]
        sat = np.all(sat_rows, axis=0)
        if obstacle is None:
            outside = np.ones(n_runs, dtype=bool)
        else:
            outside = ~np.all(obstacle.H @ X <= obstacle.h[:, None], axis=0)
        sat_box_freq[k] = np.mean(sat)
        outside_freq[k] = np.mean(outside)
        safe_freq[k] = np.mean(sat & outside)

        E = X - Xh
        e_sum += E.sum(axis=1)
        e_outer += E @ E.T
        e_count += n_runs
        bins = np.clip(
            (np.abs(E) / band_scale[:, None] * _BAND_BINS).astype(int), 0, _BAND_BINS - 1
        )
        for ax in range(n_x):
            band_hist[ax] += np.bincount(bins[ax], minlength=_BAND_BINS)

        P = X[:3]
        mu = P.mean(axis=1)
        pos_mean[k] = mu
        D = P - mu[:, None]
        cov = (D @ D.T) / max(n_runs - 1, 1)
        pos_cov[k] = cov
        d2 = np.einsum(
            "ij,ij->j", D, np.linalg.solve(cov + 1e-12 * np.eye(3), D)
        )
        tube_cover[k] = np.mean(d2 <= c2)

        newly = (arrival < 0) & (cursor == last_hop)
        arrival[newly] = k
        if m:
            tx[k] = X[:, :m].T
            txh[k] = Xh[:, :m].T
            tcur[k] = cursor[:m]
        if k == steps:
            break

        if k % chunk == 0:
            span = min(chunk, steps - k)
            noise = np.empty((span, 6, n_runs))
            for i, s in enumerate(streams):
                noise[:, :, i] = s.standard_normal(span * 6).reshape(span, 6)
        w = noise[k % chunk, :3]
        v = noise[k % chunk, 3:]

        R_active = plan.set_points[cursor].T
        U = cl.K @ Xh + cl.G @ R_active
        if m:
            tu[k] = U[:, :m].T
        Y = cl.sys.C @ X + cl.sys.F @ v
        innovation = cl.sys.C @ Xh - Y
        X = cl.sys.A @ X + cl.sys.B @ U + cl.sys.Gamma @ w
        Xh = cl.sys.A @ Xh + cl.sys.B @ U + cl.L @ innovation

        for c in np.unique(cursor):
            if c >= last_hop:
                continue
            mask = cursor == c
            S = plan.hop_sets[c]
            sh = Xh[:, mask] - plan.equilibria[c + 1][:, None]
            ready = contains_batch(S, sh, strict=False)
            idx = np.nonzero(mask)[0][ready]
            cursor[idx] += 1

    e_mean = e_sum / e_count
    P_hat = (e_outer - e_count * np.outer(e_mean, e_mean)) / (e_count - 1)

    band_emp = np.empty(n_x)
    cum = np.cumsum(band_hist, axis=1) / e_count
    for ax in range(n_x):
        idx = int(np.searchsorted(cum[ax], beta))
        band_emp[ax] = (idx + 1) / _BAND_BINS * band_scale[ax]
    band_pred = np.sqrt(2.0) * erf_inv(beta) * np.sqrt(np.maximum(np.diag(cl.P_inf), 0.0))

    final_inside = 0
    if obstacle is not None:
        final_inside = int(np.sum(np.all(obstacle.H @ X <= obstacle.h[:, None], axis=0)))

    summary = {
        "n_runs": n_runs,
        "steps": steps,
        "seed": seed,
        "rng": root.algorithm,
        "e0_mode": e0_mode,
        "guarantee_applies": e0_mode == "steady",
        "beta": beta,
        "chi2_radius2": c2,
        "per_step_box_satisfaction": sat_box_freq,
        "per_step_outside_obstacle": outside_freq,
        "per_step_safe": safe_freq,
        "per_step_tube_coverage": tube_cover,
        "position_mean": pos_mean,
        "position_cov": pos_cov,
        "error_covariance": P_hat,
        "error_samples": e_count,
        "error_band_empirical": band_emp,
        "error_band_predicted": band_pred,
        "arrival_steps": arrival,
        "arrived_fraction": float(np.mean(arrival >= 0)),
        "max_arrival_step": int(arrival.max()) if np.all(arrival >= 0) else -1,
        "final_inside_obstacle": final_inside,
    }

    traces = []
    for i in range(m):
        xs = tx[:, i]
        xhs = txh[:, i]
        sat_b = (box.H @ xs.T <= box.h[:, None]).T
        if obstacle is None:
            out = np.ones(steps + 1, dtype=bool)
        else:
            out = ~np.all(obstacle.H @ xs.T <= obstacle.h[:, None], axis=0)
        arr = int(arrival[i])
        traces.append(
            Trace(
                x=xs, x_hat=xhs, u=tu[:, i], r_index=tcur[:, i],
                sat_box=sat_b, outside_obstacle=out,
                arrival_step=arr, e0_mode=e0_mode,
                meta={"seed": seed, "spawn_key": (i,), "rng": root.algorithm},
            )
        )
    return summary, traces


def empirical_error_covariance(traces):
    """Unbiased pooled sample covariance of the estimation error across runs
    and steps."""
    samples = np.vstack([t.e for t in traces])
    if samples.shape[0] < 2:
        raise ValueError("need at least two pooled samples")
    return np.cov(samples.T, ddof=1)


def beta_tube(centers, shapes, beta, mode):
    """Per-step beta-probability ellipsoids from given position moments."""
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    c2 = chi2_quantile(3, beta)
    tubes = []
    for mu, S in zip(centers, shapes):
        S = 0.5 * (S + S.T)
        if np.linalg.eigvalsh(S).min() <= 0.0:
            S = S + 1e-12 * np.eye(3)
        tubes.append(TubeEllipsoid(center=np.asarray(mu, dtype=float), shape=S, radius2=c2, mode=mode))
    return tubes


def beta_tube_empirical(summary, beta=None):
    """Tube from Monte Carlo per-step position moments."""
    beta = summary["beta"] if beta is None else beta
    return beta_tube(summary["position_mean"], summary["position_cov"], beta, "empirical")


def beta_tube_analytic(cl, r, x_tilde0, T, beta):
    """Tube from the covariance prediction: the true state is the estimate
    shift plus the estimation error plus the equilibrium, so its position
    covariance is the [x~; e] covariance summed over both position blocks."""
    from .admissible import propagate_covariance

    x_eq = equilibrium_state(cl, r)
    n = cl.n_x
    sched = propagate_covariance(cl, T)
    M = np.zeros((3, 2 * n))
    M[:, :3] = np.eye(3)
    M[:, n : n + 3] = np.eye(3)

    z = np.concatenate([np.asarray(x_tilde0, dtype=float), np.zeros(n)])
    centers = []
    shapes = []
    for t in range(T + 1):
        centers.append(x_eq[:3] + z[:3])
        shapes.append(M @ sched.P_tilde[t] @ M.T)
        z = cl.A_aug @ z
    return beta_tube(centers, shapes, beta, "analytic")
