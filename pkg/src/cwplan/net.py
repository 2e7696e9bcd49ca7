"""Virtual net of forced-equilibrium set-points: per-node per-region
admissible sets, connectivity through them, fuel-cost edge weights from
deterministic closed-loop transfers, and Dijkstra path search.
"""

import heapq
from dataclasses import dataclass, field

import numpy as np

from .admissible import RegionRowSchedule, contains_batch, set_contains
from .dynamics import equilibrium_state
from .errors import NoPathError

WEIGHT_STEP_CAP = 1_000_000


@dataclass
class VirtualNet:
    nodes: np.ndarray                 # (n_r, 3) set-points
    node_sets: list                   # node_sets[i][s]: AdmissibleSet of node i in region s
    edges: dict                       # (i, j) -> (weight, certificate region id)
    region_map: object                # RegionSet
    dropped: list = field(default_factory=list)   # set-points removed at build time

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    def neighbors(self, i):
        return sorted(j for (a, j) in self.edges if a == i)


@dataclass
class PlanPath:
    nodes: list                       # ordered node indices, start..goal
    cost: float
    regions: list                     # certificate region id per hop

    @property
    def n_hops(self):
        return len(self.nodes) - 1


def build_nodes(axes, cl, region_set, extra=()):
    """Cartesian grid of set-points, dropping those whose equilibrium lies in
    no region (inside the obstacle or outside the outer box).

    ``axes`` is a sequence of (min, max, count) per position axis. ``extra``
    points (start/goal) are appended before filtering. Returns the kept nodes
    and the dropped ones.
    """
    lines = []
    for lo, hi, count in axes:
        if count < 1:
            raise ValueError(f"axis count must be >= 1, got {count}")
        lines.append(np.linspace(lo, hi, count) if count > 1 else np.array([0.5 * (lo + hi)]))
    grid = np.stack(np.meshgrid(*lines, indexing="ij"), axis=-1).reshape(-1, 3)

    points = [np.asarray(p, dtype=float) for p in grid]
    for p in extra:
        p = np.asarray(p, dtype=float).reshape(3)
        if not any(np.allclose(p, g, atol=1e-9) for g in points):
            points.append(p)

    kept, dropped = [], []
    for p in points:
        x_eq = equilibrium_state(cl, p)
        if region_set.covering_regions(x_eq):
            kept.append(p)
        else:
            dropped.append(p)
    return np.array(kept).reshape(-1, 3), dropped


def edge_exists(net, i, j, cl):
    """Connectivity i -> j: the displacement between equilibria must lie in the
    interior of some region's admissible set at node j. Returns (flag, region
    id of the first certifying region)."""
    if i == j:
        raise ValueError("self edges are excluded from planning")
    d = equilibrium_state(cl, net.nodes[i] - net.nodes[j])
    for s, S in enumerate(net.node_sets[j]):
        if set_contains(S, d, strict=True):
            return True, s
    return False, None


def edge_weight(cl, r_i, r_j, step_cap=WEIGHT_STEP_CAP):
    """Approximate transfer fuel: deterministic closed loop (no noise, perfect
    observations) propagated from [r_i; 0] toward r_j until within 5% of the
    transfer distance, accumulating the thrust-increment magnitudes."""
    r_i = np.asarray(r_i, dtype=float)
    r_j = np.asarray(r_j, dtype=float)
    x_eq_j = equilibrium_state(cl, r_j)
    threshold = 0.05 * np.linalg.norm(equilibrium_state(cl, r_j - r_i))
    x = np.concatenate([r_i, np.zeros(3)])
    total = 0.0
    for _ in range(step_cap):
        u = cl.K @ x + cl.G @ r_j
        total += float(np.linalg.norm(u))
        if np.linalg.norm(x_eq_j - x) <= threshold + 1e-9 * (1.0 + np.linalg.norm(x_eq_j)):
            return total
        x = cl.A_c @ x + cl.B_c @ r_j
    raise RuntimeError(f"transfer did not settle within {step_cap} steps")


def _batch_edge_weights(cl, starts, targets, step_cap=WEIGHT_STEP_CAP):
    """edge_weight for many (r_i, r_j) pairs at once; columns are transfers."""
    n_e = starts.shape[1]
    X = np.vstack([starts, np.zeros((3, n_e))])
    X_eq = np.linalg.solve(np.eye(cl.n_x) - cl.A_c, cl.B_c @ targets)
    d_eq = np.linalg.solve(np.eye(cl.n_x) - cl.A_c, cl.B_c @ (targets - starts))
    thresholds = 0.05 * np.linalg.norm(d_eq, axis=0) + 1e-9 * (
        1.0 + np.linalg.norm(X_eq, axis=0)
    )
    totals = np.zeros(n_e)
    active = np.ones(n_e, dtype=bool)
    for _ in range(step_cap):
        if not active.any():
            return totals
        U = cl.K @ X[:, active] + cl.G @ targets[:, active]
        totals[active] += np.linalg.norm(U, axis=0)
        arrived = np.linalg.norm(X_eq[:, active] - X[:, active], axis=0) <= thresholds[active]
        X[:, active] = cl.A_c @ X[:, active] + cl.B_c @ targets[:, active]
        idx = np.nonzero(active)[0]
        active[idx[arrived]] = False
    raise RuntimeError(f"some transfers did not settle within {step_cap} steps")


def build_net(cl, region_set, axes, alpha, extra=(), radius=None):
    """Assemble the full virtual net: nodes, per-region admissible sets,
    certified edges, and fuel weights.

    One row schedule per region is shared by every node, since admissible-set
    normals depend only on the region and closed loop.
    """
    nodes, dropped = build_nodes(axes, cl, region_set, extra=extra)
    n_r = nodes.shape[0]
    if radius is None:
        from .admissible import _infer_radius

        radius = _infer_radius(region_set.outer)

    schedules = [
        RegionRowSchedule(cl, region, alpha, radius)
        for region in region_set.regions
    ]
    node_sets = [
        [schedules[s].stamp(nodes[i], s) for s in range(len(schedules))]
        for i in range(n_r)
    ]

    # one membership sweep per (target node, region) over all displacements
    edges = {}
    eq_mat = np.linalg.solve(np.eye(cl.n_x) - cl.A_c, cl.B_c)   # maps r to equilibrium
    candidates = []
    for j in range(n_r):
        others = np.array([i for i in range(n_r) if i != j])
        if others.size == 0:
            continue
        D = eq_mat @ (nodes[others] - nodes[j]).T               # (n_x, n_r-1)
        cert = np.full(others.size, -1, dtype=int)
        for s, S in enumerate(node_sets[j]):
            if S.empty:
                continue
            hit = contains_batch(S, D, strict=True) & (cert < 0)
            cert[hit] = s
        for idx in np.nonzero(cert >= 0)[0]:
            candidates.append((int(others[idx]), j, int(cert[idx])))

    if candidates:
        starts = np.array([nodes[i] for i, _, _ in candidates]).T
        targets = np.array([nodes[j] for _, j, _ in candidates]).T
        weights = _batch_edge_weights(cl, starts, targets)
        for (i, j, s), w in zip(candidates, weights):
            edges[(i, j)] = (float(w), s)

    return VirtualNet(
        nodes=nodes, node_sets=node_sets, edges=edges,
        region_map=region_set, dropped=dropped,
    )


def shortest_path(net, start, goal):
    """Dijkstra over the certified edges, ties broken by lowest node index."""
    n = net.n_nodes
    if not (0 <= start < n and 0 <= goal < n):
        raise ValueError(f"start {start} or goal {goal} outside node range 0..{n - 1}")
    if start == goal:
        return PlanPath(nodes=[start], cost=0.0, regions=[])

    adjacency = {i: [] for i in range(n)}
    for (i, j), (w, s) in net.edges.items():
        adjacency[i].append((j, w, s))
    for i in adjacency:
        adjacency[i].sort()

    dist = {start: 0.0}
    parent = {}
    done = set()
    heap = [(0.0, start)]
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        if u == goal:
            break
        for v, w, s in adjacency[u]:
            nd = d + w
            if v not in dist or nd < dist[v]:
                dist[v] = nd
                parent[v] = (u, s)
                heapq.heappush(heap, (nd, v))

    if goal not in done:
        raise NoPathError(
            f"goal node {goal} unreachable from {start}; "
            f"reachable component has {len(done)} nodes",
            reachable=sorted(done),
        )

    path_nodes = [goal]
    regions = []
    node = goal
    while node != start:
        prev, s = parent[node]
        path_nodes.append(prev)
        regions.append(s)
        node = prev
    path_nodes.reverse()
    regions.reverse()
    return PlanPath(nodes=path_nodes, cost=dist[goal], regions=regions)


def switching_ready(cl, S_next, x_hat, r_next):
    """Switch test: the estimate shifted to the next equilibrium lies in the
    next node's admissible set (non-strict)."""
    shift = np.asarray(x_hat, dtype=float) - equilibrium_state(cl, r_next)
    return set_contains(S_next, shift, strict=False)
