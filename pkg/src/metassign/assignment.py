"""Static user-equilibrium traffic assignment via Frank-Wolfe methods.

Solves min_v sum_e integral_0^{v_e} t_e(s) ds over feasible link flows
(the Beckmann program), whose minimizer is the user equilibrium. Three
direction rules are available: plain Frank-Wolfe (``fw``), conjugate
directions using the previous direction point (``bfw``), and bi-conjugate
directions using the two previous direction points (``bcfw``). All use an
exact golden-section line search, which keeps the objective monotone.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ScenarioInfeasibleError, ValidationError
from .network import ODMatrix, RoadNetwork

METHODS = ("fw", "bfw", "bcfw")

# Weight below which the conjugate/bi-conjugate construction falls back to
# the plain Frank-Wolfe direction; keeps some mass on the new AON point.
_MIN_AON_WEIGHT = 1e-8
_MAX_CONJUGATE_WEIGHT = 0.99
# A step this close to 1 consumes the previous direction point (up to the
# line-search resolution); the next iteration restarts from a plain
# Frank-Wolfe direction, otherwise the conjugacy formulas degenerate.
_FULL_STEP = 1.0 - 1e-6


@dataclass(frozen=True)
class SolverOptions:
    max_iterations: int = 500
    gap_tolerance: float = 1e-4
    method: str = "bcfw"
    line_search_tolerance: float = 1e-8

    def __post_init__(self):
        if self.gap_tolerance <= 0:
            raise ConfigError("gap_tolerance must be > 0")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.line_search_tolerance <= 0:
            raise ConfigError("line_search_tolerance must be > 0")


@dataclass(frozen=True)
class AssignmentResult:
    flows: np.ndarray
    relative_gap: float
    iterations: int
    converged: bool
    objective: float


@dataclass(frozen=True)
class ShortestPathTree:
    """Distances and tree edges from one origin; -1 marks "no predecessor"."""

    dist: np.ndarray
    predecessor_edge: np.ndarray
    settle_order: np.ndarray  # nodes in label-setting order


def bpr_cost(free_flow_time, capacity, bpr_b, bpr_power, flow):
    """BPR volume-delay: t0 * (1 + b * (flow/capacity)^power).

    Accepts scalars or aligned arrays; monotone non-decreasing in flow.
    """
    ratio = np.asarray(flow, dtype=np.float64) / np.asarray(capacity, dtype=np.float64)
    return free_flow_time * (1.0 + bpr_b * ratio ** bpr_power)


def beckmann_objective(network: RoadNetwork, flows: np.ndarray) -> float:
    """Sum of per-edge cost integrals from 0 to the edge flow."""
    v = np.asarray(flows, dtype=np.float64)
    t0, b, p, c = (network.free_flow_time, network.bpr_b,
                   network.bpr_power, network.capacity)
    return float(np.sum(t0 * v + t0 * b * v * (v / c) ** p / (p + 1.0)))


def _bpr_derivative(network: RoadNetwork, flows: np.ndarray) -> np.ndarray:
    """d(travel time)/d(flow); non-finite values (power < 1 at zero flow)
    are replaced by 0 since they only steer direction conjugacy."""
    t0, b, p, c = (network.free_flow_time, network.bpr_b,
                   network.bpr_power, network.capacity)
    with np.errstate(divide="ignore", invalid="ignore"):
        deriv = t0 * b * p * (flows / c) ** (p - 1.0) / c
    return np.where(np.isfinite(deriv), deriv, 0.0)


def _zone_nodes(network: RoadNetwork) -> np.ndarray:
    nodes = np.full(network.n_zones, -1, dtype=np.int64)
    zoned = np.nonzero(network.zone_id >= 0)[0]
    nodes[network.zone_id[zoned]] = zoned
    if (nodes < 0).any():
        raise ValidationError("some zones have no centroid node")
    return nodes


class _Adjacency:
    """Outgoing adjacency lists over the open subgraph.

    Out-edges of each node are stored in increasing edge-id order so the
    label-setting scan is deterministic. Plain Python lists: the scan is
    the solver's hottest loop and scalar ndarray indexing is slow.
    """

    def __init__(self, network: RoadNetwork, present_mask: np.ndarray | None):
        n = network.n_nodes
        if present_mask is None:
            open_edges = np.arange(network.n_edges)
        else:
            mask = np.asarray(present_mask, dtype=bool)
            if len(mask) != network.n_edges:
                raise ValidationError(
                    f"present_mask length {len(mask)} != n_edges {network.n_edges}")
            open_edges = np.nonzero(mask)[0]
        order = np.argsort(network.from_node[open_edges], kind="stable")
        edges = open_edges[order]
        indptr = np.searchsorted(network.from_node[edges], np.arange(n + 1))
        self.n_nodes = n
        self.out_edges: list[list[tuple[int, int]]] = [
            list(zip(edges[indptr[i]:indptr[i + 1]].tolist(),
                     network.to_node[edges[indptr[i]:indptr[i + 1]]].tolist()))
            for i in range(n)
        ]


def _dijkstra(adj: _Adjacency, costs: list[float], origin: int
              ) -> tuple[list[float], list[int], list[int]]:
    """Label-setting shortest paths; ties on distance prefer the smaller
    edge id (evaluated before a node settles). Returns python lists."""
    n = adj.n_nodes
    inf = float("inf")
    dist = [inf] * n
    pred = [-1] * n
    settled = [False] * n
    settle_order: list[int] = []
    dist[origin] = 0.0
    heap = [(0.0, 0, origin)]
    counter = 0
    out_edges = adj.out_edges
    push, pop = heapq.heappush, heapq.heappop
    while heap:
        d, _, node = pop(heap)
        if settled[node]:
            continue
        settled[node] = True
        settle_order.append(node)
        for e, head in out_edges[node]:
            nd = d + costs[e]
            head_dist = dist[head]
            if nd < head_dist:
                dist[head] = nd
                pred[head] = e
                counter += 1
                push(heap, (nd, counter, head))
            elif nd == head_dist and not settled[head] and e < pred[head]:
                pred[head] = e
    return dist, pred, settle_order


class _LoadingContext:
    """Per-(network, mask, od) state reused across solver iterations."""

    def __init__(self, network: RoadNetwork, present_mask: np.ndarray | None,
                 od: ODMatrix):
        if od.n_zones != network.n_zones:
            raise ValidationError(
                f"OD matrix has {od.n_zones} zones, network has {network.n_zones}")
        self.adj = _Adjacency(network, present_mask)
        self.n_nodes = network.n_nodes
        self.n_edges = network.n_edges
        self.edge_tail = network.from_node.tolist()
        zone_node = _zone_nodes(network)
        self.origins: list[tuple[int, list[int], list[float]]] = []
        for origin_zone in range(network.n_zones):
            row = od.demand[origin_zone]
            dest_zones = np.nonzero(row)[0]
            if dest_zones.size:
                self.origins.append((
                    int(zone_node[origin_zone]),
                    zone_node[dest_zones].tolist(),
                    row[dest_zones].tolist(),
                ))

    def all_or_nothing(self, edge_costs: np.ndarray) -> tuple[np.ndarray, float]:
        costs = edge_costs.tolist()
        flows = [0.0] * self.n_edges
        unreachable = 0.0
        inf = float("inf")
        tail = self.edge_tail
        for origin, dests, demands in self.origins:
            dist, pred, settle_order = _dijkstra(self.adj, costs, origin)
            node_load = [0.0] * self.n_nodes
            for dest, demand in zip(dests, demands):
                if dist[dest] == inf:
                    unreachable += demand
                else:
                    node_load[dest] += demand
            # sweep the tree leaves-first: settlement order reversed
            for node in reversed(settle_order):
                load = node_load[node]
                if load != 0.0 and node != origin:
                    e = pred[node]
                    flows[e] += load
                    node_load[tail[e]] += load
        return np.asarray(flows), unreachable


def shortest_path_tree(network: RoadNetwork, present_mask: np.ndarray | None,
                       edge_costs: np.ndarray, origin: int) -> ShortestPathTree:
    """Label-setting shortest paths from ``origin`` over open edges only.

    Unreachable nodes have infinite distance and predecessor_edge -1.
    """
    edge_costs = np.asarray(edge_costs, dtype=np.float64)
    if len(edge_costs) != network.n_edges:
        raise ValidationError("edge_costs length mismatch")
    if network.n_edges and edge_costs.min() < 0:
        raise ValidationError("edge_costs must be non-negative")
    adj = _Adjacency(network, present_mask)
    dist, pred, order = _dijkstra(adj, edge_costs.tolist(), int(origin))
    return ShortestPathTree(dist=np.asarray(dist),
                            predecessor_edge=np.asarray(pred, dtype=np.int64),
                            settle_order=np.asarray(order, dtype=np.int64))


def all_or_nothing(network: RoadNetwork, present_mask: np.ndarray | None,
                   edge_costs: np.ndarray, od: ODMatrix) -> tuple[np.ndarray, float]:
    """Load each OD pair's full demand on its current shortest path.

    Returns (flows, unreachable_demand): demand between disconnected pairs
    contributes nothing to the flows and is summed into the second value.
    """
    edge_costs = np.asarray(edge_costs, dtype=np.float64)
    if len(edge_costs) != network.n_edges:
        raise ValidationError("edge_costs length mismatch")
    if network.n_edges and edge_costs.min() < 0:
        raise ValidationError("edge_costs must be non-negative")
    return _LoadingContext(network, present_mask, od).all_or_nothing(edge_costs)


def _golden_section(fun, lo: float, hi: float, tol: float) -> float:
    """Minimize a unimodal scalar function on [lo, hi] to interval width tol."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fun(c), fun(d)
    while (b - a) > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fun(d)
    return 0.5 * (a + b)


def _edge_costs(network: RoadNetwork, flows: np.ndarray) -> np.ndarray:
    return bpr_cost(network.free_flow_time, network.capacity,
                    network.bpr_b, network.bpr_power, flows)


def solve_ue(network: RoadNetwork, present_mask: np.ndarray | None,
             od: ODMatrix, options: SolverOptions = SolverOptions(),
             on_unreachable: str = "error") -> AssignmentResult:
    """Solve user equilibrium on the open subgraph.

    Flows on masked-out edges are identically zero. The relative gap is
    (c.v - c.v_aon) / (c.v) at current costs c. With ``on_unreachable=
    "error"`` (the default) positive demand between disconnected zones
    raises ScenarioInfeasibleError; with ``"drop"`` it is ignored.
    """
    if on_unreachable not in ("error", "drop"):
        raise ConfigError("on_unreachable must be 'error' or 'drop'")
    ctx = _LoadingContext(network, present_mask, od)
    t0, b, p, c = (network.free_flow_time, network.bpr_b,
                   network.bpr_power, network.capacity)
    beck_coef = t0 * b * c / (p + 1.0)
    p1 = p + 1.0

    def beckmann(v: np.ndarray) -> float:
        return float(t0 @ v + beck_coef @ (v / c) ** p1)

    free_flow = _edge_costs(network, np.zeros(network.n_edges))
    flows, unreachable = ctx.all_or_nothing(free_flow)
    if unreachable > 0 and on_unreachable == "error":
        raise ScenarioInfeasibleError(
            f"{unreachable:g} trips/hour between disconnected zones on the open subgraph")

    s_prev = None       # direction point of the previous iteration
    s_prev2 = None      # direction point two iterations back
    tau_prev = 1.0
    method = options.method
    gap = np.inf
    converged = False
    iterations = 0

    for _ in range(options.max_iterations):
        costs = _edge_costs(network, flows)
        aon, _ = ctx.all_or_nothing(costs)
        total_cost = float(costs @ flows)
        gap = (total_cost - float(costs @ aon)) / total_cost if total_cost > 0 else 0.0
        if gap <= options.gap_tolerance:
            converged = True
            break

        target = _direction_point(network, flows, aon, costs, method,
                                  s_prev, s_prev2, tau_prev)
        direction = target - flows
        obj_here = beckmann(flows)
        tau = _golden_section(lambda t: beckmann(flows + t * direction),
                              0.0, 1.0, options.line_search_tolerance)
        if beckmann(flows + tau * direction) > obj_here:
            tau = 0.0  # line search found no improvement; keep the point
        flows = flows + tau * direction
        if tau >= _FULL_STEP:
            s_prev, s_prev2, tau_prev = None, None, 1.0  # restart from FW
        else:
            s_prev2, s_prev, tau_prev = s_prev, target, tau
        iterations += 1

    objective = beckmann(flows)
    return AssignmentResult(flows=flows, relative_gap=float(gap),
                            iterations=iterations, converged=converged,
                            objective=objective)


def _direction_point(network, flows, aon, costs, method, s_prev, s_prev2, tau_prev):
    """Feasible point defining the search direction (point - flows)."""
    if method == "fw" or s_prev is None:
        return aon

    hessian = _bpr_derivative(network, flows)
    z = aon - flows

    def conjugate_point():
        u = s_prev - flows
        hu = hessian * u
        # a vanished previous direction carries no conjugacy information
        if float(hu @ u) <= 1e-12 * max(float((hessian * z) @ z), 1.0):
            return aon
        numer = float(hu @ z)
        denom = float(hu @ (z - u))
        if denom == 0.0 or not np.isfinite(denom):
            return aon
        lam = numer / denom
        if not np.isfinite(lam) or lam < _MIN_AON_WEIGHT:
            return aon
        lam = min(lam, _MAX_CONJUGATE_WEIGHT)
        point = lam * s_prev + (1.0 - lam) * aon
        if float(costs @ (point - flows)) >= 0.0:
            return aon  # not a descent direction; fall back
        return point

    if method == "bfw" or s_prev2 is None or tau_prev >= _FULL_STEP:
        return conjugate_point()

    # bi-conjugate: make the new direction H-conjugate to the previous two.
    u = s_prev - flows
    r = s_prev2 - flows
    w = r + (tau_prev / (1.0 - tau_prev)) * u
    hu = hessian * u
    hw = hessian * w
    system = np.array([
        [float(z @ hu), float(u @ hu), float(r @ hu)],
        [float(z @ hw), float(u @ hw), float(r @ hw)],
        [1.0, 1.0, 1.0],
    ])
    try:
        betas = np.linalg.solve(system, np.array([0.0, 0.0, 1.0]))
    except np.linalg.LinAlgError:
        return conjugate_point()
    if not np.isfinite(betas).all() or (betas < 0.0).any() \
            or betas[0] < _MIN_AON_WEIGHT:
        return conjugate_point()
    point = betas[0] * aon + betas[1] * s_prev + betas[2] * s_prev2
    if float(costs @ (point - flows)) >= 0.0:
        return conjugate_point()
    return point


def flow_conservation_residual(network: RoadNetwork, od: ODMatrix,
                               flows: np.ndarray) -> np.ndarray:
    """Per-node imbalance: (inflow + generated) - (outflow + absorbed)."""
    inflow = np.bincount(network.to_node, weights=flows, minlength=network.n_nodes)
    outflow = np.bincount(network.from_node, weights=flows, minlength=network.n_nodes)
    generated = np.zeros(network.n_nodes)
    absorbed = np.zeros(network.n_nodes)
    zone_node = _zone_nodes(network)
    generated[zone_node] = od.demand.sum(axis=1)
    absorbed[zone_node] = od.demand.sum(axis=0)
    return (inflow + generated) - (outflow + absorbed)
