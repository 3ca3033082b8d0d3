import numpy as np
import pytest

from metassign import (GenerationConfig, ODMatrix, PerturbationParams,
                       RoadNetwork, SolverOptions, generate_dataset)


def parallel_link_network(t0=(1.0, 2.0)) -> RoadNetwork:
    """Two parallel edges 0 -> 1 with linear costs t_i = t0_i + flow."""
    t0 = np.asarray(t0, dtype=np.float64)
    return RoadNetwork(
        n_nodes=2, n_zones=2, from_node=[0, 0], to_node=[1, 1],
        capacity=np.ones(len(t0)), free_flow_time=t0, bpr_b=1.0 / t0,
        bpr_power=np.ones(len(t0)), length=np.ones(len(t0)))


def braess_network() -> RoadNetwork:
    """Classic 4-node diamond with a bypass edge (id 4) from 1 to 2.

    Edges: 0: s->a, 1: s->b, 2: a->t, 3: b->t, 4: a->b (the bypass).
    The congestible edges (s->a, b->t) have steep costs; the long edges
    (s->b, a->t) are nearly flat.
    """
    return RoadNetwork(
        n_nodes=4, n_zones=4,
        from_node=[0, 0, 1, 2, 1], to_node=[1, 2, 3, 3, 2],
        capacity=[100.0, 100.0, 100.0, 100.0, 100.0],
        free_flow_time=[1.0, 45.0, 45.0, 1.0, 0.5],
        bpr_b=[44.0, 0.02, 0.02, 44.0, 0.1],
        bpr_power=[1.0, 1.0, 1.0, 1.0, 1.0],
        length=np.ones(5))


def grid_network(rng: np.random.Generator, n_side: int = 3) -> RoadNetwork:
    """Bidirectional grid, one zone per node, randomized capacities."""
    n = n_side * n_side
    frm, to = [], []
    for r in range(n_side):
        for c in range(n_side):
            node = r * n_side + c
            if c + 1 < n_side:
                frm += [node, node + 1]
                to += [node + 1, node]
            if r + 1 < n_side:
                frm += [node, node + n_side]
                to += [node + n_side, node]
    e = len(frm)
    return RoadNetwork(
        n_nodes=n, n_zones=n, from_node=frm, to_node=to,
        capacity=rng.uniform(500, 1500, e), free_flow_time=rng.uniform(1, 5, e),
        bpr_b=np.full(e, 0.15), bpr_power=np.full(e, 4.0), length=np.ones(e),
        x=np.tile(np.arange(n_side, dtype=float), n_side),
        y=np.repeat(np.arange(n_side, dtype=float), n_side))


def ring_network(seed: int = 0, n_nodes: int = 20, n_extra: int = 20) -> RoadNetwork:
    """Two directed rings plus random chords; |E| = 2*n_nodes + n_extra."""
    rng = np.random.default_rng(seed)
    frm, to = [], []
    for i in range(n_nodes):
        frm += [i, (i + 1) % n_nodes]
        to += [(i + 1) % n_nodes, i]
    existing = set(zip(frm, to))
    while len(frm) < 2 * n_nodes + n_extra:
        a, b = rng.integers(0, n_nodes, 2)
        if a != b and (int(a), int(b)) not in existing:
            existing.add((int(a), int(b)))
            frm.append(int(a))
            to.append(int(b))
    e = len(frm)
    ang = 2 * np.pi * np.arange(n_nodes) / n_nodes
    return RoadNetwork(
        n_nodes=n_nodes, n_zones=n_nodes, from_node=frm, to_node=to,
        capacity=rng.uniform(600, 1200, e), free_flow_time=rng.uniform(1.0, 4.0, e),
        bpr_b=np.full(e, 0.15), bpr_power=np.full(e, 4.0), length=np.ones(e),
        x=np.cos(ang), y=np.sin(ang))


def random_demand(network: RoadNetwork, seed: int = 1, density: float = 0.3,
                  lo: float = 40.0, hi: float = 200.0) -> ODMatrix:
    rng = np.random.default_rng(seed)
    z = network.n_zones
    demand = rng.uniform(lo, hi, (z, z)) * (rng.random((z, z)) < density)
    np.fill_diagonal(demand, 0.0)
    return ODMatrix(demand=demand)


NET_TEXT = """<NUMBER OF ZONES> 2
<NUMBER OF NODES> 2
<FIRST THRU NODE> 1
<NUMBER OF LINKS> 1
<END OF METADATA>

~ 	Init node 	Term node 	Capacity 	Length 	Free Flow Time 	B	Power	Speed limit 	Toll 	Type	;
	1	2	1000	1	10	0.15	4	0	0	1	;
"""

TRIPS_TEXT = """<NUMBER OF ZONES> 2
<TOTAL OD FLOW> 100.0
<END OF METADATA>

Origin  1
    2 :     100.0;
Origin  2
"""


@pytest.fixture(scope="session")
def tiny_dataset():
    """3x3 grid, 4 tasks x 5 ODs (1 task + 2 ODs held out)."""
    rng = np.random.default_rng(7)
    network = grid_network(rng)
    base = random_demand(network, seed=8, density=0.4, lo=10, hi=60)
    config = GenerationConfig(
        n_tasks=4, n_ods=5, closure_fraction_range=(0.05, 0.20),
        od_perturbation=PerturbationParams(0.15, 0.70, 1.0), seed=11,
        n_test_tasks=1, n_test_ods=2)
    return generate_dataset(network, base, config,
                            SolverOptions(gap_tolerance=1e-4, max_iterations=300))
