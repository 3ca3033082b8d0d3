"""Scratch: tune the desk-scale pipeline (not part of the package)."""
import time

import numpy as np

from metassign import (GenerationConfig, MetaConfig, ODMatrix,
                       PerturbationParams, RoadNetwork, SolverOptions,
                       FlowSurrogate, GNNHyper, generate_dataset, meta_test,
                       meta_train, write_dataset)


def synthetic_network(seed=0, n_nodes=20, n_extra=20):
    rng = np.random.default_rng(seed)
    frm, to = [], []
    for i in range(n_nodes):  # two directed rings
        frm += [i, (i + 1) % n_nodes]
        to += [(i + 1) % n_nodes, i]
    existing = set(zip(frm, to))
    while len(frm) < 2 * n_nodes + n_extra:
        a, b = rng.integers(0, n_nodes, 2)
        if a != b and (a, b) not in existing:
            existing.add((a, b))
            frm.append(int(a))
            to.append(int(b))
    e = len(frm)
    ang = 2 * np.pi * np.arange(n_nodes) / n_nodes
    return RoadNetwork(
        n_nodes=n_nodes, n_zones=n_nodes, from_node=frm, to_node=to,
        capacity=rng.uniform(600, 1200, e), free_flow_time=rng.uniform(1.0, 4.0, e),
        bpr_b=np.full(e, 0.15), bpr_power=np.full(e, 4.0), length=np.ones(e),
        x=np.cos(ang), y=np.sin(ang))


def synthetic_demand(network, seed=1, p=0.3, lo=40, hi=200):
    rng = np.random.default_rng(seed)
    z = network.n_zones
    demand = rng.uniform(lo, hi, (z, z)) * (rng.random((z, z)) < p)
    np.fill_diagonal(demand, 0.0)
    return ODMatrix(demand=demand)


if __name__ == "__main__":
    net = synthetic_network()
    base = synthetic_demand(net)
    print(f"net: {net.n_nodes} nodes, {net.n_edges} edges; total trips {base.total_trips:.0f}")
    
    t0 = time.time()
    gen = GenerationConfig(n_tasks=40, n_ods=20, closure_fraction_range=(0.05, 0.30),
                           od_perturbation=PerturbationParams(0.15, 0.70, 1.0),
                           seed=42, n_test_tasks=3, n_test_ods=5)
    dataset = generate_dataset(net, base, gen, SolverOptions(gap_tolerance=1e-4, max_iterations=300))
    t_gen = time.time() - t0
    flows = np.concatenate([s.target_flows for s in dataset.samples.values()])
    caps = net.capacity
    print(f"generation: {t_gen:.1f}s for {len(dataset.samples)} solves")
    print(f"flow stats: mean {flows.mean():.0f}, max {flows.max():.0f}, "
          f"norm mean {(flows / dataset.normalization.flow_scale).mean():.3f}, "
          f"norm max {(flows / dataset.normalization.flow_scale).max():.3f}")
    write_dataset(dataset, "/tmp/desk.bin")
    