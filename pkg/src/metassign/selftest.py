"""Built-in oracle and property checks behind ``metassign selftest``.

Each check prints one ok/FAIL line; the suite returns a non-zero exit code
if anything fails. These are quick smoke versions of the full test suite.
"""

from __future__ import annotations

import os
import tempfile
import traceback

import numpy as np

from . import autodiff as ad
from .assignment import (SolverOptions, beckmann_objective,
                         flow_conservation_residual, solve_ue)
from .autodiff import add, backward, constant, grad_check, hadamard, parameter, scale, sub
from .datasets import read_dataset, write_dataset
from .errors import DatasetIntegrityError
from .meta import MetaConfig, MetaTrainState, TaskData, meta_gradient, meta_step
from .model import FlowSurrogate, GNNHyper, GraphBatch, forward, init_params, task_loss
from .network import ODMatrix, RoadNetwork
from .scenarios import GenerationConfig, PerturbationParams, generate_dataset


def parallel_link_network(slopes=(1.0, 2.0)) -> RoadNetwork:
    """Two parallel edges 0 -> 1 with linear costs t_i = t0_i + flow."""
    t0 = np.asarray(slopes, dtype=np.float64)
    return RoadNetwork(
        n_nodes=2, n_zones=2,
        from_node=[0, 0], to_node=[1, 1],
        capacity=[1.0, 1.0], free_flow_time=t0,
        bpr_b=1.0 / t0, bpr_power=[1.0, 1.0], length=[1.0, 1.0])


def small_grid_network(rng: np.random.Generator, n_side: int = 3) -> RoadNetwork:
    """Bidirectional grid with randomized capacities; zones on all nodes."""
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


def random_graph_batch(rng: np.random.Generator, n_nodes: int = 5,
                       n_edges: int = 8, n_zones: int = 5,
                       n_closed: int = 2) -> GraphBatch:
    pairs = [(i, j) for i in range(n_nodes) for j in range(n_nodes) if i != j]
    chosen = rng.choice(len(pairs), size=n_edges, replace=False)
    origin = np.array([pairs[i][0] for i in chosen])
    dest = np.array([pairs[i][1] for i in chosen])
    present = np.ones(n_edges, dtype=bool)
    present[rng.choice(n_edges, size=n_closed, replace=False)] = False
    targets = rng.uniform(0, 1, n_edges) * present
    return GraphBatch(
        node_features=rng.normal(size=(n_nodes, 3 + n_zones)),
        edge_features=np.column_stack([rng.uniform(0.2, 1.0, n_edges),
                                       present.astype(np.float64)]),
        origin_index=origin, dest_index=dest, present_mask=present,
        targets=targets)


class QuadraticToy:
    """One scalar parameter w; a sample is a target w*; loss = mean (w-w*)^2."""

    def init_params(self, rng):
        return {"w": parameter(np.asarray(rng.normal()))}

    def loss(self, params, samples, rng=None, train=False):
        w = params["w"]
        total = None
        for wstar in samples:
            d = sub(w, constant(np.asarray(float(wstar))))
            term = hadamard(d, d)
            total = term if total is None else add(total, term)
        return scale(total, 1.0 / len(samples))


class LinearToy:
    """4x4 linear map + bias (20 parameters); samples are (x, y) pairs."""

    def init_params(self, rng):
        return {"W": parameter(rng.normal(size=(4, 4)) * 0.3),
                "b": parameter(np.zeros(4))}

    def loss(self, params, samples, rng=None, train=False):
        total = None
        for x, y in samples:
            pred = add(ad.matmul(constant(x.reshape(1, 4)), params["W"]),
                       params["b"])
            d = sub(pred, constant(y.reshape(1, 4)))
            term = scale(ad.sum_all(hadamard(d, d)), 0.25)
            total = term if total is None else add(total, term)
        return scale(total, 1.0 / len(samples))


def _check_parallel_links():
    net = parallel_link_network()
    od = ODMatrix(demand=[[0.0, 3.0], [0.0, 0.0]])
    for method in ("fw", "bfw", "bcfw"):
        res = solve_ue(net, None, od, SolverOptions(method=method, gap_tolerance=1e-7))
        assert res.converged
        assert abs(res.flows[0] - 2.0) < 1e-3 and abs(res.flows[1] - 1.0) < 1e-3, \
            f"{method}: flows {res.flows} != (2, 1)"


def _check_solver_soundness():
    rng = np.random.default_rng(7)
    net = small_grid_network(rng)
    demand = rng.uniform(0, 40, (net.n_zones, net.n_zones))
    np.fill_diagonal(demand, 0.0)
    od = ODMatrix(demand=demand)
    flows = {}
    for method in ("fw", "bfw", "bcfw"):
        res = solve_ue(net, None, od, SolverOptions(method=method, gap_tolerance=1e-6,
                                                    max_iterations=2000))
        assert res.converged and res.relative_gap <= 1e-6
        resid = np.abs(flow_conservation_residual(net, od, res.flows)).max()
        assert resid <= 1e-6 * od.total_trips, f"conservation residual {resid}"
        flows[method] = res.flows
    for method in ("bfw", "bcfw"):
        denom = np.maximum(np.abs(flows["fw"]), 1.0)
        rel = np.abs(flows[method] - flows["fw"]) / denom
        assert rel.max() < 1e-3, f"{method} vs fw disagreement {rel.max():.2e}"
    # objective is non-increasing with iteration count (exact line search)
    objs = [solve_ue(net, None, od, SolverOptions(method="bcfw", gap_tolerance=1e-12,
                                                  max_iterations=k)).objective
            for k in range(1, 8)]
    assert all(b <= a + 1e-9 for a, b in zip(objs, objs[1:])), "objective not monotone"


def _check_autodiff():
    rng = np.random.default_rng(3)
    x = parameter(rng.normal(size=(3, 4)))
    w = parameter(rng.normal(size=(4, 2)))

    def f(params):
        return ad.sum_all(ad.sigmoid(ad.matmul(params["x"], params["w"])))

    err = grad_check(f, {"x": x, "w": w})
    assert err < 1e-6, f"matmul/sigmoid grad error {err:.2e}"

    batch = random_graph_batch(rng)
    hyper = GNNHyper(node_feature_dim=8, hidden=6, layers=2, dropout_p=0.0)
    params = init_params(rng, hyper).named_parameters()
    surrogate_hyper = hyper

    def model_loss(p):
        from .model import GatedGCNParams
        structured = GatedGCNParams.from_named(surrogate_hyper, p)
        return task_loss(forward(batch, structured), batch.targets)

    err = grad_check(model_loss, params)
    assert err < 1e-5, f"model grad error {err:.2e}"


def _check_gnn_invariants(n_graphs: int):
    rng = np.random.default_rng(11)
    hyper = GNNHyper(node_feature_dim=8, hidden=6, layers=2, dropout_p=0.0)
    for _ in range(n_graphs):
        batch = random_graph_batch(rng)
        params = init_params(rng, hyper)
        with ad.no_grad():
            base = forward(batch, params).values
        # mask severing: masked edges' features are irrelevant
        tampered_ef = batch.edge_features.copy()
        tampered_ef[~batch.present_mask, 0] = rng.normal(size=(~batch.present_mask).sum())
        tampered = GraphBatch(node_features=batch.node_features,
                              edge_features=tampered_ef,
                              origin_index=batch.origin_index,
                              dest_index=batch.dest_index,
                              present_mask=batch.present_mask,
                              targets=batch.targets)
        with ad.no_grad():
            assert np.array_equal(forward(tampered, params).values, base)
        # node relabeling: permuted inputs give bitwise-identical predictions
        perm = rng.permutation(batch.n_nodes)
        permuted = GraphBatch(node_features=batch.node_features[np.argsort(perm)],
                              edge_features=batch.edge_features,
                              origin_index=perm[batch.origin_index],
                              dest_index=perm[batch.dest_index],
                              present_mask=batch.present_mask,
                              targets=batch.targets)
        with ad.no_grad():
            assert np.array_equal(forward(permuted, params).values, base)


def _check_maml():
    rng = np.random.default_rng(5)
    toy = LinearToy()
    theta = toy.init_params(rng)
    tasks = []
    for _ in range(2):
        data = [(rng.normal(size=4), rng.normal(size=4)) for _ in range(6)]
        tasks.append(TaskData(task_id=0, support=data[:3], query=data[3:]))
    config = MetaConfig(alpha=1e-4, beta=0.0, k_support=3, m_query=3,
                        inner_steps=2, task_batch=2, meta_iterations=1)
    fo, _ = meta_gradient(toy, theta, tasks, config)
    fd, _ = meta_gradient(toy, theta, tasks,
                          MetaConfig(alpha=1e-4, beta=0.0, k_support=3, m_query=3,
                                     inner_steps=2, task_batch=2, meta_iterations=1,
                                     meta_grad_mode="exact_fd"))
    num = np.sqrt(sum(((fo[k] - fd[k]) ** 2).sum() for k in fo))
    den = np.sqrt(sum((fd[k] ** 2).sum() for k in fd))
    assert num / den < 0.05, f"first-order vs exact meta-gradient differ {num / den:.3f}"

    quad = QuadraticToy()
    state = MetaTrainState(theta=quad.init_params(np.random.default_rng(1)))
    cfg = MetaConfig(alpha=0.1, beta=0.1, k_support=1, m_query=1,
                     inner_steps=5, task_batch=2, meta_iterations=200)
    for _ in range(200):
        batch = [TaskData(0, [-1.0], [-1.0]), TaskData(1, [1.0], [1.0])]
        state = meta_step(quad, state, batch, cfg)
    assert abs(state.theta["w"].item()) < 0.05, \
        f"quadratic toy meta-parameter {state.theta['w'].item():.4f} not near 0"


def _check_dataset_roundtrip():
    rng = np.random.default_rng(2)
    net = small_grid_network(rng)
    demand = rng.uniform(0, 30, (net.n_zones, net.n_zones))
    np.fill_diagonal(demand, 0.0)
    base = ODMatrix(demand=demand)
    config = GenerationConfig(n_tasks=2, n_ods=2, closure_fraction_range=(0.0, 0.1),
                              od_perturbation=PerturbationParams(), seed=9,
                              n_test_tasks=1, n_test_ods=1)
    dataset = generate_dataset(net, base, config,
                               SolverOptions(gap_tolerance=1e-3, max_iterations=100))
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "d.bin")
        write_dataset(dataset, path)
        assert read_dataset(path).equals(dataset), "round-trip mismatch"
        with open(path, "r+b") as f:
            f.write(b"XXXX")
        try:
            read_dataset(path)
            raise AssertionError("corrupted magic not detected")
        except DatasetIntegrityError:
            pass


def run_selftest(quick: bool = False) -> int:
    checks = [
        ("equilibrium oracle (parallel links)", _check_parallel_links),
        ("solver soundness", _check_solver_soundness),
        ("autodiff gradients", _check_autodiff),
        ("gnn mask/permutation invariants",
         lambda: _check_gnn_invariants(10 if quick else 30)),
        ("maml gradients and toy convergence", _check_maml),
        ("dataset round-trip", _check_dataset_roundtrip),
    ]
    failures = 0
    for name, check in checks:
        try:
            check()
            print(f"ok   {name}")
        except Exception as exc:  # noqa: BLE001 - report every failure
            failures += 1
            print(f"FAIL {name}: {exc}")
            traceback.print_exc()
    return 1 if failures else 0
