"""Acceptance suite: every criterion as one test printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s``. The desk-scale pipeline
test is marked ``slow`` (several minutes); the full-scale reproduction is
marked ``expensive`` and only runs when the EMA_NET/EMA_TRIPS environment
variables point to the 74-zone network and trips files.
"""

import os
import time

import numpy as np
import pytest

import metassign.autodiff as ad
from metassign import (FlowSurrogate, GatedGCNParams, GenerationConfig,
                       GNNHyper, MetaConfig, ODMatrix, PerturbationParams,
                       SolverOptions, flow_conservation_residual, forward,
                       generate_dataset, init_params, meta_test, meta_train,
                       parse_network, parse_trips, read_dataset, save_params,
                       solve_ue, task_loss, write_dataset, write_report)
from metassign.meta import MetaTrainState, TaskData, meta_gradient, meta_step

from conftest import (braess_network, grid_network, parallel_link_network,
                      random_demand, ring_network)
from oracles import central_difference_gradients, path_flow_equilibrium
from test_meta import QuadraticToy, LinearToy, linear_tasks
from test_model import make_batch


def _report(criterion: str, detail: str):
    print(f"\n[criterion {criterion}] PASS: {detail}")


# Frozen output of oracles.path_flow_equilibrium on the Braess instance
# (demand 120 from node 0 to node 3); the live oracle comparison runs in
# test_assignment.py. Values match the closed-form equilibrium: outer paths
# carry 20.8 each, the bypass route 78.4; without the bypass, 60/60.
BRAESS_ORACLE_OPEN = np.array([99.2, 20.8, 20.8, 99.2, 78.4])
BRAESS_ORACLE_MASKED = np.array([60.0, 60.0, 60.0, 60.0, 0.0])


def test_criterion_1_equilibrium_oracle():
    started = time.perf_counter()
    net = parallel_link_network((1.0, 2.0))
    od = ODMatrix(demand=[[0.0, 3.0], [0.0, 0.0]])
    res = solve_ue(net, None, od, SolverOptions(gap_tolerance=1e-7))
    assert abs(res.flows[0] - 2.0) < 1e-3
    assert abs(res.flows[1] - 1.0) < 1e-3

    braess = braess_network()
    braess_od = ODMatrix(demand=np.eye(4, 4, 3) * 120.0)
    options = SolverOptions(gap_tolerance=1e-8, max_iterations=3000)
    for present, oracle in ((None, BRAESS_ORACLE_OPEN),
                            (np.array([True, True, True, True, False]),
                             BRAESS_ORACLE_MASKED)):
        res = solve_ue(braess, present, braess_od, options)
        rel = np.abs(res.flows - oracle) / np.maximum(np.abs(oracle), 1.0)
        assert rel.max() < 1e-3
    elapsed = time.perf_counter() - started
    assert elapsed < 1.0
    _report("1", f"parallel-link flows (2, 1) and Braess oracle match "
                 f"({elapsed:.2f}s)")


def test_criterion_2_solver_soundness():
    started = time.perf_counter()
    rng = np.random.default_rng(3)
    net = grid_network(rng)
    od = random_demand(net, seed=4, density=0.5, lo=5, hi=80)
    flows = {}
    for method in ("fw", "bfw", "bcfw"):
        res = solve_ue(net, None, od,
                       SolverOptions(method=method, gap_tolerance=1e-4,
                                     max_iterations=3000))
        assert res.converged and res.relative_gap <= 1e-4
        residual = np.abs(flow_conservation_residual(net, od, res.flows))
        assert residual.max() <= 1e-6 * od.total_trips
        flows[method] = res.flows
    tight = {m: solve_ue(net, None, od,
                         SolverOptions(method=m, gap_tolerance=1e-8,
                                       max_iterations=5000)).flows
             for m in ("fw", "bfw", "bcfw")}
    denom = np.maximum(np.abs(tight["fw"]), 1.0)
    for method in ("bfw", "bcfw"):
        assert (np.abs(tight[method] - tight["fw"]) / denom).max() <= 1e-3
    objs = [solve_ue(net, None, od,
                     SolverOptions(gap_tolerance=1e-12, max_iterations=k)
                     ).objective for k in range(1, 10)]
    assert all(b <= a + 1e-9 * abs(a) for a, b in zip(objs, objs[1:]))
    elapsed = time.perf_counter() - started
    assert elapsed < 10.0
    _report("2", f"conservation, monotone objective, gap, and method "
                 f"agreement hold ({elapsed:.1f}s)")


def test_criterion_3_autodiff():
    started = time.perf_counter()
    rng = np.random.default_rng(16)
    # every registered op, exercised through the test-suite op table
    from test_autodiff import _OP_CASES
    for name, case in sorted(_OP_CASES.items()):
        case_rng = np.random.default_rng(hash(name) % 2**32)
        params = {
            "a": ad.parameter(case_rng.normal(size=(3, 4))),
            "a2": ad.parameter(case_rng.normal(size=(3, 4)) + 3.0),
            "b": ad.parameter(case_rng.normal(size=(4, 2))),
            "c": ad.parameter(case_rng.normal(size=4)),
            "pos": ad.parameter(np.abs(case_rng.normal(size=(3, 4))) + 1.0),
        }
        assert ad.grad_check(case, params) < 1e-5, name

    hyper = GNNHyper(node_feature_dim=8, hidden=6, layers=2, dropout_p=0.0)
    batch = make_batch(rng)
    named = init_params(rng, hyper).named_parameters()

    def loss_from_values(values):
        rebuilt = {n: ad.parameter(values[n]) for n in named}
        structured = GatedGCNParams.from_named(hyper, rebuilt)
        return task_loss(forward(batch, structured), batch.targets).item()

    loss = task_loss(forward(batch, GatedGCNParams.from_named(hyper, named)),
                     batch.targets)
    analytic = ad.backward(loss, named)
    fd = central_difference_gradients(
        loss_from_values, {n: t.values for n, t in named.items()})
    worst = max(
        float((np.abs(analytic[n] - fd[n])
               / np.maximum(1.0, np.maximum(np.abs(analytic[n]),
                                            np.abs(fd[n])))).max())
        for n in named)
    assert worst < 1e-5
    elapsed = time.perf_counter() - started
    assert elapsed < 30.0
    _report("3", f"all ops and the full model loss pass finite-difference "
                 f"checks, worst {worst:.1e} ({elapsed:.1f}s)")


def test_criterion_4_mask_and_permutation():
    started = time.perf_counter()
    rng = np.random.default_rng(11)
    hyper = GNNHyper(node_feature_dim=8, hidden=6, layers=3, dropout_p=0.0)
    for _ in range(100):
        batch = make_batch(rng)
        params = init_params(rng, hyper)
        with ad.no_grad():
            base = forward(batch, params).values
        ef = batch.edge_features.copy()
        ef[~batch.present_mask, 0] = rng.normal(size=(~batch.present_mask).sum())
        from metassign import GraphBatch
        tampered = GraphBatch(node_features=batch.node_features, edge_features=ef,
                              origin_index=batch.origin_index,
                              dest_index=batch.dest_index,
                              present_mask=batch.present_mask,
                              targets=batch.targets)
        perm = rng.permutation(batch.n_nodes)
        relabeled = GraphBatch(node_features=batch.node_features[np.argsort(perm)],
                               edge_features=batch.edge_features,
                               origin_index=perm[batch.origin_index],
                               dest_index=perm[batch.dest_index],
                               present_mask=batch.present_mask,
                               targets=batch.targets)
        with ad.no_grad():
            assert np.array_equal(forward(tampered, params).values, base)
            assert np.array_equal(forward(relabeled, params).values, base)
    elapsed = time.perf_counter() - started
    assert elapsed < 30.0
    _report("4", f"mask severing and node-relabeling equivariance bitwise on "
                 f"100 random graphs ({elapsed:.1f}s)")


def test_criterion_5_maml_correctness():
    started = time.perf_counter()
    rng = np.random.default_rng(3)
    toy = LinearToy()
    theta = toy.init_params(rng)
    assert sum(t.values.size for t in theta.values()) <= 20
    tasks = linear_tasks(rng)
    base = dict(alpha=1e-4, beta=0.0, k_support=3, m_query=3, inner_steps=2,
                task_batch=2, meta_iterations=1)
    fo, _ = meta_gradient(toy, theta, tasks, MetaConfig(**base))
    fd, _ = meta_gradient(toy, theta, tasks,
                          MetaConfig(**base, meta_grad_mode="exact_fd"))
    num = np.sqrt(sum(((fo[k] - fd[k]) ** 2).sum() for k in fo))
    den = np.sqrt(sum((fd[k] ** 2).sum() for k in fd))
    assert num / den < 0.05

    quad = QuadraticToy()
    state = MetaTrainState(theta=quad.init_params(np.random.default_rng(1)))
    config = MetaConfig(alpha=0.1, beta=0.1, k_support=1, m_query=1,
                        inner_steps=5, task_batch=2, meta_iterations=200)
    batch = [TaskData(0, [-1.0], [-1.0]), TaskData(1, [1.0], [1.0])]
    for _ in range(200):
        meta_step(quad, state, batch, config)
    assert abs(state.theta["w"].item()) < 0.05
    elapsed = time.perf_counter() - started
    assert elapsed < 60.0
    _report("5", f"first-order vs exact meta-gradient within 5% and toy "
                 f"meta-converges to |theta| = {abs(state.theta['w'].item()):.3f} "
                 f"({elapsed:.1f}s)")


DESK_GEN = GenerationConfig(
    n_tasks=40, n_ods=20, closure_fraction_range=(0.05, 0.30),
    od_perturbation=PerturbationParams(0.15, 0.70, 1.0), seed=42,
    n_test_tasks=3, n_test_ods=5)
DESK_META = MetaConfig(alpha=0.02, beta=0.055, k_support=2, m_query=8,
                       inner_steps=5, task_batch=7, meta_iterations=300, seed=0)
DESK_HIDDEN, DESK_LAYERS = 96, 3


@pytest.mark.slow
def test_criterion_6_desk_scale_end_to_end(tmp_path):
    started = time.perf_counter()
    net = ring_network(seed=0)
    assert net.n_nodes == 20 and net.n_edges == 60
    base = random_demand(net, seed=1, density=0.3, lo=40, hi=200)
    dataset = generate_dataset(net, base, DESK_GEN,
                               SolverOptions(gap_tolerance=1e-4,
                                             max_iterations=300))
    path = tmp_path / "desk.bin"
    write_dataset(dataset, path)
    dataset = read_dataset(path)
    t_gen = time.perf_counter() - started

    hyper = GNNHyper(node_feature_dim=3 + net.n_zones, hidden=DESK_HIDDEN,
                     layers=DESK_LAYERS, dropout_p=0.01)
    model = FlowSurrogate(dataset.network, hyper)
    result = meta_train(model, dataset, DESK_META)
    t_train = time.perf_counter() - started - t_gen

    report = meta_test(model, result.theta, dataset, DESK_META)
    random_report = meta_test(model, model.init_params(np.random.default_rng(999)),
                              dataset, DESK_META)
    elapsed = time.perf_counter() - started

    r2 = {t.task_id: t.r_squared for t in report.per_task}
    for task in report.per_task:
        assert task.r_squared >= 0.6, \
            f"task {task.task_id}: R^2 {task.r_squared:.3f} < 0.6"
    for task, rand in zip(report.per_task, random_report.per_task):
        assert task.query_loss < rand.query_loss, \
            f"task {task.task_id}: meta {task.query_loss:.4f} vs " \
            f"random {rand.query_loss:.4f}"
    _report("6", f"held-out R^2 {is_sorted(r2)} all >= 0.6 and meta beats "
                 f"random on all tasks (gen {t_gen:.0f}s + train {t_train:.0f}s, "
                 f"total {elapsed / 60:.1f} min; target < 15 min)")


def is_sorted(r2: dict) -> str:
    return ", ".join(f"{tid}: {val:.3f}" for tid, val in sorted(r2.items()))


@pytest.mark.expensive
@pytest.mark.skipif("EMA_NET" not in os.environ or "EMA_TRIPS" not in os.environ,
                    reason="set EMA_NET and EMA_TRIPS to run the full-scale "
                           "reproduction (hours of compute)")
def test_criterion_7_full_scale_reproduction(tmp_path):
    with open(os.environ["EMA_NET"]) as f:
        net = parse_network(f.read())
    with open(os.environ["EMA_TRIPS"]) as f:
        base = parse_trips(f.read())
    assert net.n_nodes == 74 and net.n_edges == 258 and net.n_zones == 74
    dataset = generate_dataset(net, base, GenerationConfig(seed=7),
                               SolverOptions())
    write_dataset(dataset, tmp_path / "full.bin")
    hyper = GNNHyper(node_feature_dim=3 + net.n_zones)  # reference defaults
    model = FlowSurrogate(net, hyper)
    result = meta_train(model, dataset, MetaConfig(seed=7))
    tail = [h.mean_query_loss for h in result.history[-100:]]
    plateau = float(np.mean(tail))
    assert 1e-3 <= plateau <= 1e-2, f"meta-loss plateau {plateau:.4g}"
    first = np.mean([h.mean_query_loss for h in result.history[:100]])
    assert plateau < first
    report = meta_test(model, result.theta, dataset, MetaConfig(seed=7))
    for task in report.per_task:
        assert task.r_squared >= 0.80, \
            f"task {task.task_id}: R^2 {task.r_squared:.3f}"
    _report("7", f"meta-loss plateau {plateau:.4g}, all held-out R^2 >= 0.80")


def test_criterion_8_determinism(tmp_path):
    started = time.perf_counter()
    rng_net = np.random.default_rng(6)
    net = grid_network(rng_net)
    base = random_demand(net, seed=7, density=0.4, lo=5, hi=40)
    gen = GenerationConfig(n_tasks=3, n_ods=5, closure_fraction_range=(0.05, 0.2),
                           seed=31, n_test_tasks=1, n_test_ods=2)
    options = SolverOptions(gap_tolerance=1e-4, max_iterations=300)
    meta_cfg = MetaConfig(alpha=0.02, beta=0.055, k_support=1, m_query=2,
                          inner_steps=2, task_batch=2, meta_iterations=8, seed=13)
    hyper = GNNHyper(node_feature_dim=3 + net.n_zones, hidden=8, layers=2,
                     dropout_p=0.01)

    artifacts = []
    for run in ("a", "b"):
        droot = tmp_path / run
        droot.mkdir()
        dataset = generate_dataset(net, base, gen, options)
        write_dataset(dataset, droot / "data.bin")
        model = FlowSurrogate(net, hyper)
        result = meta_train(model, dataset, meta_cfg)
        save_params(GatedGCNParams.from_named(hyper, result.theta),
                    droot / "weights.bin")
        report = meta_test(model, result.theta, dataset, meta_cfg)
        files = write_report(report, droot / "report")
        # solver output determinism stands in for the quick criteria
        flows = solve_ue(net, None, base, options).flows
        artifacts.append((droot, files, flows.tobytes()))

    (root_a, files_a, flows_a), (root_b, files_b, flows_b) = artifacts
    assert flows_a == flows_b
    assert (root_a / "data.bin").read_bytes() == (root_b / "data.bin").read_bytes()
    assert (root_a / "weights.bin").read_bytes() == (root_b / "weights.bin").read_bytes()
    compared = 0
    for fa, fb in zip(files_a, files_b):
        assert open(fa, "rb").read() == open(fb, "rb").read()
        compared += 1
    elapsed = time.perf_counter() - started
    _report("8", f"dataset, checkpoint, solver flows, and {compared} report "
                 f"files byte-identical across two seeded runs ({elapsed:.0f}s)")
