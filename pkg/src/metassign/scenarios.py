"""Meta-learning corpus generation: closures, OD perturbation, features.

Every random draw flows from a per-purpose stream derived from
(seed, kind, index) seed sequences, so generation is deterministic and
independent of worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from math import ceil, floor

import numpy as np

from .assignment import SolverOptions, _Adjacency, _dijkstra, _zone_nodes, solve_ue
from .datasets import ClosureTask, Dataset, Normalization, Sample, Split
from .errors import ConfigError, GenerationError, ScenarioInfeasibleError
from .network import ODMatrix, RoadNetwork

_SPLIT_STREAM, _TASK_STREAM, _OD_STREAM = 0, 1, 2


@dataclass(frozen=True)
class PerturbationParams:
    """Multiplicative OD noise: per-entry relative change magnitude is
    clamped into [factor_low, factor_high]; zone factors are spatially
    correlated when coordinates are available."""

    factor_low: float = 0.15
    factor_high: float = 0.70
    correlation_length: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.factor_low <= self.factor_high):
            raise ConfigError("need 0 <= factor_low <= factor_high")


@dataclass(frozen=True)
class GenerationConfig:
    n_tasks: int = 336
    n_ods: int = 74
    closure_fraction_range: tuple[float, float] = (0.05, 0.30)
    od_perturbation: PerturbationParams = field(default_factory=PerturbationParams)
    seed: int = 0
    n_test_tasks: int = 3
    n_test_ods: int = 25
    degrees_on_open_subgraph: bool = True
    max_closure_retries: int = 1000

    def __post_init__(self):
        low, high = self.closure_fraction_range
        if not (0.0 <= low <= high < 1.0):
            raise ConfigError("closure_fraction_range must satisfy 0 <= low <= high < 1")
        if not (0 <= self.n_test_tasks < self.n_tasks):
            raise ConfigError("need 0 <= n_test_tasks < n_tasks")
        if not (0 <= self.n_test_ods < self.n_ods):
            raise ConfigError("need 0 <= n_test_ods < n_ods")


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def compute_normalization(network: RoadNetwork, base_od: ODMatrix) -> Normalization:
    cap = float(network.capacity.max()) if network.n_edges else 1.0
    dem = float(base_od.demand.max())
    return Normalization(flow_scale=cap, demand_scale=dem if dem > 0 else 1.0,
                         capacity_scale=cap)


def _demand_connected(network: RoadNetwork, present: np.ndarray,
                      base_od: ODMatrix) -> bool:
    """True when every positive-demand zone pair is connected on the open
    subgraph."""
    adj = _Adjacency(network, present)
    zone_node = _zone_nodes(network)
    unit = [1.0] * network.n_edges
    inf = float("inf")
    for origin_zone in range(base_od.n_zones):
        dests = np.nonzero(base_od.demand[origin_zone])[0]
        if not dests.size:
            continue
        dist, _, _ = _dijkstra(adj, unit, int(zone_node[origin_zone]))
        if any(dist[zone_node[d]] == inf for d in dests):
            return False
    return True


def sample_closure(network: RoadNetwork, fraction_range: tuple[float, float],
                   rng: np.random.Generator, base_od: ODMatrix | None = None,
                   task_id: int = 0, max_retries: int = 1000) -> ClosureTask:
    """Draw a random closure: the closed-edge count is uniform on the integer
    range [ceil(low*|E|), floor(high*|E|)], the closed set uniform without
    replacement, rejection-resampled until every positive-demand pair of the
    base OD stays connected."""
    low, high = fraction_range
    n_edges = network.n_edges
    lo, hi = ceil(low * n_edges), floor(high * n_edges)
    if lo > hi:
        raise GenerationError(
            f"closure fraction range [{low}, {high}] admits no integer count "
            f"for {n_edges} edges")
    for _ in range(max_retries):
        count = int(rng.integers(lo, hi + 1))
        present = np.ones(n_edges, dtype=bool)
        if count:
            present[rng.choice(n_edges, size=count, replace=False)] = False
        if base_od is None or _demand_connected(network, present, base_od):
            return ClosureTask(task_id=task_id, present=present)
    raise GenerationError(
        f"no connected closure found in {max_retries} draws; fraction range "
        f"[{low}, {high}] looks infeasible for this network")


def perturb_od(base: ODMatrix, params: PerturbationParams,
               rng: np.random.Generator, coords: np.ndarray | None = None,
               od_id: int = 0) -> ODMatrix:
    """Scale each OD entry by 1 + delta with a symmetric, spatially
    correlated delta field.

    One Gaussian factor is drawn per zone (covariance exp(-dist/L) over
    zone coordinates; independent when coords are absent or L <= 0); the
    entry factor is the mean of its origin and destination factors, and its
    magnitude is clamped into [factor_low, factor_high].
    """
    n = base.n_zones
    sigma = 0.5 * (params.factor_low + params.factor_high)
    if coords is not None and params.correlation_length > 0 and n > 1:
        coords = np.asarray(coords, dtype=np.float64)
        diff = coords[:, None, :] - coords[None, :, :]
        dist = np.sqrt((diff ** 2).sum(axis=2))
        cov = sigma ** 2 * np.exp(-dist / params.correlation_length)
        cov[np.diag_indices(n)] += 1e-12
        factors = np.linalg.cholesky(cov) @ rng.standard_normal(n)
    else:
        factors = sigma * rng.standard_normal(n)
    pair = 0.5 * (factors[:, None] + factors[None, :])
    delta = np.sign(pair) * np.clip(np.abs(pair), params.factor_low, params.factor_high)
    demand = np.maximum(base.demand * (1.0 + delta), 0.0)
    np.fill_diagonal(demand, 0.0)
    return ODMatrix(demand=demand, od_id=od_id)


def build_node_features(network: RoadNetwork, present_mask: np.ndarray,
                        od: ODMatrix, normalization: Normalization,
                        degrees_on_open_subgraph: bool = True) -> np.ndarray:
    """Per node: [in_degree, out_degree, total_degree, od_row / demand_scale].

    Degrees are counted on the open subgraph by default and scaled by the
    base network's maximum total degree.
    """
    base_in, base_out = network.degrees(None)
    degree_scale = float((base_in + base_out).max()) or 1.0
    mask = present_mask if degrees_on_open_subgraph else None
    in_deg, out_deg = network.degrees(mask)
    od_rows = np.zeros((network.n_nodes, network.n_zones))
    zone_node = _zone_nodes(network)
    od_rows[zone_node] = od.demand / normalization.demand_scale
    return np.column_stack([in_deg / degree_scale, out_deg / degree_scale,
                            (in_deg + out_deg) / degree_scale, od_rows])


def build_edge_features(network: RoadNetwork, present_mask: np.ndarray,
                        normalization: Normalization) -> np.ndarray:
    """Per edge: [capacity / capacity_scale, present flag]."""
    present = np.asarray(present_mask, dtype=np.float64)
    return np.column_stack([network.capacity / normalization.capacity_scale, present])


def generate_dataset(network: RoadNetwork, base_od: ODMatrix,
                     config: GenerationConfig,
                     options: SolverOptions = SolverOptions(),
                     n_workers: int = 1, progress=None) -> Dataset:
    """Build the full corpus: closures x ODs, equilibrium targets, features.

    Deterministic for a fixed config (including seed) regardless of
    ``n_workers``. ``progress`` is an optional callable(done, total).
    """
    if base_od.n_zones != network.n_zones:
        raise ConfigError("base OD and network zone counts differ")
    norm = compute_normalization(network, base_od)
    coords = None
    if network.x is not None and network.y is not None:
        zone_node = _zone_nodes(network)
        coords = np.column_stack([network.x[zone_node], network.y[zone_node]])

    tasks = [
        sample_closure(network, config.closure_fraction_range,
                       _stream(config.seed, _TASK_STREAM, t), base_od,
                       task_id=t, max_retries=config.max_closure_retries)
        for t in range(config.n_tasks)
    ]
    ods = [
        perturb_od(base_od, config.od_perturbation,
                   _stream(config.seed, _OD_STREAM, o), coords, od_id=o)
        for o in range(config.n_ods)
    ]

    split_rng = _stream(config.seed, _SPLIT_STREAM)
    test_tasks = sorted(split_rng.choice(config.n_tasks, size=config.n_test_tasks,
                                         replace=False).tolist())
    test_ods = sorted(split_rng.choice(config.n_ods, size=config.n_test_ods,
                                       replace=False).tolist())
    split = Split(
        train_task_ids=tuple(t for t in range(config.n_tasks) if t not in set(test_tasks)),
        test_task_ids=tuple(test_tasks),
        test_od_ids=tuple(test_ods),
    )

    edge_features = {
        task.task_id: build_edge_features(network, task.present, norm)
        for task in tasks
    }

    def solve_pair(pair: tuple[int, int]) -> Sample:
        t, o = pair
        task, od = tasks[t], ods[o]
        try:
            result = solve_ue(network, task.present, od, options)
        except ScenarioInfeasibleError as exc:
            raise GenerationError(f"task {t}, od {o}: {exc}") from exc
        nodes = build_node_features(network, task.present, od, norm,
                                    config.degrees_on_open_subgraph)
        return Sample(task_id=t, od_id=o, node_features=nodes,
                      edge_features=edge_features[t],
                      target_flows=result.flows, normalization=norm)

    pairs = [(t, o) for t in range(config.n_tasks) for o in range(config.n_ods)]
    samples: dict[tuple[int, int], Sample] = {}
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            for i, sample in enumerate(pool.map(solve_pair, pairs)):
                samples[(sample.task_id, sample.od_id)] = sample
                if progress:
                    progress(i + 1, len(pairs))
    else:
        for i, pair in enumerate(pairs):
            sample = solve_pair(pair)
            samples[pair] = sample
            if progress:
                progress(i + 1, len(pairs))

    return Dataset(network=network, tasks=tasks, od_matrices=ods,
                   samples=samples, split=split, normalization=norm)
