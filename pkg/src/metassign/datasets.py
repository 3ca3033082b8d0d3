"""Closure tasks, training samples, and binary dataset persistence.

The on-disk layout (magic ``MASG``, little-endian, version 1) is documented
in docs/FORMATS.md. Writing iterates samples in sorted key order so equal
datasets always produce identical bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from . import _binio
from .errors import DatasetFormatError, DatasetIntegrityError, ValidationError
from .network import ODMatrix, RoadNetwork

DATASET_MAGIC = b"MASG"
DATASET_VERSION = 1


@dataclass(frozen=True)
class ClosureTask:
    """Boolean edge-presence mask over the base network (True = open)."""

    task_id: int
    present: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "present", np.asarray(self.present, dtype=bool))

    @property
    def n_closed(self) -> int:
        return int((~self.present).sum())

    @property
    def closed_fraction(self) -> float:
        return self.n_closed / len(self.present)


@dataclass(frozen=True)
class Normalization:
    """Scales applied to features and targets; fixed at generation time."""

    flow_scale: float
    demand_scale: float
    capacity_scale: float

    def __post_init__(self):
        for name in ("flow_scale", "demand_scale", "capacity_scale"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be > 0")


@dataclass(frozen=True)
class Sample:
    """One (closure task, OD matrix) pair with features and target flows.

    ``node_features`` columns are [in_degree, out_degree, total_degree,
    od_row_0 .. od_row_{Z-1}] (all scaled); ``edge_features`` columns are
    [capacity/capacity_scale, present flag]. ``target_flows`` holds raw
    equilibrium flows in vehicles/hour; the normalized view used for
    training is ``target_flows_normalized``.
    """

    task_id: int
    od_id: int
    node_features: np.ndarray
    edge_features: np.ndarray
    target_flows: np.ndarray
    normalization: Normalization

    def __post_init__(self):
        nf = np.asarray(self.node_features, dtype=np.float64)
        ef = np.asarray(self.edge_features, dtype=np.float64)
        tf = np.asarray(self.target_flows, dtype=np.float64)
        if ef.ndim != 2 or ef.shape[1] != 2:
            raise ValidationError(f"edge_features must be |E| x 2, got {ef.shape}")
        if tf.ndim != 1 or len(tf) != ef.shape[0]:
            raise ValidationError("target_flows length must match edge_features rows")
        if (tf < 0).any():
            raise ValidationError("target_flows must be non-negative")
        closed = ef[:, 1] == 0.0
        if tf[closed].any():
            raise ValidationError("target_flows must be zero on closed edges")
        object.__setattr__(self, "node_features", nf)
        object.__setattr__(self, "edge_features", ef)
        object.__setattr__(self, "target_flows", tf)

    @property
    def target_flows_normalized(self) -> np.ndarray:
        return self.target_flows / self.normalization.flow_scale


@dataclass(frozen=True)
class Split:
    """Held-out closure tasks and OD matrices, never seen in training."""

    train_task_ids: tuple[int, ...]
    test_task_ids: tuple[int, ...]
    test_od_ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "train_task_ids", tuple(int(t) for t in self.train_task_ids))
        object.__setattr__(self, "test_task_ids", tuple(int(t) for t in self.test_task_ids))
        object.__setattr__(self, "test_od_ids", tuple(int(t) for t in self.test_od_ids))
        if set(self.train_task_ids) & set(self.test_task_ids):
            raise ValidationError("train and test task ids overlap")


@dataclass
class Dataset:
    """Generated corpus: base network, tasks, ODs, samples, and split."""

    network: RoadNetwork
    tasks: list[ClosureTask]
    od_matrices: list[ODMatrix]
    samples: dict[tuple[int, int], Sample]
    split: Split
    normalization: Normalization = field(default=None)

    def __post_init__(self):
        if self.normalization is None and self.samples:
            self.normalization = next(iter(self.samples.values())).normalization
        task_ids = {t.task_id for t in self.tasks}
        od_ids = {od.od_id for od in self.od_matrices}
        for (tid, oid), sample in self.samples.items():
            if tid not in task_ids or oid not in od_ids:
                raise ValidationError(f"sample ({tid}, {oid}) references unknown task or OD")
            if (sample.task_id, sample.od_id) != (tid, oid):
                raise ValidationError(f"sample key ({tid}, {oid}) disagrees with its ids")

    @property
    def train_od_ids(self) -> tuple[int, ...]:
        test = set(self.split.test_od_ids)
        return tuple(od.od_id for od in self.od_matrices if od.od_id not in test)

    def samples_for_task(self, task_id: int, od_ids) -> list[Sample]:
        return [self.samples[(task_id, oid)] for oid in od_ids]

    def equals(self, other: "Dataset") -> bool:
        """Field-by-field exact equality (used by the round-trip contract)."""
        if self.split != other.split:
            return False
        if self.normalization != other.normalization:
            return False
        a, b = self.network, other.network
        net_eq = (
            a.n_nodes == b.n_nodes and a.n_zones == b.n_zones
            and a.first_thru_node == b.first_thru_node
            and all(np.array_equal(getattr(a, n), getattr(b, n))
                    for n in ("from_node", "to_node", "capacity", "free_flow_time",
                              "bpr_b", "bpr_power", "length", "zone_id",
                              "original_node_ids"))
            and ((a.x is None) == (b.x is None))
            and (a.x is None or (np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)))
        )
        if not net_eq:
            return False
        if len(self.tasks) != len(other.tasks) or len(self.od_matrices) != len(other.od_matrices):
            return False
        for t1, t2 in zip(self.tasks, other.tasks):
            if t1.task_id != t2.task_id or not np.array_equal(t1.present, t2.present):
                return False
        for o1, o2 in zip(self.od_matrices, other.od_matrices):
            if o1.od_id != o2.od_id or not np.array_equal(o1.demand, o2.demand):
                return False
        if self.samples.keys() != other.samples.keys():
            return False
        for key, s1 in self.samples.items():
            s2 = other.samples[key]
            if not (np.array_equal(s1.node_features, s2.node_features)
                    and np.array_equal(s1.edge_features, s2.edge_features)
                    and np.array_equal(s1.target_flows, s2.target_flows)
                    and s1.normalization == s2.normalization):
                return False
        return True


def _write_id_list(f: BinaryIO, ids: tuple[int, ...]):
    _binio.write(f, "I", len(ids))
    _binio.write_array(f, np.asarray(ids, dtype=np.int64), "<i8")


def _read_id_list(f: BinaryIO) -> tuple[int, ...]:
    (n,) = _binio.read(f, "I")
    return tuple(int(v) for v in _binio.read_array(f, n, "<i8"))


def write_dataset(dataset: Dataset, path) -> None:
    """Write a dataset to the versioned MASG binary format."""
    net = dataset.network
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        _binio.write(f, "I", DATASET_VERSION)

        has_coords = net.x is not None
        _binio.write(f, "IIIiB", net.n_nodes, net.n_zones, net.n_edges,
               net.first_thru_node, 1 if has_coords else 0)
        _binio.write_array(f, net.from_node, "<i8")
        _binio.write_array(f, net.to_node, "<i8")
        for name in ("capacity", "free_flow_time", "bpr_b", "bpr_power", "length"):
            _binio.write_array(f, getattr(net, name), "<f8")
        _binio.write_array(f, net.zone_id, "<i8")
        _binio.write_array(f, net.original_node_ids, "<i8")
        if has_coords:
            _binio.write_array(f, net.x, "<f8")
            _binio.write_array(f, net.y, "<f8")

        norm = dataset.normalization
        _binio.write(f, "ddd", norm.flow_scale, norm.demand_scale, norm.capacity_scale)

        _binio.write(f, "I", len(dataset.od_matrices))
        for od in dataset.od_matrices:
            _binio.write(f, "iI", od.od_id, od.n_zones)
            _binio.write_array(f, od.demand, "<f8")

        _binio.write(f, "I", len(dataset.tasks))
        for task in dataset.tasks:
            _binio.write(f, "i", task.task_id)
            _binio.write_array(f, task.present, "u1")

        _write_id_list(f, dataset.split.train_task_ids)
        _write_id_list(f, dataset.split.test_task_ids)
        _write_id_list(f, dataset.split.test_od_ids)

        _binio.write(f, "I", len(dataset.samples))
        node_cols = 3 + net.n_zones
        for key in sorted(dataset.samples):
            s = dataset.samples[key]
            if s.node_features.shape != (net.n_nodes, node_cols):
                raise ValidationError(
                    f"sample {key}: node_features shape {s.node_features.shape} "
                    f"!= ({net.n_nodes}, {node_cols})")
            _binio.write(f, "ii", s.task_id, s.od_id)
            _binio.write_array(f, s.node_features, "<f8")
            _binio.write_array(f, s.edge_features, "<f8")
            _binio.write_array(f, s.target_flows, "<f8")


def read_dataset(path) -> Dataset:
    """Read a dataset written by :func:`write_dataset`.

    Raises DatasetIntegrityError on bad magic or truncation and
    DatasetFormatError on an unsupported version.
    """
    with open(path, "rb") as f:
        magic = _binio.read_exact(f, 4)
        if magic != DATASET_MAGIC:
            raise DatasetIntegrityError(
                f"bad magic {magic!r}, expected {DATASET_MAGIC!r}")
        (version,) = _binio.read(f, "I")
        if version != DATASET_VERSION:
            raise DatasetFormatError(
                f"unsupported dataset version {version} (supported: {DATASET_VERSION})")

        n_nodes, n_zones, n_edges, first_thru, has_coords = _binio.read(f, "IIIiB")
        from_node = _binio.read_array(f, n_edges, "<i8")
        to_node = _binio.read_array(f, n_edges, "<i8")
        edge_floats = {name: _binio.read_array(f, n_edges, "<f8")
                       for name in ("capacity", "free_flow_time", "bpr_b",
                                    "bpr_power", "length")}
        zone_id = _binio.read_array(f, n_nodes, "<i8")
        original = _binio.read_array(f, n_nodes, "<i8")
        x = y = None
        if has_coords:
            x = _binio.read_array(f, n_nodes, "<f8")
            y = _binio.read_array(f, n_nodes, "<f8")
        network = RoadNetwork(
            n_nodes=n_nodes, n_zones=n_zones, from_node=from_node, to_node=to_node,
            zone_id=zone_id, x=x, y=y, original_node_ids=original,
            first_thru_node=first_thru, **edge_floats)

        flow_scale, demand_scale, capacity_scale = _binio.read(f, "ddd")
        norm = Normalization(flow_scale, demand_scale, capacity_scale)

        (n_ods,) = _binio.read(f, "I")
        od_matrices = []
        for _ in range(n_ods):
            od_id, z = _binio.read(f, "iI")
            demand = _binio.read_array(f, z * z, "<f8").reshape(z, z)
            od_matrices.append(ODMatrix(demand=demand, od_id=od_id))

        (n_tasks,) = _binio.read(f, "I")
        tasks = []
        for _ in range(n_tasks):
            (task_id,) = _binio.read(f, "i")
            present = _binio.read_array(f, n_edges, "u1").astype(bool)
            tasks.append(ClosureTask(task_id=task_id, present=present))

        split = Split(
            train_task_ids=_read_id_list(f),
            test_task_ids=_read_id_list(f),
            test_od_ids=_read_id_list(f),
        )

        (n_samples,) = _binio.read(f, "I")
        node_cols = 3 + n_zones
        samples = {}
        for _ in range(n_samples):
            task_id, od_id = _binio.read(f, "ii")
            nf = _binio.read_array(f, n_nodes * node_cols, "<f8").reshape(n_nodes, node_cols)
            ef = _binio.read_array(f, n_edges * 2, "<f8").reshape(n_edges, 2)
            tf = _binio.read_array(f, n_edges, "<f8")
            samples[(task_id, od_id)] = Sample(
                task_id=task_id, od_id=od_id, node_features=nf,
                edge_features=ef, target_flows=tf, normalization=norm)

        _binio.expect_eof(f, "dataset")

    return Dataset(network=network, tasks=tasks, od_matrices=od_matrices,
                   samples=samples, split=split, normalization=norm)
