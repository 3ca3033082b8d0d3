"""Road network and OD demand data model, plus TNTP-style file parsing.

Networks are directed: a two-way road appears as two edge records. Node and
edge ids are dense 0-based integers; the original 1-based node numbers from
the input file are retained in ``original_node_ids``. Zone ``z`` is
identified with the node whose original number is ``z + 1``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import NetworkParseError, ValidationError

_HEADER_TAG = re.compile(r"<([^<>]+)>\s*(\S*)")

# Header tags required in a network file.
_NET_REQUIRED = ("NUMBER OF NODES", "NUMBER OF LINKS", "NUMBER OF ZONES")
_TRIPS_REQUIRED = ("NUMBER OF ZONES",)


@dataclass(frozen=True)
class RoadNetwork:
    """Directed road graph with per-edge BPR cost parameters.

    Edge arrays all have length ``n_edges`` and are indexed by edge id.
    ``zone_id[n]`` is -1 for nodes that are not zone centroids. ``x``/``y``
    are optional node coordinates (None when unknown).
    """

    n_nodes: int
    n_zones: int
    from_node: np.ndarray      # int, edge tail
    to_node: np.ndarray        # int, edge head
    capacity: np.ndarray       # float, vehicles/hour
    free_flow_time: np.ndarray  # float, minutes
    bpr_b: np.ndarray          # float, dimensionless
    bpr_power: np.ndarray      # float, dimensionless
    length: np.ndarray         # float, distance units
    zone_id: np.ndarray = field(default=None)  # int, -1 = not a zone
    x: np.ndarray | None = None
    y: np.ndarray | None = None
    original_node_ids: np.ndarray = field(default=None)  # 1-based file ids
    first_thru_node: int = 1

    def __post_init__(self):
        object.__setattr__(self, "from_node", np.asarray(self.from_node, dtype=np.int64))
        object.__setattr__(self, "to_node", np.asarray(self.to_node, dtype=np.int64))
        for name in ("capacity", "free_flow_time", "bpr_b", "bpr_power", "length"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.zone_id is None:
            zid = np.full(self.n_nodes, -1, dtype=np.int64)
            n = min(self.n_zones, self.n_nodes)  # overflow caught in _validate
            zid[:n] = np.arange(n)
            object.__setattr__(self, "zone_id", zid)
        else:
            object.__setattr__(self, "zone_id", np.asarray(self.zone_id, dtype=np.int64))
        if self.original_node_ids is None:
            object.__setattr__(self, "original_node_ids",
                               np.arange(1, self.n_nodes + 1, dtype=np.int64))
        else:
            object.__setattr__(self, "original_node_ids",
                               np.asarray(self.original_node_ids, dtype=np.int64))
        if self.x is not None:
            object.__setattr__(self, "x", np.asarray(self.x, dtype=np.float64))
        if self.y is not None:
            object.__setattr__(self, "y", np.asarray(self.y, dtype=np.float64))
        self._validate()

    def _validate(self):
        E = self.n_edges
        for name in ("to_node", "capacity", "free_flow_time", "bpr_b", "bpr_power", "length"):
            if len(getattr(self, name)) != E:
                raise ValidationError(
                    f"edge array '{name}' has length {len(getattr(self, name))}, expected {E}")
        if E:
            if self.from_node.min() < 0 or self.from_node.max() >= self.n_nodes \
                    or self.to_node.min() < 0 or self.to_node.max() >= self.n_nodes:
                raise ValidationError("edge endpoint outside node range")
            loops = np.nonzero(self.from_node == self.to_node)[0]
            if loops.size:
                raise ValidationError(f"edge {loops[0]} is a self-loop")
            if (self.capacity <= 0).any():
                bad = int(np.nonzero(self.capacity <= 0)[0][0])
                raise ValidationError(f"edge {bad}: capacity must be > 0")
            if (self.free_flow_time <= 0).any():
                bad = int(np.nonzero(self.free_flow_time <= 0)[0][0])
                raise ValidationError(f"edge {bad}: free_flow_time must be > 0")
            if (self.bpr_b < 0).any() or (self.bpr_power < 0).any():
                raise ValidationError("bpr_b and bpr_power must be >= 0")
        if self.n_zones > self.n_nodes:
            raise ValidationError(
                f"n_zones ({self.n_zones}) exceeds n_nodes ({self.n_nodes})")

    @property
    def n_edges(self) -> int:
        return len(self.from_node)

    def degrees(self, present_mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Per-node (in_degree, out_degree), optionally on the open subgraph."""
        if present_mask is None:
            frm, to = self.from_node, self.to_node
        else:
            mask = np.asarray(present_mask, dtype=bool)
            frm, to = self.from_node[mask], self.to_node[mask]
        out_deg = np.bincount(frm, minlength=self.n_nodes).astype(np.float64)
        in_deg = np.bincount(to, minlength=self.n_nodes).astype(np.float64)
        return in_deg, out_deg


@dataclass(frozen=True)
class ODMatrix:
    """Zone-to-zone hourly trip demand. Diagonal is always zero."""

    demand: np.ndarray
    od_id: int = 0

    def __post_init__(self):
        dem = np.asarray(self.demand, dtype=np.float64)
        if dem.ndim != 2 or dem.shape[0] != dem.shape[1]:
            raise ValidationError(f"demand must be square, got shape {dem.shape}")
        if (dem < 0).any():
            raise ValidationError("demand entries must be non-negative")
        if np.diagonal(dem).any():
            raise ValidationError("demand diagonal must be zero")
        if not np.isfinite(dem).all():
            raise ValidationError("demand entries must be finite")
        object.__setattr__(self, "demand", dem)

    @property
    def n_zones(self) -> int:
        return self.demand.shape[0]

    @property
    def total_trips(self) -> float:
        return float(self.demand.sum())


def _parse_header(text: str, required: tuple[str, ...], kind: str) -> dict[str, str]:
    tags = {}
    for line in text.splitlines():
        if "END OF METADATA" in line:
            break
        m = _HEADER_TAG.search(line)
        if m:
            tags[m.group(1).strip().upper()] = m.group(2)
    for tag in required:
        if tag not in tags:
            raise NetworkParseError(f"{kind} file header is missing tag <{tag}>")
    return tags


def _header_int(tags: dict[str, str], tag: str, kind: str) -> int:
    try:
        return int(tags[tag])
    except (ValueError, KeyError):
        raise NetworkParseError(f"{kind} file header tag <{tag}> has no integer value")


def parse_network(text: str) -> RoadNetwork:
    """Parse the standard transportation-network link format.

    Expects a metadata header with ``<NUMBER OF NODES>``, ``<NUMBER OF
    LINKS>``, ``<NUMBER OF ZONES>`` (and optionally ``<FIRST THRU NODE>``),
    then one whitespace-separated row per link terminated by ``;`` with
    columns: init_node, term_node, capacity, length, free_flow_time, b,
    power, speed, toll, link_type.
    """
    tags = _parse_header(text, _NET_REQUIRED, "network")
    n_nodes = _header_int(tags, "NUMBER OF NODES", "network")
    n_links = _header_int(tags, "NUMBER OF LINKS", "network")
    n_zones = _header_int(tags, "NUMBER OF ZONES", "network")
    first_thru = int(tags.get("FIRST THRU NODE", "1") or 1)

    rows = []
    in_body = False
    row_no = 0
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("~"):
            in_body = True  # the ~ header line precedes the link rows
            continue
        if not in_body:
            # still in metadata; body may also start without a ~ line
            if line.startswith("<") or "END OF METADATA" in line:
                continue
            in_body = True
        row_no += 1
        parts = line.rstrip(";").split()
        if len(parts) < 7:
            raise NetworkParseError(
                f"link row {row_no}: expected at least 7 columns, got {len(parts)}")
        try:
            init, term = int(parts[0]), int(parts[1])
            cap, length, fft = float(parts[2]), float(parts[3]), float(parts[4])
            b, power = float(parts[5]), float(parts[6])
        except ValueError as exc:
            raise NetworkParseError(f"link row {row_no}: {exc}") from None
        if not (1 <= init <= n_nodes) or not (1 <= term <= n_nodes):
            raise ValidationError(
                f"link row {row_no}: node id outside 1..{n_nodes}")
        if cap <= 0:
            raise ValidationError(f"link row {row_no}: capacity must be > 0, got {cap}")
        if fft <= 0:
            raise ValidationError(
                f"link row {row_no}: free_flow_time must be > 0, got {fft}")
        rows.append((init - 1, term - 1, cap, fft, b, power, length))

    if len(rows) != n_links:
        raise NetworkParseError(
            f"header declares {n_links} links but file contains {len(rows)} rows")

    arr = np.array(rows, dtype=np.float64).reshape(len(rows), 7)
    return RoadNetwork(
        n_nodes=n_nodes,
        n_zones=n_zones,
        from_node=arr[:, 0].astype(np.int64),
        to_node=arr[:, 1].astype(np.int64),
        capacity=arr[:, 2],
        free_flow_time=arr[:, 3],
        bpr_b=arr[:, 4],
        bpr_power=arr[:, 5],
        length=arr[:, 6],
        first_thru_node=first_thru,
    )


def parse_trips(text: str, od_id: int = 0) -> ODMatrix:
    """Parse the standard trips format into a dense OD matrix.

    Unspecified zone pairs are zero; the diagonal is forced to zero.
    """
    tags = _parse_header(text, _TRIPS_REQUIRED, "trips")
    n_zones = _header_int(tags, "NUMBER OF ZONES", "trips")

    demand = np.zeros((n_zones, n_zones), dtype=np.float64)
    origin = None
    body = re.split(r"<END OF METADATA>", text)[-1]
    for raw in body.splitlines():
        line = raw.strip()
        if not line or line.startswith("~") or line.startswith("<"):
            continue
        m = re.match(r"Origin\s+(\d+)", line, flags=re.IGNORECASE)
        if m:
            origin = int(m.group(1))
            if not (1 <= origin <= n_zones):
                raise ValidationError(f"origin {origin} outside 1..{n_zones}")
            continue
        if origin is None:
            continue
        for pair in line.split(";"):
            if ":" not in pair:
                continue
            dest_str, val_str = pair.split(":", 1)
            try:
                dest = int(dest_str.strip())
                val = float(val_str.strip())
            except ValueError as exc:
                raise NetworkParseError(f"trips entry '{pair.strip()}': {exc}") from None
            if not (1 <= dest <= n_zones):
                raise ValidationError(
                    f"destination {dest} outside 1..{n_zones} (origin {origin})")
            demand[origin - 1, dest - 1] = val
    np.fill_diagonal(demand, 0.0)
    return ODMatrix(demand=demand, od_id=od_id)


def parse_node_coords(text: str, network: RoadNetwork) -> RoadNetwork:
    """Attach x/y coordinates from a node file (columns: node, x, y).

    Returns a new RoadNetwork; nodes absent from the file keep coordinate 0.
    """
    x = np.zeros(network.n_nodes)
    y = np.zeros(network.n_nodes)
    for raw in text.splitlines():
        line = raw.strip().rstrip(";")
        if not line or line.lower().startswith(("node", "~", "<")):
            continue
        parts = line.split()
        if len(parts) < 3:
            continue
        try:
            node, xv, yv = int(parts[0]), float(parts[1]), float(parts[2])
        except ValueError:
            continue
        if 1 <= node <= network.n_nodes:
            x[node - 1] = xv
            y[node - 1] = yv
    return RoadNetwork(
        n_nodes=network.n_nodes, n_zones=network.n_zones,
        from_node=network.from_node, to_node=network.to_node,
        capacity=network.capacity, free_flow_time=network.free_flow_time,
        bpr_b=network.bpr_b, bpr_power=network.bpr_power, length=network.length,
        zone_id=network.zone_id, x=x, y=y,
        original_node_ids=network.original_node_ids,
        first_thru_node=network.first_thru_node,
    )
