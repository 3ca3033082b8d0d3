"""Gated graph-convolutional surrogate predicting per-edge equilibrium flows.

Per message-passing layer, with hidden node states x and fixed edge states e:

    gate    g = sigmoid(W_e e + W_dst x_dst + W_org x_org + b_g)
    message m = (W_m x_org + b_m) * g
    agg_d     = sum_{e into d} m  /  (sum_{e into d} g + eps)
    update  x' = relu(W_self x + b_self + agg), then dropout

Closed edges have g (and therefore m) forced to exact zero before
aggregation, severing the connection. A 3-layer MLP over
[x_org | x_dst | e] decodes each edge to a normalized flow; predictions on
closed edges are zeroed when ``output_mask`` is on (the default).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import _binio
from . import autodiff as ad
from .autodiff import Tensor
from .datasets import Sample
from .errors import ConfigError, DatasetFormatError, DatasetIntegrityError, ShapeError
from .network import RoadNetwork

CHECKPOINT_MAGIC = b"MAWT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class GNNHyper:
    node_feature_dim: int
    edge_feature_dim: int = 2
    hidden: int = 192
    layers: int = 6
    dropout_p: float = 0.01
    epsilon: float = 1e-6
    output_mask: bool = True
    edge_update: bool = False   # propagate pre-gate activations as new edge states
    residual: bool = False

    def __post_init__(self):
        if self.hidden < 1:
            raise ConfigError(f"hidden width must be >= 1, got {self.hidden}")
        if self.layers < 1:
            raise ConfigError(f"layer count must be >= 1, got {self.layers}")
        if not (0.0 <= self.dropout_p < 1.0):
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.node_feature_dim < 1 or self.edge_feature_dim < 1:
            raise ConfigError("feature dims must be >= 1")


@dataclass
class LayerParams:
    w_edge: Tensor
    w_dst: Tensor
    w_org: Tensor
    w_msg: Tensor
    w_self: Tensor
    b_gate: Tensor
    b_msg: Tensor
    b_self: Tensor


@dataclass
class GatedGCNParams:
    """All trainable weights; the meta-parameters of the training loop."""

    hyper: GNNHyper
    node_encoder_w: Tensor
    node_encoder_b: Tensor
    edge_encoder_w: Tensor
    edge_encoder_b: Tensor
    layers: list[LayerParams]
    decoder_w1: Tensor
    decoder_b1: Tensor
    decoder_w2: Tensor
    decoder_b2: Tensor
    decoder_w3: Tensor
    decoder_b3: Tensor

    def named_parameters(self) -> dict[str, Tensor]:
        out = {
            "node_enc.w": self.node_encoder_w, "node_enc.b": self.node_encoder_b,
            "edge_enc.w": self.edge_encoder_w, "edge_enc.b": self.edge_encoder_b,
        }
        for i, layer in enumerate(self.layers):
            for name in ("w_edge", "w_dst", "w_org", "w_msg", "w_self",
                         "b_gate", "b_msg", "b_self"):
                out[f"layer{i}.{name}"] = getattr(layer, name)
        for name in ("w1", "b1", "w2", "b2", "w3", "b3"):
            out[f"dec.{name}"] = getattr(self, f"decoder_{name}")
        return out

    @classmethod
    def from_named(cls, hyper: GNNHyper, named: dict[str, Tensor]) -> "GatedGCNParams":
        layers = [
            LayerParams(**{name: named[f"layer{i}.{name}"]
                           for name in ("w_edge", "w_dst", "w_org", "w_msg",
                                        "w_self", "b_gate", "b_msg", "b_self")})
            for i in range(hyper.layers)
        ]
        return cls(
            hyper=hyper,
            node_encoder_w=named["node_enc.w"], node_encoder_b=named["node_enc.b"],
            edge_encoder_w=named["edge_enc.w"], edge_encoder_b=named["edge_enc.b"],
            layers=layers,
            decoder_w1=named["dec.w1"], decoder_b1=named["dec.b1"],
            decoder_w2=named["dec.w2"], decoder_b2=named["dec.b2"],
            decoder_w3=named["dec.w3"], decoder_b3=named["dec.b3"],
        )


@dataclass(frozen=True)
class GraphBatch:
    """One sample's tensors plus the edge-to-node index structure."""

    node_features: np.ndarray
    edge_features: np.ndarray
    origin_index: np.ndarray
    dest_index: np.ndarray
    present_mask: np.ndarray
    targets: np.ndarray | None = None  # normalized flows
    task_id: int = -1
    od_id: int = -1

    def __post_init__(self):
        n = self.node_features.shape[0]
        e = self.edge_features.shape[0]
        for name in ("origin_index", "dest_index"):
            idx = np.asarray(getattr(self, name), dtype=np.int64)
            if len(idx) != e:
                raise ShapeError(f"{name} length {len(idx)} != n_edges {e}")
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise IndexError(f"{name} out of range [0, {n})")
            object.__setattr__(self, name, idx)
        object.__setattr__(self, "present_mask",
                           np.asarray(self.present_mask, dtype=bool))

    @classmethod
    def from_sample(cls, sample: Sample, network: RoadNetwork) -> "GraphBatch":
        return cls(
            node_features=sample.node_features,
            edge_features=sample.edge_features,
            origin_index=network.from_node,
            dest_index=network.to_node,
            present_mask=sample.edge_features[:, 1] > 0,
            targets=sample.target_flows_normalized,
            task_id=sample.task_id,
            od_id=sample.od_id,
        )

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edge_features.shape[0]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return ad.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)))


def _zeros(n: int) -> Tensor:
    return ad.parameter(np.zeros(n))


def init_params(rng: np.random.Generator, hyper: GNNHyper) -> GatedGCNParams:
    """Glorot-uniform weights, zero biases; deterministic for a fixed rng."""
    h = hyper.hidden
    layers = [
        LayerParams(
            w_edge=_glorot(rng, h, h), w_dst=_glorot(rng, h, h),
            w_org=_glorot(rng, h, h), w_msg=_glorot(rng, h, h),
            w_self=_glorot(rng, h, h),
            b_gate=_zeros(h), b_msg=_zeros(h), b_self=_zeros(h),
        )
        for _ in range(hyper.layers)
    ]
    return GatedGCNParams(
        hyper=hyper,
        node_encoder_w=_glorot(rng, hyper.node_feature_dim, h),
        node_encoder_b=_zeros(h),
        edge_encoder_w=_glorot(rng, hyper.edge_feature_dim, h),
        edge_encoder_b=_zeros(h),
        layers=layers,
        decoder_w1=_glorot(rng, 3 * h, h), decoder_b1=_zeros(h),
        decoder_w2=_glorot(rng, h, h), decoder_b2=_zeros(h),
        decoder_w3=_glorot(rng, h, 1), decoder_b3=_zeros(1),
    )


def encode(batch: GraphBatch, params: GatedGCNParams) -> tuple[Tensor, Tensor]:
    """Lift raw features to the hidden width with two affine layers."""
    x_h = ad.add(ad.matmul(ad.constant(batch.node_features), params.node_encoder_w),
                 params.node_encoder_b)
    e_h = ad.add(ad.matmul(ad.constant(batch.edge_features), params.edge_encoder_w),
                 params.edge_encoder_b)
    return x_h, e_h


def mpnn_layer(x_h: Tensor, e_h: Tensor, batch: GraphBatch, layer: LayerParams,
               hyper: GNNHyper, train: bool = False,
               rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """One gated message-passing round; returns (new node states, edge states
    for the next layer)."""
    h = hyper.hidden
    mask = ad.constant(np.repeat(batch.present_mask.astype(np.float64)[:, None],
                                 h, axis=1))
    x_org = ad.gather_nodes(x_h, batch.origin_index)
    x_dst = ad.gather_nodes(x_h, batch.dest_index)

    pre_gate = ad.add(
        ad.add(ad.matmul(e_h, layer.w_edge), ad.matmul(x_dst, layer.w_dst)),
        ad.add(ad.matmul(x_org, layer.w_org), layer.b_gate))
    gate = ad.hadamard(ad.sigmoid(pre_gate), mask)  # closed edges: g and m exactly 0
    message = ad.hadamard(ad.add(ad.matmul(x_org, layer.w_msg), layer.b_msg), gate)

    numer = ad.segment_sum(message, batch.dest_index, batch.n_nodes)
    denom = ad.add(ad.segment_sum(gate, batch.dest_index, batch.n_nodes),
                   ad.constant(np.full((batch.n_nodes, h), hyper.epsilon)))
    agg = ad.divide(numer, denom)

    x_new = ad.add(ad.add(ad.matmul(x_h, layer.w_self), layer.b_self), agg)
    x_new = ad.relu(x_new)
    x_new = ad.dropout(x_new, hyper.dropout_p, rng, train)
    if hyper.residual:
        x_new = ad.add(x_h, x_new)
    e_next = pre_gate if hyper.edge_update else e_h
    return x_new, e_next


def decode(x_final: Tensor, e_h: Tensor, batch: GraphBatch,
           params: GatedGCNParams) -> Tensor:
    """3-layer MLP over [x_org | x_dst | e] -> one flow per edge."""
    feats = ad.concat([ad.gather_nodes(x_final, batch.origin_index),
                       ad.gather_nodes(x_final, batch.dest_index), e_h], axis=1)
    hidden = ad.relu(ad.add(ad.matmul(feats, params.decoder_w1), params.decoder_b1))
    hidden = ad.relu(ad.add(ad.matmul(hidden, params.decoder_w2), params.decoder_b2))
    out = ad.add(ad.matmul(hidden, params.decoder_w3), params.decoder_b3)
    out = ad.reshape(out, (batch.n_edges,))
    if params.hyper.output_mask:
        out = ad.hadamard(out, ad.constant(batch.present_mask.astype(np.float64)))
    return out


def forward(batch: GraphBatch, params: GatedGCNParams, train: bool = False,
            rng: np.random.Generator | None = None) -> Tensor:
    """Predicted normalized flows, one per edge."""
    x_h, e_h = encode(batch, params)
    for layer in params.layers:
        x_h, e_h = mpnn_layer(x_h, e_h, batch, layer, params.hyper, train, rng)
    return decode(x_h, e_h, batch, params)


def task_loss(predictions: Tensor, targets, delta: float = 1.0) -> Tensor:
    """Smooth-L1 mean over edges for one sample."""
    target = targets if isinstance(targets, Tensor) else ad.constant(targets)
    return ad.smooth_l1(predictions, target, delta)


class FlowSurrogate:
    """Bundles a network with hyperparameters behind the generic interface
    the meta-training loop expects: ``init_params`` and ``loss``."""

    def __init__(self, network: RoadNetwork, hyper: GNNHyper):
        expected = 3 + network.n_zones
        if hyper.node_feature_dim != expected:
            raise ConfigError(
                f"node_feature_dim {hyper.node_feature_dim} != 3 + n_zones = {expected}")
        self.network = network
        self.hyper = hyper

    def init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        return init_params(rng, self.hyper).named_parameters()

    def batch(self, sample: Sample) -> GraphBatch:
        return GraphBatch.from_sample(sample, self.network)

    def loss(self, params: dict[str, Tensor], samples, rng=None,
             train: bool = False) -> Tensor:
        """Mean smooth-L1 loss over a list of samples (the K-average)."""
        if not samples:
            raise ConfigError("loss needs at least one sample")
        structured = GatedGCNParams.from_named(self.hyper, params)
        total = None
        for sample in samples:
            batch = sample if isinstance(sample, GraphBatch) else self.batch(sample)
            pred = forward(batch, structured, train=train, rng=rng)
            loss = task_loss(pred, batch.targets)
            total = loss if total is None else ad.add(total, loss)
        return ad.scale(total, 1.0 / len(samples))

    def predict(self, params: dict[str, Tensor], sample) -> np.ndarray:
        """Deterministic eval-mode prediction of normalized flows."""
        structured = GatedGCNParams.from_named(self.hyper, params)
        batch = sample if isinstance(sample, GraphBatch) else self.batch(sample)
        with ad.no_grad():
            return forward(batch, structured, train=False).values


def save_params(params: GatedGCNParams, path) -> None:
    """Write weights to the versioned MAWT binary format."""
    hyper = params.hyper
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        _binio.write(f, "I", CHECKPOINT_VERSION)
        flags = (hyper.output_mask | (hyper.edge_update << 1) | (hyper.residual << 2))
        _binio.write(f, "IIIIddB", hyper.node_feature_dim, hyper.edge_feature_dim,
                     hyper.hidden, hyper.layers, hyper.dropout_p, hyper.epsilon,
                     flags)
        for tensor in params.named_parameters().values():
            _binio.write_array(f, tensor.values, "<f8")


def load_params(path) -> GatedGCNParams:
    """Read a MAWT checkpoint written by :func:`save_params`."""
    with open(path, "rb") as f:
        magic = _binio.read_exact(f, 4)
        if magic != CHECKPOINT_MAGIC:
            raise DatasetIntegrityError(
                f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (version,) = _binio.read(f, "I")
        if version != CHECKPOINT_VERSION:
            raise DatasetFormatError(
                f"unsupported checkpoint version {version} "
                f"(supported: {CHECKPOINT_VERSION})")
        nfd, efd, hidden, layers, dropout_p, epsilon, flags = _binio.read(f, "IIIIddB")
        hyper = GNNHyper(node_feature_dim=nfd, edge_feature_dim=efd, hidden=hidden,
                         layers=layers, dropout_p=dropout_p, epsilon=epsilon,
                         output_mask=bool(flags & 1), edge_update=bool(flags & 2),
                         residual=bool(flags & 4))
        template = init_params(np.random.default_rng(0), hyper)
        named = {}
        for name, tensor in template.named_parameters().items():
            flat = _binio.read_array(f, tensor.values.size, "<f8")
            named[name] = ad.parameter(flat.reshape(tensor.shape).copy())
        _binio.expect_eof(f, "checkpoint")
    return GatedGCNParams.from_named(hyper, named)
