"""The graph forecasting network and its batched execution.

A batch is the disjoint union of per-instance graphs: node and edge rows of
all instances are stacked, attention is restricted to each node's own
neighborhood through segment ids, and the per-instance answers are gathered
into a padded ``[B, K_max]`` matrix with a boolean mask.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import ForecastQuery, SparsityGraph, TimeSeries, graph2ts, ts2graph
from .numerics import tensor as T
from .numerics.layers import AffineParams, MabParams, MhaParams, activation, affine, init_affine, mab
from .numerics.tensor import Segments, Tensor

CHECKPOINT_FORMAT = "grafiti.checkpoint"
CHECKPOINT_VERSION = 1

LAYER_CHOICES = (1, 2, 3, 4)
HEAD_CHOICES = (1, 2, 4)
HIDDEN_CHOICES = (16, 32, 64, 128, 256)


class CheckpointMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    channel_count: int
    layers: int = 2
    heads: int = 2
    hidden: int = 32
    ablation_no_target_edges: bool = False

    def __post_init__(self):
        if self.channel_count < 1:
            raise ValueError("channel_count must be positive")
        if self.layers < 1:
            raise ValueError("need at least one graph layer")
        if self.heads < 1 or self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} is not divisible by heads={self.heads}")

    @property
    def label(self) -> str:
        return "GraFITi\\T" if self.ablation_no_target_edges else "GraFITi"

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        C, d = self.channel_count, self.hidden
        shapes: dict[str, tuple[int, ...]] = {}

        def lin(name, i, o):
            shapes[f"{name}.weight"] = (i, o)
            shapes[f"{name}.bias"] = (o,)

        lin("channel_embed", C, d)
        lin("time_embed", 1, d)
        lin("edge_embed", 2, d)
        for l in range(self.layers):
            lin(f"layers.{l}.mab.query", d, d)
            lin(f"layers.{l}.mab.key", 2 * d, d)
            lin(f"layers.{l}.mab.value", 2 * d, d)
            lin(f"layers.{l}.mab.out", d, d)
            lin(f"layers.{l}.mab.ff", d, d)
            lin(f"layers.{l}.edge_ff", 3 * d, d)
        if self.ablation_no_target_edges:
            lin("readout", 2 * d, 1)
        else:
            lin("readout", 3 * d, 1)
        return shapes


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    out: dict[str, np.ndarray] = {}
    for name, shape in cfg.param_shapes().items():
        if name.endswith(".weight"):
            base = name[: -len(".weight")]
            out.update({f"{base}.{k}": v for k, v in init_affine(rng, *shape).items()})
    return out


@dataclass(frozen=True)
class _Layer:
    mab: MabParams
    edge_ff: AffineParams


@dataclass(frozen=True)
class Network:
    """Structured view of a parameter dict as layer parameter tuples."""

    channel_embed: AffineParams
    time_embed: AffineParams
    edge_embed: AffineParams
    layers: tuple[_Layer, ...]
    readout: AffineParams

    @classmethod
    def from_tensors(cls, cfg: ModelConfig, t: dict[str, Tensor]) -> "Network":
        def lin(name):
            return AffineParams(t[f"{name}.weight"], t[f"{name}.bias"])

        layers = []
        for l in range(cfg.layers):
            pre = f"layers.{l}.mab"
            mha = MhaParams(lin(f"{pre}.query"), lin(f"{pre}.key"), lin(f"{pre}.value"), lin(f"{pre}.out"), cfg.heads)
            layers.append(_Layer(MabParams(mha, lin(f"{pre}.ff")), lin(f"layers.{l}.edge_ff")))
        return cls(lin("channel_embed"), lin("time_embed"), lin("edge_embed"), tuple(layers), lin("readout"))


def as_network(cfg: ModelConfig, params) -> Network:
    if isinstance(params, Network):
        return params
    tensors = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
    return Network.from_tensors(cfg, tensors)


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GraphBatch:
    """Disjoint union of B graphs sharing a channel count C.

    Node rows: the ``B*C`` channel nodes first (graph-major), then every
    time and query node of every graph.
    """

    size: int
    n_channels: int
    node_time: np.ndarray  # [n_time_nodes], times of non-channel nodes
    edge_features: np.ndarray  # [E, 2]
    edge_channel: np.ndarray  # [E] union node ids
    edge_time: np.ndarray  # [E] union node ids
    inc_owner: np.ndarray  # [2E]
    inc_neighbor: np.ndarray  # [2E]
    inc_edge: np.ndarray  # [2E]
    query_edge: np.ndarray  # [B, K_max] union edge ids (0 where padded)
    query_channel: np.ndarray  # [B, K_max] union channel node ids
    query_time: np.ndarray  # [B, K_max]
    query_mask: np.ndarray  # [B, K_max] bool

    @property
    def n_nodes(self) -> int:
        return self.size * self.n_channels + self.node_time.size

    @property
    def n_edges(self) -> int:
        return self.edge_channel.size

    @property
    def lengths(self) -> np.ndarray:
        return self.query_mask.sum(axis=1)

    def with_incidence_order(self, perm: np.ndarray) -> "GraphBatch":
        """Same batch with the neighbor lists stored in a different order."""
        return replace(
            self,
            inc_owner=self.inc_owner[perm],
            inc_neighbor=self.inc_neighbor[perm],
            inc_edge=self.inc_edge[perm],
        )


def collate(graphs: Sequence[SparsityGraph], queries: Sequence[ForecastQuery]) -> GraphBatch:
    if not graphs:
        raise ValueError("cannot collate an empty batch")
    C = graphs[0].n_channels
    if any(g.n_channels != C for g in graphs):
        raise ValueError("all graphs in a batch must share the channel count")
    B = len(graphs)
    k_max = max(len(q) for q in queries)
    node_time, feats, ech, etm = [], [], [], []
    owner, neigh, inc_e = [], [], []
    q_edge = np.zeros((B, k_max), dtype=np.int64)
    q_chan = np.zeros((B, k_max), dtype=np.int64)
    q_time = np.zeros((B, k_max))
    q_mask = np.zeros((B, k_max), dtype=bool)
    time_base = B * C
    edge_base = 0
    for b, (g, q) in enumerate(zip(graphs, queries)):
        # local node u -> union id
        local = np.empty(g.n_nodes, dtype=np.int64)
        local[:C] = b * C + np.arange(C)
        local[C:] = time_base + np.arange(g.n_nodes - C)
        time_base += g.n_nodes - C
        node_time.append(g.node_time)
        feats.append(g.edge_features)
        ech.append(local[g.edge_channel])
        etm.append(local[g.edge_time])
        o, n, e = g.incidence()
        owner.append(local[o])
        neigh.append(local[n])
        inc_e.append(e + edge_base)
        K = len(q)
        if g.query_edges.size:
            q_edge[b, :K] = g.query_edges + edge_base
        q_chan[b, :K] = b * C + q.channels
        q_time[b, :K] = q.times
        q_mask[b, :K] = True
        edge_base += g.n_edges
    cat = np.concatenate
    return GraphBatch(
        size=B,
        n_channels=C,
        node_time=cat(node_time),
        edge_features=cat(feats),
        edge_channel=cat(ech),
        edge_time=cat(etm),
        inc_owner=cat(owner),
        inc_neighbor=cat(neigh),
        inc_edge=cat(inc_e),
        query_edge=q_edge,
        query_channel=q_chan,
        query_time=q_time,
        query_mask=q_mask,
    )


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


class _Index:
    """Segment maps derived from a batch, built once per forward pass."""

    def __init__(self, batch: GraphBatch):
        n, E = batch.n_nodes, batch.n_edges
        self.owner = Segments(batch.inc_owner, n)
        self.neighbor = Segments(batch.inc_neighbor, n)
        self.edge = Segments(batch.inc_edge, E)
        self.edge_channel = Segments(batch.edge_channel, n)
        self.edge_time = Segments(batch.edge_time, n)
        degree = self.owner.sizes()
        self.isolated = degree == 0
        self.keep = (~self.isolated).astype(np.float64)[:, None]


def initial_embed(batch: GraphBatch, net: Network) -> tuple[Tensor, Tensor]:
    """Channel nodes: FF(onehot(c)); time/query nodes: sin(FF(t)); edges: FF(value, indicator)."""
    onehot = np.tile(np.eye(batch.n_channels), (batch.size, 1))
    h_chan = affine(net.channel_embed, Tensor(onehot))
    h_time = T.sin(affine(net.time_embed, Tensor(batch.node_time[:, None])))
    h_node = T.concat([h_chan, h_time], axis=0)
    h_edge = affine(net.edge_embed, Tensor(batch.edge_features))
    return h_node, h_edge


def gnn_layer(layer: _Layer, idx: _Index, h_node: Tensor, h_edge: Tensor) -> tuple[Tensor, Tensor]:
    """One synchronous node-then-edge update; both read only layer-l state."""
    keys = T.concat([T.gather(h_node, idx.neighbor), T.gather(h_edge, idx.edge)], axis=1)
    attended = mab(layer.mab, h_node, keys, keys, idx.owner)
    if idx.isolated.any():
        # nodes without neighbors carry their embedding through unchanged
        attended = T.add(T.mul(attended, idx.keep), T.mul(h_node, 1.0 - idx.keep))
    pair = T.concat(
        [T.gather(h_node, idx.edge_channel), T.gather(h_node, idx.edge_time), h_edge], axis=1
    )
    new_edge = activation(T.add(h_edge, affine(layer.edge_ff, pair)))
    return attended, new_edge


def _encode(batch: GraphBatch, net: Network) -> tuple[Tensor, Tensor, _Index]:
    idx = _Index(batch)
    h_node, h_edge = initial_embed(batch, net)
    for layer in net.layers:
        h_node, h_edge = gnn_layer(layer, idx, h_node, h_edge)
    return h_node, h_edge, idx


def final_edges(batch: GraphBatch, net: Network) -> tuple[Tensor, Tensor]:
    """Node embeddings after the last graph layer and scalar edge embeddings."""
    h_node, h_edge, idx = _encode(batch, net)
    pair = T.concat(
        [T.gather(h_node, idx.edge_channel), T.gather(h_node, idx.edge_time), h_edge], axis=1
    )
    return h_node, affine(net.readout, pair)


def forward_batch(batch: GraphBatch, cfg: ModelConfig, params) -> Tensor:
    """Padded predictions ``[B, K_max]``; entries outside ``batch.query_mask`` are meaningless."""
    net = as_network(cfg, params)
    flat_index = batch.query_edge.reshape(-1)
    if cfg.ablation_no_target_edges:
        h_node, _, _ = _encode(batch, net)
        h_chan = T.gather(h_node, batch.query_channel.reshape(-1))
        h_time = T.sin(affine(net.time_embed, Tensor(batch.query_time.reshape(-1, 1))))
        scalar = affine(net.readout, T.concat([h_chan, h_time], axis=1))
    else:
        _, edge_out = final_edges(batch, net)
        scalar = T.gather(edge_out, Segments(flat_index, batch.n_edges))
    return T.reshape(scalar, batch.query_mask.shape)


def build_graph(series: TimeSeries, query: ForecastQuery, cfg: ModelConfig) -> SparsityGraph:
    if series.channel_count != cfg.channel_count:
        raise CheckpointMismatch(
            f"series has {series.channel_count} channels, model expects {cfg.channel_count}"
        )
    return ts2graph(series, None if cfg.ablation_no_target_edges else query)


def forward(series: TimeSeries, query: ForecastQuery, params, cfg: ModelConfig) -> np.ndarray:
    """Answer one forecasting query."""
    if cfg.ablation_no_target_edges:
        return forward_no_target(series, query, params, cfg)
    g = build_graph(series, query, cfg)
    net = as_network(cfg, params)
    batch = collate([g], [query])
    h_node, edge_out = final_edges(batch, net)
    return graph2ts(h_node, edge_out, g)


def forward_no_target(series: TimeSeries, query: ForecastQuery, params, cfg: ModelConfig) -> np.ndarray:
    """Variant whose graph has no query nodes; reads answers from channel and time encodings."""
    if not cfg.ablation_no_target_edges:
        raise ValueError("config does not describe the no-target-edge variant")
    g = build_graph(series, query, cfg)
    batch = collate([g], [query])
    return forward_batch(batch, cfg, params).data[0, : len(query)].copy()


def predict(instances, params, cfg: ModelConfig, batch_size: int = 64) -> list[np.ndarray]:
    """Answers for ``(series, query)`` pairs, computed in batches."""
    out: list[np.ndarray] = []
    for start in range(0, len(instances), batch_size):
        chunk = instances[start : start + batch_size]
        graphs = [build_graph(s, q, cfg) for s, q in chunk]
        batch = collate(graphs, [q for _, q in chunk])
        pred = forward_batch(batch, cfg, params).data
        out.extend(pred[b, : len(q)].copy() for b, (_, q) in enumerate(chunk))
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, cfg: ModelConfig, params: dict[str, np.ndarray], seed: int, extra: dict | None = None) -> None:
    """Write config, seed and every parameter tensor as JSON (floats round-trip exactly)."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(cfg),
        "seed": seed,
        "params": [
            {"name": k, "shape": list(v.shape), "values": np.asarray(v).reshape(-1).tolist()}
            for k, v in params.items()
        ],
    }
    if extra:
        payload["extra"] = extra
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatch(f"{path} is not a model checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointMismatch(f"unsupported checkpoint version {payload.get('version')}")
    cfg = ModelConfig(**payload["config"])
    params = {
        p["name"]: np.asarray(p["values"], dtype=np.float64).reshape(p["shape"]) for p in payload["params"]
    }
    check_params(cfg, params)
    meta = {"seed": payload.get("seed"), **payload.get("extra", {})}
    return cfg, params, meta


def check_params(cfg: ModelConfig, params: dict[str, np.ndarray]) -> None:
    """Raise :class:`CheckpointMismatch` listing every name/shape disagreement."""
    expected = cfg.param_shapes()
    problems = []
    for name in sorted(set(expected) | set(params)):
        want = expected.get(name)
        got = tuple(params[name].shape) if name in params else None
        if want != got:
            problems.append(f"  {name}: expected {want}, found {got}")
    if problems:
        raise CheckpointMismatch("parameter shapes do not match the model config:\n" + "\n".join(problems))
    bad = [k for k, v in params.items() if not np.isfinite(v).all()]
    if bad:
        raise CheckpointMismatch(f"non-finite values in {bad}")


def parameter_count(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in cfg.param_shapes().values())
