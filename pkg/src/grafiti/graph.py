"""Sparsity structure graphs: encoding (series, query) pairs and decoding answers.

Node numbering is 0-based: channel nodes ``0..C-1``, observed time nodes
``C..C+N-1`` in time order, then one node per unique query timepoint in
order of first appearance.  Every edge joins a time (or query) node to a
channel node and carries the feature pair ``(value, target_indicator)``:
``(x, 1)`` for an observation, ``(0, 0)`` for an edge whose value is asked for.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GraphError(ValueError):
    pass


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """Observation events of a multichannel series.

    ``values[n, c]`` is meaningful only where ``observed[n, c]``; missing
    slots hold 0.0 and are never read as data.
    """

    times: np.ndarray
    values: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "times", _frozen(self.times, np.float64))
        obs = _frozen(self.observed, bool)
        vals = np.where(obs, np.asarray(self.values, dtype=np.float64), 0.0)
        object.__setattr__(self, "observed", obs)
        object.__setattr__(self, "values", _frozen(vals, np.float64))
        if self.values.ndim != 2 or self.values.shape != self.observed.shape:
            raise GraphError(f"values {self.values.shape} and mask {self.observed.shape} disagree")
        if self.times.shape != (self.values.shape[0],):
            raise GraphError(f"{self.times.size} timepoints for {self.values.shape[0]} events")
        if np.any(np.diff(self.times) <= 0):
            raise GraphError("timepoints must be strictly increasing")
        if not np.isfinite(self.values).all() or not np.isfinite(self.times).all():
            raise GraphError("observed values and timepoints must be finite")
        empty = ~self.observed.any(axis=1)
        if empty.any():
            raise GraphError(f"event at t={self.times[empty][0]} has no observed channel")

    @classmethod
    def from_array(cls, times, values) -> "TimeSeries":
        """Build from a dense array using NaN for missing entries."""
        values = np.asarray(values, dtype=np.float64)
        observed = ~np.isnan(values)
        return cls(times, np.nan_to_num(values, nan=0.0), observed)

    def to_array(self) -> np.ndarray:
        return np.where(self.observed, self.values, np.nan)

    @property
    def channel_count(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.times.size

    @property
    def nnz(self) -> int:
        return int(self.observed.sum())

    def __eq__(self, other) -> bool:
        if not isinstance(other, TimeSeries):
            return NotImplemented
        return (
            np.array_equal(self.times, other.times)
            and np.array_equal(self.observed, other.observed)
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True, eq=False)
class ForecastQuery:
    """Items ``(times[k], channels[k])`` whose values are requested."""

    times: np.ndarray
    channels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "times", _frozen(self.times, np.float64))
        object.__setattr__(self, "channels", _frozen(self.channels, np.int64))
        if self.times.shape != self.channels.shape or self.times.ndim != 1:
            raise GraphError("query times and channels must be 1-d and equally long")

    def __len__(self) -> int:
        return self.times.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, ForecastQuery):
            return NotImplemented
        return np.array_equal(self.times, other.times) and np.array_equal(self.channels, other.channels)

    def is_forecast_for(self, series: TimeSeries) -> bool:
        return len(series) == 0 or bool(self.times.min() > series.times.max())


@dataclass(frozen=True, eq=False)
class SparsityGraph:
    n_channels: int
    n_times: int
    n_query_nodes: int
    node_time: np.ndarray  # [n_times + n_query_nodes]
    edge_channel: np.ndarray  # [E] channel node ids
    edge_time: np.ndarray  # [E] time/query node ids
    edge_value: np.ndarray  # [E]
    edge_target: np.ndarray  # [E], 1 observed, 0 query
    query_edges: np.ndarray  # [K] edge id answering each query item
    _incidence: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.n_channels + self.n_times + self.n_query_nodes

    @property
    def n_edges(self) -> int:
        return self.edge_channel.size

    @property
    def edge_features(self) -> np.ndarray:
        return np.stack([self.edge_value, self.edge_target], axis=1)

    def node_feature(self, u: int) -> float:
        """Channel id for channel nodes, timepoint otherwise."""
        if not 0 <= u < self.n_nodes:
            raise IndexError(f"node {u} not in graph with {self.n_nodes} nodes")
        return float(u) if u < self.n_channels else float(self.node_time[u - self.n_channels])

    def node_kind(self, u: int) -> str:
        if u < self.n_channels:
            return "channel"
        return "time" if u < self.n_channels + self.n_times else "query"

    def incidence(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(owner, neighbor, edge)`` triples, two per edge, sorted by (owner, neighbor)."""
        if not self._incidence:
            owner = np.concatenate([self.edge_channel, self.edge_time])
            other = np.concatenate([self.edge_time, self.edge_channel])
            edge = np.tile(np.arange(self.n_edges), 2)
            order = np.lexsort((other, owner))
            self._incidence.update(owner=owner[order], neighbor=other[order], edge=edge[order])
        inc = self._incidence
        return inc["owner"], inc["neighbor"], inc["edge"]


def ts2graph(series: TimeSeries, query: ForecastQuery | None) -> SparsityGraph:
    """Encode a series and query as a sparsity structure graph.

    With ``query=None`` the graph holds only channel and time nodes (used by
    the variant of the model without target edges).
    """
    if len(series) == 0:
        raise GraphError("cannot encode an empty time series")
    C, N = series.channel_count, len(series)
    if query is not None:
        if len(query) == 0:
            raise GraphError("cannot encode an empty query")
        bad = (query.channels < 0) | (query.channels >= C)
        if bad.any():
            raise GraphError(f"query channel {int(query.channels[bad][0])} outside 0..{C - 1}")

    n_idx, c_idx = np.nonzero(series.observed)
    edge_time = [C + n_idx]
    edge_channel = [c_idx]
    edge_value = [series.values[n_idx, c_idx]]
    node_time = [series.times]
    n_obs = n_idx.size
    n_qnodes = 0
    query_edges = np.zeros(0, dtype=np.int64)

    if query is not None:
        uniq_times: dict[float, int] = {}
        pairs: dict[tuple[int, int], int] = {}
        q_nodes, q_chans = [], []
        query_edges = np.empty(len(query), dtype=np.int64)
        for k, (t, c) in enumerate(zip(query.times.tolist(), query.channels.tolist())):
            node = uniq_times.setdefault(t, C + N + len(uniq_times))
            if (node, c) not in pairs:
                pairs[(node, c)] = n_obs + len(q_nodes)
                q_nodes.append(node)
                q_chans.append(c)
            query_edges[k] = pairs[(node, c)]
        n_qnodes = len(uniq_times)
        node_time.append(np.array(list(uniq_times), dtype=np.float64))
        edge_time.append(np.array(q_nodes, dtype=np.int64))
        edge_channel.append(np.array(q_chans, dtype=np.int64))
        edge_value.append(np.zeros(len(q_nodes)))

    value = np.concatenate(edge_value)
    target = np.concatenate([np.ones(n_obs), np.zeros(value.size - n_obs)])
    return SparsityGraph(
        n_channels=C,
        n_times=N,
        n_query_nodes=n_qnodes,
        node_time=_frozen(np.concatenate(node_time), np.float64),
        edge_channel=_frozen(np.concatenate(edge_channel), np.int64),
        edge_time=_frozen(np.concatenate(edge_time), np.int64),
        edge_value=_frozen(value, np.float64),
        edge_target=_frozen(target, np.float64),
        query_edges=_frozen(query_edges, np.int64),
    )


def neighborhood(g: SparsityGraph, u: int) -> list[tuple[int, int]]:
    """``(neighbor, edge)`` pairs incident to ``u`` in ascending neighbor order."""
    if not 0 <= u < g.n_nodes:
        raise IndexError(f"node {u} not in graph with {g.n_nodes} nodes")
    owner, neighbor, edge = g.incidence()
    lo, hi = np.searchsorted(owner, [u, u + 1])
    return list(zip(neighbor[lo:hi].tolist(), edge[lo:hi].tolist()))


def graph2ts(node_embeddings, edge_embeddings, g: SparsityGraph) -> np.ndarray:
    """Read the answer off the scalar embeddings of the query edges."""
    e = np.asarray(getattr(edge_embeddings, "data", edge_embeddings))
    if e.ndim != 2 or e.shape[1] != 1:
        raise GraphError(f"final edge embeddings must have width 1, got shape {e.shape}")
    if e.shape[0] != g.n_edges:
        raise GraphError(f"{e.shape[0]} edge embeddings for {g.n_edges} edges")
    return e[g.query_edges, 0].copy()


def squared_error(y, y_hat) -> float:
    y, y_hat = np.asarray(y, dtype=np.float64), np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"answer lengths differ: {y.shape} vs {y_hat.shape}")
    return float(np.mean((y - y_hat) ** 2))
