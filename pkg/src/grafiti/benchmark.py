"""Wall-clock scaling of the network with the number of graph edges."""

from __future__ import annotations

import time
from typing import Callable, Sequence

import numpy as np

from . import model as M
from .data import SyntheticSpec, generate
from .numerics import tensor as T

SCALING_COLUMNS = ["events", "edges", "nodes", "forward_s", "forward_backward_s", "layer_s"]


def scaling_batch(events: int, cfg: M.ModelConfig, batch_size: int, sparsity: float, seed: int) -> M.GraphBatch:
    spec = SyntheticSpec(
        instances=batch_size,
        channels=cfg.channel_count,
        sparsity=sparsity,
        min_events=events,
        max_events=events,
        observe_until=float(events),
        seed=seed,
    )
    ds = generate(spec)
    graphs = [M.build_graph(i.series, i.query, cfg) for i in ds]
    return M.collate(graphs, [i.query for i in ds])


def median_seconds(fn: Callable[[], object], repeats: int) -> float:
    fn()  # warm caches and lazily built index structures
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def _forward_backward(batch: M.GraphBatch, cfg: M.ModelConfig, params: dict[str, np.ndarray]) -> None:
    with T.Tape() as tape:
        leaves = T.parameters(params)
        loss = T.sum(M.forward_batch(batch, cfg, leaves))
        tape.gradient(loss, list(leaves.values()))


def _layer_seconds(batch: M.GraphBatch, net: M.Network, repeats: int) -> float:
    """Median time of one graph layer (forward), averaged over the stack."""
    idx = M._Index(batch)
    h_node, h_edge = M.initial_embed(batch, net)
    per_layer = []
    for layer in net.layers:
        per_layer.append(median_seconds(lambda: M.gnn_layer(layer, idx, h_node, h_edge), repeats))
        h_node, h_edge = M.gnn_layer(layer, idx, h_node, h_edge)
    return float(np.mean(per_layer))


def run_benchmark(
    event_counts: Sequence[int],
    cfg: M.ModelConfig,
    *,
    batch_size: int = 64,
    sparsity: float = 0.8,
    repeats: int = 5,
    seed: int = 0,
    progress: Callable[[str], None] | None = None,
) -> list[dict]:
    params = M.init_params(cfg, seed)
    net = M.as_network(cfg, params)
    rows = []
    for events in event_counts:
        batch = scaling_batch(events, cfg, batch_size, sparsity, seed)
        row = {
            "events": int(events),
            "edges": int(batch.n_edges),
            "nodes": int(batch.n_nodes),
            "forward_s": median_seconds(lambda: M.forward_batch(batch, cfg, net), repeats),
            "forward_backward_s": median_seconds(lambda: _forward_backward(batch, cfg, params), repeats),
            "layer_s": _layer_seconds(batch, net, repeats),
        }
        rows.append(row)
        if progress:
            progress(
                f"events {events:6d}  edges {row['edges']:8d}  forward {row['forward_s']:.4f}s  "
                f"fwd+bwd {row['forward_backward_s']:.4f}s  layer {row['layer_s']:.4f}s"
            )
    return rows


def doubling_ratio(edges: Sequence[float], seconds: Sequence[float]) -> float:
    """Time factor per doubling of ``edges`` from a least-squares log-log fit."""
    slope = np.polyfit(np.log2(np.asarray(edges, float)), np.log2(np.asarray(seconds, float)), 1)[0]
    return float(2.0**slope)
