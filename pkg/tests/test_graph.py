import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grafiti.graph import (
    ForecastQuery,
    GraphError,
    TimeSeries,
    graph2ts,
    neighborhood,
    squared_error,
    ts2graph,
)

NAN = np.nan


def random_instance(rng, max_channels=6, max_events=12, max_queries=8):
    """Random series (every event observed somewhere) and query, possibly with
    repeated query times and coincident observed/query times."""
    C = int(rng.integers(1, max_channels + 1))
    N = int(rng.integers(1, max_events + 1))
    times = np.cumsum(rng.uniform(0.1, 1.0, size=N))
    obs = rng.random((N, C)) < rng.uniform(0.1, 0.9)
    obs[np.arange(N), rng.integers(0, C, size=N)] = True
    values = np.where(obs, rng.normal(size=(N, C)), 0.0)
    K = int(rng.integers(1, max_queries + 1))
    pool = np.concatenate([times, times[-1] + np.arange(1, 4)])
    q_times = rng.choice(pool, size=K)
    q_chans = rng.integers(0, C, size=K)
    return TimeSeries(times, values, obs), ForecastQuery(q_times, q_chans)


@pytest.fixture
def example():
    s = TimeSeries.from_array([0.0, 0.5], [[1.0, NAN], [2.0, 3.0]])
    q = ForecastQuery([1.0], [0])
    return s, q, ts2graph(s, q)


class TestTimeSeries:
    def test_rejects_unsorted_times(self):
        with pytest.raises(GraphError, match="increasing"):
            TimeSeries.from_array([1.0, 1.0], [[1.0], [2.0]])

    def test_rejects_empty_event(self):
        with pytest.raises(GraphError, match="no observed channel"):
            TimeSeries.from_array([0.0, 1.0], [[1.0, 2.0], [NAN, NAN]])

    def test_missing_slots_never_hold_data(self):
        s = TimeSeries([0.0], [[5.0, 7.0]], [[True, False]])
        assert s.values[0, 1] == 0.0
        assert np.isnan(s.to_array()[0, 1])

    def test_nan_round_trip(self):
        a = np.array([[1.0, NAN], [NAN, 2.0]])
        np.testing.assert_array_equal(TimeSeries.from_array([0.0, 1.0], a).to_array(), a)


class TestTs2Graph:
    def test_worked_example(self, example):
        _, _, g = example
        assert (g.n_channels, g.n_times, g.n_query_nodes) == (2, 2, 1)
        assert g.n_edges == 4
        edges = {
            (int(t), int(c)): tuple(f)
            for t, c, f in zip(g.edge_time, g.edge_channel, g.edge_features)
        }
        # 0-based: time nodes 2,3 and query node 4
        assert edges == {(2, 0): (1.0, 1.0), (3, 0): (2.0, 1.0), (3, 1): (3.0, 1.0), (4, 0): (0.0, 0.0)}

    def test_node_features(self, example):
        _, _, g = example
        assert [g.node_feature(u) for u in range(g.n_nodes)] == [0.0, 1.0, 0.0, 0.5, 1.0]
        assert [g.node_kind(u) for u in range(g.n_nodes)] == ["channel", "channel", "time", "time", "query"]

    @pytest.mark.parametrize("C,N", [(1, 1), (3, 4), (5, 7)])
    def test_fully_observed_is_complete_bipartite(self, C, N):
        s = TimeSeries(np.arange(N, dtype=float), np.ones((N, C)), np.ones((N, C), dtype=bool))
        g = ts2graph(s, ForecastQuery([N + 1.0], [0]))
        assert int(g.edge_target.sum()) == C * N
        observed_pairs = {(int(t), int(c)) for t, c, f in zip(g.edge_time, g.edge_channel, g.edge_target) if f}
        assert observed_pairs == {(C + n, c) for n in range(N) for c in range(C)}

    def test_duplicate_query_times_share_a_node(self):
        s = TimeSeries.from_array([0.0], [[1.0, 2.0]])
        g = ts2graph(s, ForecastQuery([1.0, 1.0], [0, 1]))
        assert g.n_query_nodes == 1
        assert g.query_edges.tolist() == [2, 3]
        assert g.edge_time[2] == g.edge_time[3] == 3

    def test_query_at_observed_time_gets_fresh_node(self):
        s = TimeSeries.from_array([0.0, 1.0], [[1.0], [2.0]])
        g = ts2graph(s, ForecastQuery([1.0], [0]))
        assert g.n_query_nodes == 1
        assert g.edge_time[g.query_edges[0]] == 3
        assert g.node_time.tolist() == [0.0, 1.0, 1.0]

    def test_repeated_query_item_reuses_edge(self):
        s = TimeSeries.from_array([0.0], [[1.0]])
        g = ts2graph(s, ForecastQuery([2.0, 2.0], [0, 0]))
        assert g.query_edges.tolist() == [1, 1]

    def test_query_nodes_in_first_appearance_order(self):
        s = TimeSeries.from_array([0.0], [[1.0]])
        g = ts2graph(s, ForecastQuery([3.0, 2.0, 3.0], [0, 0, 0]))
        assert g.node_time[1:].tolist() == [3.0, 2.0]

    def test_errors(self):
        s = TimeSeries.from_array([0.0], [[1.0, 2.0]])
        with pytest.raises(GraphError, match="empty query"):
            ts2graph(s, ForecastQuery([], []))
        with pytest.raises(GraphError, match="outside"):
            ts2graph(s, ForecastQuery([1.0], [2]))
        with pytest.raises(GraphError, match="outside"):
            ts2graph(s, ForecastQuery([1.0], [-1]))
        empty = TimeSeries(np.zeros(0), np.zeros((0, 2)), np.zeros((0, 2), dtype=bool))
        with pytest.raises(GraphError, match="empty time series"):
            ts2graph(empty, ForecastQuery([1.0], [0]))

    def test_without_query(self, example):
        s, _, _ = example
        g = ts2graph(s, None)
        assert g.n_nodes == 4 and g.n_edges == 3 and g.query_edges.size == 0

    def test_graph_arrays_are_immutable(self, example):
        _, _, g = example
        with pytest.raises(ValueError):
            g.edge_value[0] = 1.0


def brute_force_edges(series, query):
    """Independent edge enumeration by walking the dense array and query list."""
    C, N = series.channel_count, len(series)
    obs = {}
    arr = series.to_array()
    for n in range(N):
        for c in range(C):
            if not np.isnan(arr[n, c]):
                obs[(C + n, c)] = (arr[n, c], 1.0)
    qnode = {}
    for t in query.times:
        if t not in qnode:
            qnode[t] = C + N + len(qnode)
    targets = {(qnode[t], int(c)): (0.0, 0.0) for t, c in zip(query.times, query.channels)}
    return obs, targets, qnode


class TestGraphOracle:
    """Encoding checked against an independent enumeration on many random instances."""

    def test_thousand_random_instances(self):
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            s, q = random_instance(rng)
            g = ts2graph(s, q)
            obs, targets, qnode = brute_force_edges(s, q)
            # |E| = nnz(S) + number of distinct (time, channel) query items
            assert g.n_edges == s.nnz + len(targets)
            assert g.n_edges == s.nnz + len({(t, c) for t, c in zip(q.times.tolist(), q.channels.tolist())})

            # numbering is a bijection onto 0..n_nodes-1 with the documented blocks
            used = set(g.edge_channel.tolist()) | set(g.edge_time.tolist())
            assert used <= set(range(g.n_nodes))
            assert g.n_nodes == s.channel_count + len(s) + len(qnode)
            assert set(g.edge_channel.tolist()) <= set(range(s.channel_count))

            got = {(int(t), int(c)): tuple(f) for t, c, f in zip(g.edge_time, g.edge_channel, g.edge_features)}
            assert got == {**obs, **targets}

            # graph2ts reads exactly the edge of each query item
            emb = rng.normal(size=(g.n_edges, 1))
            lookup = {(int(t), int(c)): e for e, (t, c) in enumerate(zip(g.edge_time, g.edge_channel))}
            expect = [emb[lookup[(qnode[t], int(c))], 0] for t, c in zip(q.times, q.channels)]
            np.testing.assert_array_equal(graph2ts(None, emb, g), expect)

    def test_query_edges_read_zero_features(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            s, q = random_instance(rng)
            g = ts2graph(s, q)
            np.testing.assert_array_equal(graph2ts(None, g.edge_features[:, :1], g), np.zeros(len(q)))
            assert np.all(g.edge_target[g.query_edges] == 0)

    @pytest.mark.parametrize("seed", range(20))
    def test_adding_a_missing_slot_changes_nothing(self, seed):
        rng = np.random.default_rng(seed)
        s, q = random_instance(rng)
        wider = TimeSeries(s.times, np.c_[s.values, np.zeros(len(s))], np.c_[s.observed, np.zeros(len(s), bool)])
        g, h = ts2graph(s, q), ts2graph(wider, q)
        assert h.n_times == g.n_times and h.n_edges == g.n_edges
        np.testing.assert_array_equal(h.edge_features, g.edge_features)
        np.testing.assert_array_equal(h.edge_channel, g.edge_channel)


class TestNeighborhood:
    def test_worked_example(self, example):
        _, _, g = example
        assert [v for v, _ in neighborhood(g, 0)] == [2, 3, 4]
        assert [v for v, _ in neighborhood(g, 1)] == [3]
        assert [v for v, _ in neighborhood(g, 3)] == [0, 1]

    def test_unobserved_unqueried_channel_is_empty(self):
        s = TimeSeries.from_array([0.0], [[1.0, NAN, NAN]])
        g = ts2graph(s, ForecastQuery([1.0], [1]))
        assert neighborhood(g, 2) == []

    def test_edges_match_endpoints(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            s, q = random_instance(rng)
            g = ts2graph(s, q)
            degree = 0
            for u in range(g.n_nodes):
                nb = neighborhood(g, u)
                degree += len(nb)
                assert [v for v, _ in nb] == sorted(v for v, _ in nb)
                for v, e in nb:
                    assert {u, v} == {int(g.edge_time[e]), int(g.edge_channel[e])}
            assert degree == 2 * g.n_edges

    def test_out_of_range(self, example):
        with pytest.raises(IndexError):
            neighborhood(example[2], 5)


class TestGraph2Ts:
    def test_single_query(self, example):
        _, _, g = example
        emb = np.zeros((4, 1))
        emb[3, 0] = 0.7
        np.testing.assert_array_equal(graph2ts(None, emb, g), [0.7])

    def test_observed_edges_do_not_matter(self, example):
        _, _, g = example
        emb = np.arange(4.0)[:, None]
        shuffled = emb.copy()
        shuffled[:3] = emb[[2, 0, 1]]
        np.testing.assert_array_equal(graph2ts(None, emb, g), graph2ts(None, shuffled, g))

    def test_duplicate_time_two_values(self):
        s = TimeSeries.from_array([0.0], [[1.0, 2.0]])
        g = ts2graph(s, ForecastQuery([1.0, 1.0], [0, 1]))
        emb = np.array([[9.0], [9.0], [0.25], [-0.5]])
        np.testing.assert_array_equal(graph2ts(None, emb, g), [0.25, -0.5])

    def test_width_must_be_one(self, example):
        with pytest.raises(GraphError, match="width 1"):
            graph2ts(None, np.zeros((4, 2)), example[2])


class TestSquaredError:
    @pytest.mark.parametrize(
        "y,y_hat,expected",
        [([1.0, 2.0], [1.0, 2.0], 0.0), ([0.0, 0.0], [1.0, 1.0], 1.0), ([1.0, 2.0, 3.0], [1.0, 1.0, 1.0], 5 / 3)],
    )
    def test_examples(self, y, y_hat, expected):
        assert squared_error(y, y_hat) == pytest.approx(expected, rel=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            squared_error([1.0], [1.0, 2.0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=10))
    def test_symmetric_and_nonnegative(self, y):
        y_hat = [v * 0.5 + 1 for v in y]
        assert squared_error(y, y_hat) == squared_error(y_hat, y) >= 0
