from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hinembed.graph import EntityRef, RelationType, Schema, graph_from_triples
from hinembed.mixture import (
    ClusterModel, NoEngagementError, build_mixtures, embed_oov_target, engagement_distribution, fit_target_clusters,
    kmeans, nearest, read_mixtures, sq_distances, write_mixtures,
)
from hinembed.store import EmbeddingStore

SCHEMA = Schema(("user", "item"), (RelationType("engages", "user", "item"),))


def engagement_graph(counts: dict[int, int], n_items: int | None = None):
    """One user engaging item ``i`` ``counts[i]`` times; items exist 0..n_items-1."""
    n_items = n_items or (max(counts) + 1)
    triples = [("u0", "engages", f"i{i}") for i in range(n_items)]  # register ids in order
    g0 = graph_from_triples(SCHEMA, triples)
    src = np.zeros(sum(counts.values()), dtype=np.int64)
    dst = np.concatenate([np.full(c, i) for i, c in counts.items()]).astype(np.int64)
    return g0.with_edges(np.zeros(len(src), dtype=np.int64), src, dst)


def identity_model(k):
    """Item i sits in cluster i."""
    return ClusterModel(np.eye(k), np.arange(k), 0.0, target_type="item")


def test_sq_distances_exact():
    X = np.array([[0.0, 0.0], [3.0, 4.0]])
    C = np.array([[0.0, 0.0], [3.0, 0.0]])
    assert sq_distances(X, C).tolist() == [[0.0, 9.0], [25.0, 16.0]]


def test_kmeans_k1_is_mean():
    X = np.random.default_rng(0).standard_normal((50, 3))
    m = kmeans(X, 1, seed=0)
    assert np.allclose(m.centroids[0], X.mean(0))


def test_kmeans_two_blobs():
    rng = np.random.default_rng(1)
    labels = rng.integers(2, size=400)
    X = rng.standard_normal((400, 4)) * 0.5 + np.where(labels[:, None] == 1, 10.0, -10.0)
    a = kmeans(X, 2, seed=3).assignment
    agree = max((a == labels).mean(), (a != labels).mean())
    assert agree >= 0.99


def test_kmeans_k_equals_n():
    X = np.random.default_rng(2).standard_normal((12, 2))
    m = kmeans(X, 12, seed=0)
    assert m.inertia == 0.0
    assert sorted(m.assignment.tolist()) == list(range(12))


def test_kmeans_errors():
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 2)), 4)
    with pytest.raises(ValueError):
        kmeans(np.zeros((0, 2)), 1)
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 2)), 0)


@given(seed=st.integers(0, 10_000), k=st.integers(1, 6), batch=st.sampled_from([None, 16]))
def test_kmeans_invariants(seed, k, batch):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((40, 3)) + rng.integers(3, size=(40, 1)) * 4.0
    m = kmeans(X, k, seed=seed, batch_size=batch)
    h = np.array(m.inertia_history)
    assert (np.diff(h) <= 1e-9 * max(1.0, h[0])).all()
    assert np.array_equal(m.assignment, nearest(X, m.centroids)[0])
    assert m.inertia == pytest.approx(((X - m.centroids[m.assignment]) ** 2).sum())
    assert np.isfinite(m.centroids).all()


def test_kmeans_deterministic():
    X = np.random.default_rng(4).standard_normal((200, 5))
    a, b = kmeans(X, 7, seed=9, batch_size=64), kmeans(X, 7, seed=9, batch_size=64)
    assert np.array_equal(a.centroids, b.centroids)


def test_nearest_tie_to_lower_index():
    idx, _ = nearest(np.array([[0.0]]), np.array([[1.0], [-1.0]]))
    assert idx.tolist() == [0]


@pytest.mark.parametrize("counts, m, expected", [
    ({1: 3, 2: 1}, 2, [(1, Fraction(3, 4)), (2, Fraction(1, 4))]),
    ({1: 3, 2: 1}, 1, [(1, Fraction(1))]),
    ({1: 2, 2: 2, 3: 1}, 2, [(1, Fraction(1, 2)), (2, Fraction(1, 2))]),
])
def test_engagement_distribution_examples(counts, m, expected):
    g = engagement_graph(counts)
    mix = engagement_distribution(EntityRef("user", 0), g, identity_model(4), m)
    assert [(c.cluster, Fraction(c.count, sum(x.count for x in mix.components))) for c in mix.components] == expected
    assert mix.weights == [float(w) for _, w in expected]


def test_no_engagement_is_error():
    g = engagement_graph({0: 1}).with_edges([], [], [])
    with pytest.raises(NoEngagementError):
        engagement_distribution(EntityRef("user", 0), g, identity_model(1), 3)


@given(counts=st.dictionaries(st.integers(0, 7), st.integers(1, 9), min_size=1), m=st.integers(1, 10))
def test_mixture_invariants(counts, m):
    g = engagement_graph(counts, 8)
    mix = engagement_distribution(EntityRef("user", 0), g, identity_model(8), m)
    assert len(mix) <= m
    assert abs(sum(mix.weights) - 1.0) < 1e-6
    assert all(w > 0 for w in mix.weights)
    assert mix.weights == sorted(mix.weights, reverse=True)
    assert len(set(mix.clusters)) == len(mix)
    if m >= len(counts):
        total = sum(counts.values())
        exact = {c: Fraction(n, total) for c, n in counts.items()}
        assert {c.cluster: Fraction(c.count, total) for c in mix.components} == exact
        assert all(c.weight == float(exact[c.cluster]) for c in mix.components)


def test_build_mixtures_fallback_and_round_trip(tmp_path):
    triples = [("u0", "engages", "i0"), ("u0", "engages", "i1"), ("u1", "engages", "i1")]
    g = graph_from_triples(SCHEMA, triples)
    g = g.reindexed({"user": ["u0", "u1", "u2"], "item": ["i0", "i1"]})
    store = EmbeddingStore(2, {"user": np.arange(6.0).reshape(3, 2), "item": np.eye(2)}, ["engages"], np.zeros((1, 2)))
    mixes = build_mixtures(g, identity_model(2), "user", 3, store=store)
    assert mixes[0].weights == [0.5, 0.5]
    assert mixes[2].clusters == [-1] and mixes[2].components[0].centroid.tolist() == [4.0, 5.0]
    write_mixtures(tmp_path / "m.tsv", g, "user", mixes)
    back = read_mixtures(tmp_path / "m.tsv")
    assert back[("user", "u1")] == [(1, 1.0)]
    assert back[("user", "u2")] == [(-1, 1.0)]


def test_fit_target_clusters_uses_engaged_targets_only():
    triples = [("u0", "engages", "i0"), ("u0", "engages", "i1")]
    g = graph_from_triples(SCHEMA, triples).reindexed({"user": ["u0"], "item": ["i0", "i1", "i2"]})
    items = np.array([[0.0, 0.0], [2.0, 0.0], [100.0, 100.0]])
    store = EmbeddingStore(2, {"user": np.zeros((1, 2)), "item": items}, ["engages"], np.zeros((1, 2)))
    m = fit_target_clusters(store, g, 1, "user", "item")
    assert m.centroids[0].tolist() == [1.0, 0.0]
    assert len(m.assignment) == 3 and m.target_type == "item"


def _oov_store(user_vecs):
    return EmbeddingStore(2, {"user": np.array(user_vecs, dtype=np.float64)}, [], np.zeros((0, 2)))


def test_oov_single_neighbor_on_centroid():
    C = np.array([[0.0, 0.0], [5.0, 5.0], [1.0, -3.0], [9.0, 1.0]])
    model = ClusterModel(C, np.arange(4), 0.0)
    c, vec = embed_oov_target([EntityRef("user", 0)], _oov_store([[9.0, 1.0]]), model)
    assert c == 3 and vec.tolist() == [9.0, 1.0]


@given(seed=st.integers(0, 10_000), n=st.integers(1, 6))
def test_oov_matches_brute_force(seed, n):
    rng = np.random.default_rng(seed)
    C = rng.standard_normal((5, 2)) * 3
    users = rng.standard_normal((n, 2)) * 3
    store = _oov_store(users)
    snapshot = store.entity_table("user").copy()
    model = ClusterModel(C, np.arange(5), 0.0)
    c, _ = embed_oov_target([EntityRef("user", i) for i in range(n)], store, model)
    mean = users.mean(0)
    d = [float(((mean - x) ** 2).sum()) for x in C]
    assert c == min(range(5), key=lambda j: (d[j], j))
    assert np.array_equal(store.entity_table("user"), snapshot)


def test_oov_without_neighbors():
    with pytest.raises(NoEngagementError):
        embed_oov_target([], _oov_store([[0.0, 0.0]]), ClusterModel(np.zeros((1, 2)), np.zeros(1, dtype=int), 0.0))


def test_cluster_model_round_trip(tmp_path):
    m = kmeans(np.random.default_rng(5).standard_normal((30, 4)), 3, seed=0)
    m.target_type = "item"
    m.save(tmp_path / "c.ckpt")
    back = ClusterModel.load(tmp_path / "c.ckpt")
    assert np.allclose(back.centroids, m.centroids, atol=1e-6)
    assert np.array_equal(back.assignment, m.assignment) and back.target_type == "item"
