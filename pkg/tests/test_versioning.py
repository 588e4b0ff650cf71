import numpy as np
import pytest
from hypothesis import given, strategies as st

from hinembed.graph import RelationType, Schema, graph_from_triples
from hinembed.store import EmbeddingStore, init_store
from hinembed.trainer import TrainConfig
from hinembed.versioning import RetrainPolicy, drift_report, retrain, warm_start_init

from conftest import random_graph

SCHEMA = Schema(("user",), (RelationType("follows", "user", "user"), RelationType("likes", "user", "user")))


def _prev(ids, vecs, rels):
    store = EmbeddingStore(2, {"user": np.array(vecs, dtype=np.float64)}, ["follows", "likes"], np.array(rels, dtype=np.float64))
    return store, {"user": ids}


def test_unchanged_node_copied_bitwise():
    g = graph_from_triples(SCHEMA, [("a", "follows", "b")])
    prev, ids = _prev(["b", "a"], [[0.1, 0.2], [0.3, 0.4]], [[0.0, 0.0], [0.0, 0.0]])
    new = warm_start_init(g, prev, ids)
    assert new.entity_table("user").tolist() == [[0.3, 0.4], [0.1, 0.2]]


def test_new_node_single_neighbor():
    g = graph_from_triples(SCHEMA, [("a", "follows", "new")])
    prev, ids = _prev(["a"], [[1.0, 1.0]], [[0.5, -0.5], [0.0, 0.0]])
    new = warm_start_init(g, prev, ids)
    assert new.entity_table("user")[1].tolist() == [1.5, 0.5]


def test_directional_variant_subtracts_relation():
    g = graph_from_triples(SCHEMA, [("new", "follows", "a")])
    prev, ids = _prev(["a"], [[1.0, 1.0]], [[0.5, -0.5], [0.0, 0.0]])
    assert warm_start_init(g, prev, ids).entity_table("user")[0].tolist() == [1.5, 0.5]
    assert warm_start_init(g, prev, ids, directional=True).entity_table("user")[0].tolist() == [0.5, 1.5]


@given(seed=st.integers(0, 10_000))
def test_new_node_mean_of_neighbors(seed):
    rng = np.random.default_rng(seed)
    vecs, rels = rng.standard_normal((3, 2)), rng.standard_normal((2, 2))
    g = graph_from_triples(SCHEMA, [("a", "follows", "n"), ("b", "likes", "n"), ("n", "likes", "c"), ("n", "follows", "m")])
    prev, ids = _prev(["a", "b", "c"], vecs, rels)
    got = warm_start_init(g, prev, ids).entity_table("user")[g.local_id("user", "n")]
    terms = [vecs[0] + rels[0], vecs[1] + rels[1], vecs[2] + rels[1]]
    ref = [sum(float(t[j]) for t in terms) / 3 for j in range(2)]
    assert np.allclose(got, ref, rtol=0, atol=1e-12)


def test_new_node_without_known_neighbors_is_random():
    g = graph_from_triples(SCHEMA, [("x", "follows", "y")])
    prev, ids = _prev(["a"], [[1.0, 1.0]], [[0.5, -0.5], [0.0, 0.0]])
    tab = warm_start_init(g, prev, ids, scale=0.1).entity_table("user")
    assert np.abs(tab).max() <= 0.1


def test_dim_mismatch():
    g = graph_from_triples(SCHEMA, [("a", "follows", "b")])
    prev, ids = _prev(["a"], [[1.0, 1.0]], [[0.0, 0.0], [0.0, 0.0]])
    with pytest.raises(ValueError):
        warm_start_init(g, prev, ids, dim=3)


def test_policy_validation():
    with pytest.raises(ValueError):
        RetrainPolicy("anchor", alpha=0.0)


def test_drift_identical_and_constant_shift():
    g = random_graph(SCHEMA, 30, seed=1)
    a = init_store(g, 4, seed=0, dtype=np.float64)
    assert drift_report(a, a.copy(), g).max == 0.0
    b = a.copy()
    c = np.array([0.3, -0.4, 1.2, 0.0])
    b._entities["user"] += c
    rep = drift_report(a, b, g)
    assert np.allclose(rep.deviation, np.linalg.norm(c))
    assert sum(d.count for d in rep.deciles) == g.counts["user"]


@given(seed=st.integers(0, 10_000))
def test_drift_aggregates_match_reference(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(SCHEMA, 25, seed)
    a = init_store(g, 3, seed=seed, dtype=np.float64)
    b = a.copy()
    b._entities["user"] += rng.normal(0, 0.1, b.entity_table("user").shape)
    rep = drift_report(a, b, g)
    ref = [float(np.sqrt(sum((x - y) ** 2 for x, y in zip(ra, rb))))
           for ra, rb in zip(a.entity_table("user"), b.entity_table("user"))]
    assert rep.mean == pytest.approx(sum(ref) / len(ref)) and rep.max == pytest.approx(max(ref))
    assert (rep.deviation >= 0).all()


def test_warm_zero_epochs_is_identity():
    g = random_graph(SCHEMA, 40, seed=2)
    prev = init_store(g, 4, seed=0)
    new, drift = retrain(g, prev, g.ids, RetrainPolicy("warm"), TrainConfig(epochs=0))
    assert drift.max == 0.0
    assert np.array_equal(new.entity_table("user"), prev.entity_table("user"))


def test_warm_start_carries_accumulators():
    g = random_graph(SCHEMA, 40, seed=3)
    prev = init_store(g, 4, seed=0)
    prev._entity_acc["user"] += 2.0
    assert (warm_start_init(g, prev, g.ids).accumulator("user") == 2.0).all()
    assert (warm_start_init(g, prev, g.ids, carry_accumulators=False).accumulator("user") == 0.0).all()


def test_large_alpha_pins_embeddings():
    g = random_graph(SCHEMA, 60, seed=4)
    prev = init_store(g, 4, seed=0)
    _, drift = retrain(g, prev, g.ids, RetrainPolicy("anchor", alpha=1e6), TrainConfig(epochs=5))
    assert drift.max < 1e-3 * np.linalg.norm(prev.entity_table("user"), axis=1).min()


def test_cold_start_ignores_previous():
    g = random_graph(SCHEMA, 60, seed=5)
    prev = init_store(g, 4, seed=0)
    prev._entities["user"] += 5.0
    new, _ = retrain(g, prev, g.ids, RetrainPolicy("cold"), TrainConfig(epochs=0, seed=1))
    assert np.abs(new.entity_table("user")).max() <= 0.1
