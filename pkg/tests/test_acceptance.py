"""Acceptance suite: one test per criterion, each timed and reported as a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the measured values as they are
produced; the terminal summary always lists one line per criterion.
"""

import hashlib
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from hinembed.cli import main
from hinembed.evalkit import (
    LinearScorer, RelationSpec, SyntheticSpec, generate_synthetic_hin, heldout_auc, link_prediction, rce, roc_auc,
    split_edges, synthetic_embedding_table, synthetic_embedding_task,
)
from hinembed.graph import EntityRef, RelationType, Schema, graph_from_triples, partition
from hinembed.mixture import ClusterModel, build_mixtures, engagement_distribution, fit_target_clusters
from hinembed.quantize import decode, encode, train_codebook
from hinembed.retrieval import IndexParams, brute_force_topk, build_index, multi_query, query_topk
from hinembed.store import init_store
from hinembed.trainer import Anchor, TrainConfig, train
from hinembed.versioning import RetrainPolicy, retrain

from oracles import finite_difference_check, random_micro

pytestmark = pytest.mark.acceptance

SEEDS = range(5)


def report(record_property, n, checks, detail, elapsed, limit):
    """Record the criterion line, print it, then assert every check plus the runtime limit."""
    checks = list(checks) + [(f"runtime {elapsed:.1f}s < {limit}s", elapsed < limit)]
    ok = all(passed for _, passed in checks)
    line = f"{detail}; {elapsed:.1f}s/{limit}s"
    record_property("criterion", n)
    record_property("detail", line)
    print(f"\ncriterion {n:>2} {'PASS' if ok else 'FAIL'}  {line}")
    failed = [name for name, passed in checks if not passed]
    assert not failed, f"criterion {n} failed: {', '.join(failed)}"


def train_store(graph, seed, partitions=1, epochs=30, dim=16):
    store = init_store(graph, dim, seed)
    cfg = TrainConfig(epochs=epochs, seed=seed, lr=0.03, partitions=partitions)
    train(graph, partition(graph, partitions, seed), store, cfg)
    return store


def drop_edges(graph, fraction, seed):
    rng = np.random.default_rng(seed)
    keep = np.ones(graph.num_edges, dtype=bool)
    keep[rng.choice(graph.num_edges, int(fraction * graph.num_edges), replace=False)] = False
    return graph.with_edges(graph.rel[keep], graph.src[keep], graph.dst[keep])


# -- 1. gradient correctness --------------------------------------------------


def test_criterion_01_gradients(record_property):
    t0 = time.perf_counter()
    plain, anchored = [], []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        _, store, batch = random_micro(rng, int(rng.integers(1, 9)))
        plain.append(finite_difference_check(store, batch))
        prev = {t: store.entity_table(t) + rng.normal(0, 0.5, store.entity_table(t).shape) for t in store.entity_types}
        mask = {t: rng.random(store.counts[t]) < 0.7 for t in store.entity_types}
        anchored.append(finite_difference_check(store, batch, Anchor(float(rng.uniform(0.01, 10)), prev, mask)))
    elapsed = time.perf_counter() - t0
    worst_p, worst_a = max(plain), max(anchored)
    report(record_property, 1,
           [("plain rel err < 1e-4", worst_p < 1e-4), ("anchored rel err < 1e-4", worst_a < 1e-4)],
           f"100 micro-stores d<=8: max rel err plain {worst_p:.2e}, anchored {worst_a:.2e}", elapsed, 10)


# -- 2. learning signal -------------------------------------------------------


def test_criterion_02_learning_signal(record_property):
    t0 = time.perf_counter()
    aucs = []
    for seed in SEEDS:
        spec = SyntheticSpec(
            {"user": 300, "item": 200},
            [RelationSpec("follows", "user", "user", 0.1), RelationSpec("engages", "user", "item", 0.1, coverage="low")],
            communities=2, popularity=1.5, seed=seed,
        )
        g, _ = generate_synthetic_hin(spec)
        split = split_edges(g, "follows", 0.1, seed)
        aucs.append(heldout_auc(train_store(split.train, seed), split))
    elapsed = time.perf_counter() - t0
    mean = float(np.mean(aucs))
    report(record_property, 2, [("mean AUC > 0.9", mean > 0.9)],
           f"held-out AUC 5-seed mean {mean:.4f} (per seed {np.round(aucs, 3).tolist()})", elapsed, 120)


# -- 3. partitioned-training parity ---------------------------------------------


def test_criterion_03_partition_parity(record_property):
    t0 = time.perf_counter()
    mrr = {1: [], 2: []}
    for seed in SEEDS:
        spec = SyntheticSpec(
            {"user": 120, "item": 80},
            [RelationSpec("follows", "user", "user", 0.3), RelationSpec("engages", "user", "item", 0.3, coverage="low")],
            communities=2, popularity=0.7, seed=seed,
        )
        g, _ = generate_synthetic_hin(spec)
        split = split_edges(g, "follows", 0.1, seed)
        for P in (1, 2):
            store = train_store(split.train, seed, partitions=P)
            mrr[P].append(link_prediction(store, split, filter_train=True)["mrr"])
    elapsed = time.perf_counter() - t0
    m1, m2 = float(np.mean(mrr[1])), float(np.mean(mrr[2]))
    rel = abs(m2 - m1) / m1
    report(record_property, 3, [("relative MRR gap < 10%", rel < 0.10)],
           f"MRR P=1 {m1:.4f} vs P=2 {m2:.4f}, relative gap {100 * rel:.2f}%", elapsed, 120)


# -- 4. mixture vs unimodal -----------------------------------------------------


def mixture_vs_unimodal(seed, K=10):
    spec = SyntheticSpec(
        {"user": 600, "item": 300},
        [RelationSpec("follows", "user", "user", 0.1, interest_sides="source"),
         RelationSpec("engages", "user", "item", 0.02, coverage="low")],
        communities=8, multi_interest=1.0, interests=3, multi_interest_types=["user"], popularity=1.5, seed=seed,
    )
    g, _ = generate_synthetic_hin(spec)
    split = split_edges(g, "follows", 0.2, seed)
    tr = split.train
    store = train_store(tr, seed)
    U = store.entity_table("user").astype(np.float64)
    model = fit_target_clusters(store, tr, 8, "user", "user", ["follows"], seed=seed)
    mixtures = build_mixtures(tr, model, "user", 3, store=store, relations=["follows"])
    index = build_index(U)
    follows = tr.schema.relation_index("follows")
    uni, mix = [], []
    for q, pos in split.heldout.items():
        seen = [str(q)] + [str(x) for x in tr.dst[(tr.rel == follows) & (tr.src == q)]]
        hit = lambda ids: len({int(x) for x in ids} & pos) / min(len(pos), K)
        uni.append(hit(query_topk(index, U[q], K, exclude=seen).ids))
        mix.append(hit(multi_query(index, mixtures[q], K, exclude=seen).ids))
    return float(np.mean(uni)), float(np.mean(mix))


def test_criterion_04_mixture_beats_unimodal(record_property):
    t0 = time.perf_counter()
    res = np.array([mixture_vs_unimodal(seed) for seed in SEEDS])
    elapsed = time.perf_counter() - t0
    uni, mix = res.mean(0)
    lift = mix / uni - 1
    report(record_property, 4, [("relative lift >= 50%", lift >= 0.5)],
           f"recall@10 unimodal {uni:.4f} vs mixture {mix:.4f}, lift {100 * lift:.1f}%", elapsed, 120)


# -- 5. mixture weights are exact -------------------------------------------------

# item -> cluster; items 0 and 1 share cluster 0, items 4 and 5 share cluster 3
ITEM_CLUSTER = [0, 0, 1, 2, 3, 3]
F = Fraction
MIXTURE_FIXTURES = [
    ([0], 1, [(0, F(1))]),
    ([0, 1], 3, [(0, F(1))]),
    ([0, 2], 3, [(0, F(1, 2)), (1, F(1, 2))]),
    ([0, 2, 3], 3, [(0, F(1, 3)), (1, F(1, 3)), (2, F(1, 3))]),
    ([0, 2, 3, 4], 3, [(0, F(1, 3)), (1, F(1, 3)), (2, F(1, 3))]),
    ([0, 1, 2, 3, 4], 3, [(0, F(1, 2)), (1, F(1, 4)), (2, F(1, 4))]),
    ([0, 1, 2, 3, 4], 1, [(0, F(1))]),
    ([0, 1, 2, 3, 4], 2, [(0, F(2, 3)), (1, F(1, 3))]),
    ([4, 5, 4], 3, [(3, F(1))]),
    ([2, 2, 3, 4, 5], 3, [(1, F(2, 5)), (3, F(2, 5)), (2, F(1, 5))]),
    ([2, 2, 3, 4, 5], 2, [(1, F(1, 2)), (3, F(1, 2))]),
    ([2, 2, 3, 4, 5], 1, [(1, F(1))]),
    ([5, 4, 3, 2], 2, [(3, F(2, 3)), (1, F(1, 3))]),
    ([0, 0, 0, 2, 2, 3], 3, [(0, F(1, 2)), (1, F(1, 3)), (2, F(1, 6))]),
    ([0, 0, 0, 2, 2, 3], 4, [(0, F(1, 2)), (1, F(1, 3)), (2, F(1, 6))]),
    ([0, 1, 2, 3, 4, 5], 4, [(0, F(1, 3)), (3, F(1, 3)), (1, F(1, 6)), (2, F(1, 6))]),
    ([0, 1, 2, 3, 4, 5], 2, [(0, F(1, 2)), (3, F(1, 2))]),
    ([0, 1, 2, 3, 4, 5], 3, [(0, F(2, 5)), (3, F(2, 5)), (1, F(1, 5))]),
    ([3] * 7 + [0, 1] * 3, 2, [(2, F(7, 13)), (0, F(6, 13))]),
    ([3] * 7 + [0, 1] * 3 + [2] * 5 + [4], 3, [(2, F(7, 18)), (0, F(1, 3)), (1, F(5, 18))]),
]


def test_criterion_05_mixture_weights_exact(record_property):
    t0 = time.perf_counter()
    schema = Schema(("user", "item"), (RelationType("engages", "user", "item"),))
    base = graph_from_triples(schema, [("u0", "engages", f"i{i}") for i in range(len(ITEM_CLUSTER))])
    model = ClusterModel(np.eye(4), np.array(ITEM_CLUSTER), 0.0, target_type="item")
    mismatches = []
    for n, (items, m, expected) in enumerate(MIXTURE_FIXTURES):
        g = base.with_edges(np.zeros(len(items), dtype=np.int64), np.zeros(len(items), dtype=np.int64), np.array(items))
        mix = engagement_distribution(EntityRef("user", 0), g, model, m)
        total = sum(c.count for c in mix.components)
        got = [(c.cluster, F(c.count, total)) for c in mix.components]
        if got != expected or mix.weights != [float(w) for _, w in expected]:
            mismatches.append(n)
    elapsed = time.perf_counter() - t0
    report(record_property, 5, [("all fixtures exact", not mismatches)],
           f"{len(MIXTURE_FIXTURES) - len(mismatches)}/{len(MIXTURE_FIXTURES)} fixtures exact"
           + (f", mismatches {mismatches}" if mismatches else ""), elapsed, 1)


# -- 6. RCE exactness --------------------------------------------------------------

# reference values computed at 50 significant digits, clipping included
RCE_FIXTURES = [
    ([1, 0], [0.8, 0.4], None, 47.055315547321574),
    ([1, 0, 0, 1, 1], [0.6] * 5, None, 0.0),
    ([1, 0, 1], [1.0, 0.0, 1.0], None, 99.999999842894306),
    ([1, 0, 1, 0], [0.5] * 4, None, 0.0),
    ([1, 1, 0, 0, 0], [0.9, 0.7, 0.2, 0.1, 0.3], None, 65.908036168069918),
    ([0, 1], [0.4, 0.8], None, 47.055315547321574),
    ([1, 0, 0, 0], [0.3, 0.3, 0.2, 0.25], None, 7.9075266834489632),
    ([1, 0, 0, 1], [0.2, 0.8, 0.6, 0.3], None, -92.56874697070733),
    ([1] + [0] * 9, [0.35, 0.05, 0.1, 0.02, 0.08, 0.15, 0.03, 0.07, 0.04, 0.11], None, 46.691613119109651),
    ([1, 0, 1, 0], [0.7, 0.2, 0.6, 0.4], 0.3, 48.692145791206044),
]


def test_criterion_06_rce_exact(record_property):
    t0 = time.perf_counter()
    errors = [abs(rce(y, p, prior) - want) for y, p, prior, want in RCE_FIXTURES]
    elapsed = time.perf_counter() - t0
    worst = max(errors)
    report(record_property, 6, [("max abs error <= 1e-9", worst <= 1e-9)],
           f"{len(RCE_FIXTURES)} fixtures, max abs error {worst:.2e} (prior case {rce(*RCE_FIXTURES[1][:3]):.1e}, "
           f"perfect case {rce(*RCE_FIXTURES[2][:3]):.7f})", elapsed, 1)


# -- 7. product quantization ----------------------------------------------------------

PQ_SUBQUANTIZERS = {4: 64, 8: 32, 16: 16, 32: 8}  # compression factor -> M at d=64


def overlap_at_10(X, Y, Q):
    return float(np.mean([len(set(brute_force_topk(X, q, 10)) & set(brute_force_topk(Y, q, 10))) / 10 for q in Q]))


def test_criterion_07_product_quantization(record_property):
    t0 = time.perf_counter()
    recall = {f: [] for f in PQ_SUBQUANTIZERS}
    auc_loss = []
    for seed in SEEDS:
        A = synthetic_embedding_table(10_200, 64, seed)
        X, Q = A[:10_000], A[10_000:]
        for f, M in PQ_SUBQUANTIZERS.items():
            cb = train_codebook(X, M, seed, batch_size=2048)
            recall[f].append(overlap_at_10(X, decode(encode(X, cb), cb), Q))
        T, y = synthetic_embedding_task(10_000, 64, seed)
        cb = train_codebook(T, PQ_SUBQUANTIZERS[32], seed, batch_size=2048)
        D = decode(encode(T, cb), cb)
        scorer = LinearScorer.fit(T[:5000], y[:5000])
        auc_raw = roc_auc(y[5000:], scorer.decision(T[5000:]))
        auc_pq = roc_auc(y[5000:], scorer.decision(D[5000:]))
        auc_loss.append(100 * (auc_raw - auc_pq))
    elapsed = time.perf_counter() - t0
    curve = [float(np.mean(recall[f])) for f in sorted(recall)]
    loss = float(np.mean(auc_loss))
    report(record_property, 7,
           [("recall@10 at 8x >= 0.8", curve[1] >= 0.8),
            ("recall nonincreasing in compression", all(a >= b for a, b in zip(curve, curve[1:]))),
            ("AUC loss at 32x <= 2 points", loss <= 2.0)],
           "recall@10 at 4x/8x/16x/32x " + "/".join(f"{r:.3f}" for r in curve)
           + f"; scorer AUC loss at 32x {loss:.2f} points (per seed max {max(auc_loss):.2f})", elapsed, 180)


# -- 8. warm-start drift -----------------------------------------------------------------


def drift_spec(seed):
    return SyntheticSpec(
        {"user": 600, "item": 400},
        [RelationSpec("follows", "user", "user", 0.03), RelationSpec("engages", "user", "item", 0.03, coverage="low")],
        communities=4, popularity=1.0, seed=seed,
    )


def test_criterion_08_warm_start_drift(record_property):
    t0 = time.perf_counter()
    cold, warm, anchor_max = [], [], []
    for seed in SEEDS:
        g2, _ = generate_synthetic_hin(drift_spec(seed))
        g1 = drop_edges(g2, 0.05, seed)
        prev = train_store(g1, seed)
        cfg = TrainConfig(epochs=5, seed=seed + 100, lr=0.03)
        cold.append(retrain(g2, prev, g1.ids, RetrainPolicy(mode="cold"), cfg)[1].mean)
        warm.append(retrain(g2, prev, g1.ids, RetrainPolicy(mode="warm"), cfg)[1].mean)
        anchor_max.append(retrain(g2, prev, g1.ids, RetrainPolicy(mode="anchor", alpha=1e6), cfg)[1].max)
    elapsed = time.perf_counter() - t0
    c, w, a = float(np.mean(cold)), float(np.mean(warm)), max(anchor_max)
    report(record_property, 8, [("warm drift 10x below cold", w * 10 <= c), ("anchored max drift < 1e-3", a < 1e-3)],
           f"mean L2 drift cold {c:.4f} vs warm {w:.4f} ({c / w:.1f}x); anchored alpha=1e6 max drift {a:.2e}",
           elapsed, 120)


# -- 9. drift vs quality ---------------------------------------------------------------------


def test_criterion_09_warm_vs_anchor_quality(record_property):
    t0 = time.perf_counter()
    res = {"warm": [], "anchor": []}
    for seed in SEEDS:
        g, _ = generate_synthetic_hin(drift_spec(seed))
        split = split_edges(g, "follows", 0.1, seed)
        g2 = split.train
        g1 = drop_edges(g2, 0.05, seed)
        prev = train_store(g1, seed)
        cfg = TrainConfig(epochs=5, seed=seed + 100, lr=0.03)
        for mode in res:
            store, _ = retrain(g2, prev, g1.ids, RetrainPolicy(mode=mode, alpha=0.1), cfg)
            lp = link_prediction(store, split, filter_train=True)
            res[mode].append((lp["recall@10"], lp["mrr"]))
    elapsed = time.perf_counter() - t0
    w, a = np.mean(res["warm"], 0), np.mean(res["anchor"], 0)
    rel = np.abs(w - a) / w
    report(record_property, 9, [("recall@10 within 2%", rel[0] < 0.02), ("MRR within 2%", rel[1] < 0.02)],
           f"warm R@10 {w[0]:.4f} MRR {w[1]:.4f} vs anchored R@10 {a[0]:.4f} MRR {a[1]:.4f}; "
           f"relative gaps {100 * rel[0]:.2f}% / {100 * rel[1]:.2f}%", elapsed, 120)


# -- 10. approximate retrieval ------------------------------------------------------------------


def test_criterion_10_ivf_recall(record_property):
    t0 = time.perf_counter()
    A = synthetic_embedding_table(11_000, 64, 0)
    X, Q = A[:10_000], A[10_000:]
    index = build_index(X, params=IndexParams(mode="ivf"))
    recall = float(np.mean([
        len({int(i) for i in query_topk(index, q, 10).ids} & set(brute_force_topk(X, q, 10).tolist())) / 10 for q in Q
    ]))
    elapsed = time.perf_counter() - t0
    p = index.params
    report(record_property, 10, [("recall@10 >= 0.9", recall >= 0.9)],
           f"IVF nlist={p.nlist} nprobe={p.nprobe}: recall@10 {recall:.4f} over {len(Q)} queries", elapsed, 60)


# -- 11. pipeline determinism ----------------------------------------------------------------------


def checksums(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_11_pipeline_determinism(record_property, tmp_path):
    t0 = time.perf_counter()
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["pipeline", "--demo", "--out-dir", str(out), "--workers", "1"]) == 0
        runs.append(checksums(out))
    elapsed = time.perf_counter() - t0
    a, b = runs
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    report(record_property, 11,
           [("artifact set identical", a.keys() == b.keys()), ("all checksums equal", not differing),
            ("manifest present", "MANIFEST.tsv" in a)],
           f"{len(a)} artifacts per run, {len(differing)} differ" + (f": {differing}" if differing else ""), elapsed, 180)
