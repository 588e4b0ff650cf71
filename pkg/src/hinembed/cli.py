"""Command-line entry point.

Every subcommand resolves its parameters as built-in defaults, then the
``--config`` INI file, then explicit flags (flags win). The resolved config and
seed are logged to stderr at INFO; ``--show-config`` prints it and exits.
Failures print one tab-separated line ``error<TAB>kind<TAB>message`` to stderr;
usage errors and missing files exit with status 2, bad data with status 1.
"""

from __future__ import annotations

import argparse
import configparser
import copy
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .evalkit import LinearScorer, link_prediction, rce, split_edges, split_from_graph
from .graph import EdgeFormatError, HinGraph, Schema, SchemaError, load_edges, read_id_map, write_id_map
from .mixture import ClusterModel, build_mixtures, fit_target_clusters, read_mixtures, write_mixtures
from .mixture import MixtureComponent, MixtureRepresentation
from .quantize import compression_report, decode, encode, read_codes, train_codebook, write_codes, PQCodebook
from .retrieval import AnnIndex, IndexParams, build_index, multi_query, query_topk
from .store import CheckpointError, EmbeddingStore, init_store, load_checkpoint, save_checkpoint, write_container
from .trainer import TrainConfig, build_coembedding_graphs, score_many, train
from .graph import partition
from .versioning import RetrainPolicy, retrain

log = logging.getLogger("hinembed")

DEMO_CONFIG = Path(__file__).with_name("demo") / "demo.cfg"

DEFAULTS: dict[str, dict[str, object]] = {
    "data": {"schema": "", "edges": "", "edges_next": ""},
    "train": {
        "dim": 64, "epochs": 10, "partitions": 1, "negatives": 10, "neg_mix": 0.5, "lr": 0.03,
        "batch_size": 128, "seed": 0, "corrupt_side": "both", "workers": 1, "init_scale": 0.1,
    },
    "cluster": {"k": 256, "max_iters": 100, "batch_size": 0, "source_type": "", "target_type": "", "relations": ""},
    "mixture": {"m": 3},
    "index": {"mode": "ivf", "nlist": 64, "nprobe": 12, "train_iters": 25},
    "query": {"k": 20, "translate": "", "exclude_self": True},
    "pq": {"subquantizers": 8, "max_iters": 25, "batch_size": 2048},
    "retrain": {"mode": "warm", "alpha": 0.1, "epochs": 5, "new_node_init": "neighborhood", "directional": False},
    "eval": {"relation": "", "fraction": 0.1, "k": "10,20,50", "filter_train": False},
    "pipeline": {"out_dir": "run", "queries": 5},
}
PATH_KEYS = {("data", "schema"), ("data", "edges"), ("data", "edges_next")}


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 1):
        super().__init__(message)
        self.kind, self.code = kind, code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}", 2)


# -- config -----------------------------------------------------------------


def _convert(section: str, key: str, raw: str):
    default = DEFAULTS[section][key]
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise CliError("config", f"[{section}] {key}: expected a boolean, got {raw!r}", 2)
        return low in ("1", "true", "yes", "on")
    try:
        return type(default)(raw)
    except ValueError:
        raise CliError("config", f"[{section}] {key}: expected {type(default).__name__}, got {raw!r}", 2) from None


def load_config(path: str | None) -> dict[str, dict[str, object]]:
    cfg = copy.deepcopy(DEFAULTS)
    if not path:
        return cfg
    p = Path(path)
    if not p.is_file():
        raise CliError("missing_file", f"config file not found: {p}", 2)
    ini = configparser.ConfigParser()
    try:
        ini.read(p, encoding="utf-8")
    except configparser.Error as e:
        raise CliError("config", f"{p}: {e}".replace("\n", " "), 2) from None
    for section in ini.sections():
        if section not in cfg:
            raise CliError("config", f"{p}: unknown section [{section}]", 2)
        for key, raw in ini.items(section):
            if key not in cfg[section]:
                raise CliError("config", f"{p}: unknown key {key!r} in [{section}]", 2)
            value = _convert(section, key, raw)
            if (section, key) in PATH_KEYS and value:
                value = str((p.parent / value).resolve())
            cfg[section][key] = value
    return cfg


def _opt(p: argparse.ArgumentParser, section: str, key: str, flag: str | None = None, help: str | None = None):
    default = DEFAULTS[section][key]
    kw = {"dest": f"cfg__{section}__{key}", "default": None, "help": help}
    if isinstance(default, bool):
        kw["action"] = argparse.BooleanOptionalAction
    else:
        kw["type"] = type(default)
        kw["metavar"] = key.upper()
    p.add_argument(flag or "--" + key.replace("_", "-"), **kw)


def resolve(args: argparse.Namespace) -> dict[str, dict[str, object]]:
    cfg = load_config(getattr(args, "config", None))
    for name, value in vars(args).items():
        if name.startswith("cfg__") and value is not None:
            _, section, key = name.split("__")
            cfg[section][key] = value
    return cfg


def format_config(cfg) -> str:
    lines = []
    for section, values in cfg.items():
        lines.append(f"[{section}]")
        lines += [f"{k} = {str(v).lower() if isinstance(v, bool) else v}" for k, v in values.items()]
        lines.append("")
    return "\n".join(lines)


# -- helpers ----------------------------------------------------------------


def _need(path, what: str) -> Path:
    if not path:
        raise CliError("usage", f"{what} is required", 2)
    p = Path(path)
    if not p.is_file():
        raise CliError("missing_file", f"{what} not found: {p}", 2)
    return p


def _ids_path(ckpt) -> Path:
    return Path(str(ckpt) + ".ids.tsv")


def _load_graph(cfg, schema_path=None, edges_path=None) -> HinGraph:
    schema = Schema.load(_need(schema_path or cfg["data"]["schema"], "schema file"))
    return load_edges(_need(edges_path or cfg["data"]["edges"], "edge file"), schema)


def _load_ckpt(path) -> tuple[EmbeddingStore, dict[str, list[str]]]:
    store = load_checkpoint(_need(path, "checkpoint"))
    return store, read_id_map(_need(_ids_path(path), "checkpoint id map"))


def _graph_for_ckpt(cfg, store: EmbeddingStore, ids) -> HinGraph:
    """The configured graph limited to the checkpoint's relations, in the checkpoint's id space."""
    graph = _load_graph(cfg)
    keep = [n for n in graph.schema.relation_names if n in store.relation_names]
    if not keep:
        raise CliError("data", "the checkpoint shares no relation with the edge file", 1)
    return graph.subgraph(keep).reindexed(ids)


def _relations(text: str) -> list[str] | None:
    names = [x for x in text.split(",") if x] if text else []
    return names or None


def _train_config(cfg, epochs=None) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        epochs=t["epochs"] if epochs is None else epochs, negatives=t["negatives"], neg_mix=t["neg_mix"], lr=t["lr"],
        batch_size=t["batch_size"], seed=t["seed"], partitions=t["partitions"], corrupt_side=t["corrupt_side"],
        workers=t["workers"],
    )


def _write(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _default_pair(schema: Schema, cfg) -> tuple[str, str]:
    c = cfg["cluster"]
    if c["source_type"] and c["target_type"]:
        return c["source_type"], c["target_type"]
    names = _relations(c["relations"])
    rels = [r for r in schema.relations if names is None or r.name in names]
    rels.sort(key=lambda r: r.coverage.value != "low")  # prefer engagement-style relations
    if not rels:
        raise CliError("usage", "no relation to derive source and target types from", 2)
    return c["source_type"] or rels[0].source_type, c["target_type"] or rels[0].target_type


# -- subcommands ------------------------------------------------------------


def cmd_ingest(args, cfg) -> None:
    graph = _load_graph(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_id_map(graph, out / "ids.tsv")
    lines = ["kind\tname\tcount"]
    lines += [f"entity\t{t}\t{n}" for t, n in graph.counts.items()]
    counts = np.bincount(graph.rel, minlength=len(graph.schema.relations))
    lines += [f"relation\t{r.name}\t{int(c)}" for r, c in zip(graph.schema.relations, counts)]
    (out / "stats.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    log.info("ingested %d entities, %d edges", graph.num_entities, graph.num_edges)


def _write_coembedding(graph: HinGraph, out: Path) -> list[tuple[str, HinGraph]]:
    out.mkdir(parents=True, exist_ok=True)
    groups = []
    for g in build_coembedding_graphs(graph):
        name = next(r.name for r in g.schema.relations if r.coverage.value == "high")
        (out / f"{name}.schema").write_text(g.schema.dumps(), encoding="utf-8")
        g.write_edges(out / f"{name}.tsv")
        groups.append((name, g))
    return groups


def cmd_coembed(args, cfg) -> None:
    groups = _write_coembedding(_load_graph(cfg), Path(args.out_dir))
    for name, g in groups:
        log.info("co-embedding graph %s: %d relations, %d edges", name, len(g.schema.relations), g.num_edges)


def _train_graph(graph: HinGraph, cfg, out: Path, report_path=None) -> EmbeddingStore:
    tc = _train_config(cfg)
    store = init_store(graph, cfg["train"]["dim"], seed=tc.seed, scale=cfg["train"]["init_scale"])
    report = train(graph, partition(graph, tc.partitions, tc.seed), store, tc)
    save_checkpoint(store, out)
    write_id_map(graph, _ids_path(out))
    if report_path:
        Path(report_path).write_text(report.to_tsv(), encoding="utf-8")
    losses = report.epoch_losses()
    if losses:
        log.info("trained %d epochs: loss %.5f -> %.5f", len(losses), losses[0], losses[-1])
    return store


def cmd_train(args, cfg) -> None:
    graph = _load_graph(cfg)
    names = _relations(args.relations)
    if names:
        graph = graph.subgraph(names)
    _train_graph(graph, cfg, Path(args.out), args.report)


def cmd_cluster(args, cfg) -> None:
    store, ids = _load_ckpt(args.ckpt)
    graph = _graph_for_ckpt(cfg, store, ids)
    src, tgt = _default_pair(graph.schema, cfg)
    c = cfg["cluster"]
    model = fit_target_clusters(
        store, graph, c["k"], src, tgt, _relations(c["relations"]), seed=cfg["train"]["seed"],
        max_iters=c["max_iters"], batch_size=c["batch_size"] or None,
    )
    model.save(args.out)
    log.info("clustered %s targets of %s into %d clusters (inertia %.6g)", tgt, src, model.k, model.inertia)


def cmd_mixture(args, cfg) -> None:
    store, ids = _load_ckpt(args.ckpt)
    graph = _graph_for_ckpt(cfg, store, ids)
    model = ClusterModel.load(_need(args.clusters, "cluster file"))
    src, _ = _default_pair(graph.schema, cfg)
    mixes = build_mixtures(graph, model, src, cfg["mixture"]["m"], store=store, relations=_relations(cfg["cluster"]["relations"]))
    write_mixtures(args.out, graph, src, mixes)
    log.info("wrote %d mixtures", len(mixes))


def cmd_index_build(args, cfg) -> None:
    store, ids = _load_ckpt(args.vectors)
    if args.table not in store.counts:
        raise CliError("usage", f"checkpoint has no entity table {args.table!r}", 2)
    i = cfg["index"]
    params = IndexParams(i["mode"], i["nlist"], i["nprobe"], cfg["train"]["seed"], i["train_iters"])
    index = build_index(store.entity_table(args.table), ids[args.table], params, entity_type=args.table)
    index.save(args.out)
    log.info("indexed %d %s vectors (%s)", len(index), args.table, params.mode)


def _mixture_for(path, clusters_path, query_type: str, query_id: str) -> MixtureRepresentation | None:
    model = ClusterModel.load(_need(clusters_path, "cluster file"))
    table = read_mixtures(_need(path, "mixture file"))
    if (query_type, query_id) not in table:
        raise CliError("unknown_id", f"no mixture for {query_type} {query_id}", 1)
    comps = table[(query_type, query_id)]
    if any(c < 0 for c, _ in comps):
        return None  # no engagements: the entity falls back to its own embedding
    return MixtureRepresentation([MixtureComponent(c, w, 0, model.centroids[c]) for c, w in comps])


def run_query(index: AnnIndex, query_type: str, query_id: str, k: int, vector: np.ndarray | None = None,
              mixture: MixtureRepresentation | None = None, offset=0.0, exclude_self: bool = True):
    exclude = [query_id] if exclude_self and query_type == index.entity_type else []
    if mixture is not None:
        shifted = MixtureRepresentation(
            [MixtureComponent(c.cluster, c.weight, c.count, c.centroid + offset) for c in mixture.components])
        return multi_query(index, shifted, k, exclude=exclude)
    return query_topk(index, vector + offset, k, exclude=exclude)


def _query_vector(index: AnnIndex, store: EmbeddingStore | None, ids, query_type: str, query_id: str) -> np.ndarray:
    if store is not None:
        if query_id not in ids.get(query_type, ()):
            raise CliError("unknown_id", f"{query_type} {query_id} is not in the checkpoint", 1)
        return store.gather(query_type, [ids[query_type].index(query_id)])[0].astype(np.float64)
    if query_type != index.entity_type or query_id not in index.ids:
        raise CliError("unknown_id", f"{query_type} {query_id} is not in the index; pass --vectors", 1)
    return index.vectors[index.ids.index(query_id)].astype(np.float64)


def cmd_query(args, cfg) -> None:
    index = AnnIndex.load(_need(args.idx, "index file"))
    store, ids = _load_ckpt(args.vectors) if args.vectors else (None, {})
    qtype = args.query_type or index.entity_type
    q = cfg["query"]
    offset = 0.0
    if q["translate"]:
        if store is None:
            raise CliError("usage", "--translate needs --vectors to read the relation vector", 2)
        offset = store.relation(q["translate"]).astype(np.float64)
    mixture = _mixture_for(args.mixture, args.clusters, qtype, args.query_id) if args.mixture else None
    vector = None if mixture is not None else _query_vector(index, store, ids, qtype, args.query_id)
    res = run_query(index, qtype, args.query_id, q["k"], vector, mixture, offset, q["exclude_self"])
    _write(args.out, res.to_tsv())


def cmd_pq(args, cfg) -> None:
    p = cfg["pq"]
    if args.pq_cmd == "decode":
        cb = PQCodebook.load(_need(args.codebook, "codebook"))
        dec = decode(read_codes(_need(args.codes, "codes file")), cb)
        write_container(args.out, cb.dim, [("decoded", dec.astype(np.float32))])
        return
    store, _ = _load_ckpt(args.ckpt)
    if args.table not in store.counts:
        raise CliError("usage", f"checkpoint has no entity table {args.table!r}", 2)
    table = store.entity_table(args.table)
    if args.pq_cmd == "train":
        cb = train_codebook(table, p["subquantizers"], seed=cfg["train"]["seed"], max_iters=p["max_iters"],
                            batch_size=p["batch_size"] or None)
        cb.save(args.out)
        return
    cb = PQCodebook.load(_need(args.codebook, "codebook"))
    if args.pq_cmd == "encode":
        write_codes(args.out, encode(table, cb))
    else:
        codes = read_codes(_need(args.codes, "codes file")) if args.codes else None
        _write(args.out, compression_report(table, cb, codes).to_tsv())


def cmd_retrain(args, cfg) -> None:
    prev, prev_ids = _load_ckpt(args.prev)
    graph = _load_graph(cfg)
    names = _relations(args.relations)
    if names:
        graph = graph.subgraph(names)
    r = cfg["retrain"]
    policy = RetrainPolicy(r["mode"], r["alpha"], r["new_node_init"], r["directional"], init_scale=cfg["train"]["init_scale"])
    store, drift = retrain(graph, prev, prev_ids, policy, _train_config(cfg, epochs=r["epochs"]))
    save_checkpoint(store, args.out)
    write_id_map(graph, _ids_path(args.out))
    if args.drift:
        Path(args.drift).write_text(drift.to_tsv(), encoding="utf-8")


def _eval_relation(schema: Schema, cfg) -> str:
    name = cfg["eval"]["relation"]
    if name:
        schema.relation(name)
        return name
    return next(r.name for r in schema.relations if r.coverage.value == "high")


def _ks(cfg) -> list[int]:
    try:
        ks = [int(x) for x in str(cfg["eval"]["k"]).split(",") if x]
    except ValueError:
        raise CliError("usage", f"bad k list {cfg['eval']['k']!r}", 2) from None
    if not ks or min(ks) < 1:
        raise CliError("usage", "k values must be positive", 2)
    return ks


def _linkpred_tsv(metrics: dict[str, float]) -> str:
    return "metric\tvalue\n" + "".join(f"{k}\t{v:.9g}\n" for k, v in metrics.items())


def cmd_eval(args, cfg) -> None:
    if args.eval_cmd == "rce":
        labels = np.loadtxt(_need(args.labels, "labels file"), dtype=np.float64, ndmin=1)
        preds = np.loadtxt(_need(args.preds, "predictions file"), dtype=np.float64, ndmin=1)
        _write(args.out, f"metric\tvalue\nrce\t{rce(labels, preds):.9g}\n")
        return
    store, ids = _load_ckpt(args.ckpt)
    schema = Schema.load(_need(cfg["data"]["schema"], "schema file"))
    rel = _eval_relation(schema, cfg)
    if rel not in store.relation_names:
        raise CliError("data", f"relation {rel!r} is not in the checkpoint", 1)
    if args.train_edges:
        full = load_edges(_need(args.train_edges, "training edge file"), schema)
        train_graph = full.subgraph([n for n in schema.relation_names if n in store.relation_names]).reindexed(ids)
    else:
        train_graph = HinGraph(schema, {t: list(v) for t, v in ids.items()}, [], [], [])
    heldout = load_edges(_need(args.split, "held-out edge file"), schema)
    split = split_from_graph(train_graph, heldout, rel)
    if not split.heldout:
        raise CliError("data", "no held-out edge resolves in the checkpoint id space", 1)
    filt = cfg["eval"]["filter_train"] and bool(args.train_edges)
    _write(args.out, _linkpred_tsv(link_prediction(store, split, _ks(cfg), filter_train=filt)))


# -- pipeline ---------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out: Path) -> Path:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "MANIFEST.tsv")
    lines = [f"{p.relative_to(out).as_posix()}\t{p.stat().st_size}\t{_sha256(p)}" for p in files]
    path = out / "MANIFEST.tsv"
    path.write_text("path\tbytes\tsha256\n" + "\n".join(lines) + "\n", encoding="utf-8")
    return path


def run_pipeline(cfg, out: Path) -> Path:
    """ingest -> co-embedding graphs -> train -> cluster -> mixtures -> index -> queries
    -> PQ -> eval -> retrain; every artifact lands under ``out``."""
    seed = cfg["train"]["seed"]
    out.mkdir(parents=True, exist_ok=True)
    graph = _load_graph(cfg)
    write_id_map(graph, out / "ids.tsv")

    rel = _eval_relation(graph.schema, cfg)
    split = split_edges(graph, rel, cfg["eval"]["fraction"], seed)
    held = np.array([(s, t) for s, ts in sorted(split.heldout.items()) for t in sorted(ts)])
    r = graph.schema.relation(rel)
    with open(out / "heldout.tsv", "w", encoding="utf-8") as fh:
        for s, t in held:
            fh.write(f"{r.source_type}\t{graph.ids[r.source_type][s]}\t{rel}\t{r.target_type}\t{graph.ids[r.target_type][t]}\n")
    split.train.write_edges(out / "train_edges.tsv")

    groups = _write_coembedding(split.train, out / "coembed")
    stores = {}
    for name, g in groups:
        d = out / "coembed" / name
        d.mkdir(exist_ok=True)
        stores[name] = _train_graph(g, cfg, d / "model.ckpt", d / "train_report.tsv")
    primary, pgraph = next(((n, g) for n, g in groups if rel in g.schema.relation_names), groups[0])
    ckpt = out / "coembed" / primary / "model.ckpt"
    store = stores[primary]

    src, tgt = _default_pair(pgraph.schema, cfg)
    c = cfg["cluster"]
    rels = _relations(c["relations"])
    model = fit_target_clusters(store, pgraph, c["k"], src, tgt, rels, seed=seed, max_iters=c["max_iters"],
                                batch_size=c["batch_size"] or None)
    model.save(out / "clusters.ckpt")
    mixes = build_mixtures(pgraph, model, src, cfg["mixture"]["m"], store=store, relations=rels)
    write_mixtures(out / "mixtures.tsv", pgraph, src, mixes)

    i = cfg["index"]
    index = build_index(store.entity_table(tgt), pgraph.ids[tgt], IndexParams(i["mode"], i["nlist"], i["nprobe"], seed, i["train_iters"]), tgt)
    index.save(out / "index.idx")
    q = cfg["query"]
    offset = store.relation(q["translate"]).astype(np.float64) if q["translate"] else 0.0
    lines = ["query_id\tmode\trank\tid\tscore\tcomponent"]
    with_mix = [s for s in sorted(mixes) if mixes[s].components[0].cluster >= 0][: cfg["pipeline"]["queries"]]
    for s in with_mix:
        x = pgraph.ids[src][s]
        vec = store.gather(src, [s])[0].astype(np.float64)
        for mode, mix in (("unimodal", None), ("mixture", mixes[s])):
            res = run_query(index, src, x, q["k"], vec, mix, offset, q["exclude_self"])
            lines += [f"{x}\t{mode}\t{n}\t{cand.id}\t{cand.score:.6f}\t{cand.component}" for n, cand in enumerate(res, 1)]
    (out / "queries.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    p = cfg["pq"]
    table = store.entity_table(tgt)
    cb = train_codebook(table, p["subquantizers"], seed=seed, max_iters=p["max_iters"], batch_size=p["batch_size"] or None)
    cb.save(out / "codebook.ckpt")
    codes = encode(table, cb)
    write_codes(out / "codes.bin", codes)
    (out / "pq_report.tsv").write_text(compression_report(table, cb, codes).to_tsv(), encoding="utf-8")

    esplit = split_from_graph(pgraph, split_from_ids(graph, held, rel), rel)
    (out / "eval_linkpred.tsv").write_text(_linkpred_tsv(link_prediction(store, esplit, _ks(cfg), filter_train=cfg["eval"]["filter_train"])), encoding="utf-8")
    (out / "eval_rce.tsv").write_text(_rce_tsv(store, esplit, seed), encoding="utf-8")

    if cfg["data"]["edges_next"]:
        nxt = load_edges(_need(cfg["data"]["edges_next"], "next-version edge file"), graph.schema)
        ngraph = nxt.subgraph(pgraph.schema.relation_names)
        rt = cfg["retrain"]
        policy = RetrainPolicy(rt["mode"], rt["alpha"], rt["new_node_init"], rt["directional"], init_scale=cfg["train"]["init_scale"])
        new_store, drift = retrain(ngraph, store, pgraph.ids, policy, _train_config(cfg, epochs=rt["epochs"]))
        save_checkpoint(new_store, out / "retrain.ckpt")
        write_id_map(ngraph, _ids_path(out / "retrain.ckpt"))
        (out / "drift.tsv").write_text(drift.to_tsv(), encoding="utf-8")
    log.info("pipeline artifacts in %s (primary co-embedding %s, checkpoint %s)", out, primary, ckpt)
    return write_manifest(out)


def split_from_ids(graph: HinGraph, pairs: np.ndarray, relation: str) -> HinGraph:
    """Held-out (source, target) local-id pairs of ``graph`` as a standalone edge graph."""
    k = graph.schema.relation_index(relation)
    n = len(pairs)
    return graph.with_edges(np.full(n, k), pairs[:, 0] if n else [], pairs[:, 1] if n else [])


def _rce_tsv(store: EmbeddingStore, split, seed: int) -> str:
    """RCE on held-out edges against as many sampled non-edges.

    ``rce_raw`` uses sigmoid(score) directly; ``rce_calibrated`` fits a one-feature
    logistic scorer on even-indexed pairs and evaluates on the odd ones.
    """
    from scipy.special import expit

    g = split.train
    r = g.schema.relation(split.relation)
    pos = np.array([(s, t) for s, ts in sorted(split.heldout.items()) for t in sorted(ts)])
    rng = np.random.default_rng([seed, 1])
    k = g.schema.relation_index(split.relation)
    n_t = g.counts[r.target_type]
    known = set((g.src[g.rel == k] * n_t + g.dst[g.rel == k]).tolist()) | set((pos[:, 0] * n_t + pos[:, 1]).tolist())
    neg = []
    while len(neg) < len(pos):
        s, t = int(rng.integers(g.counts[r.source_type])), int(rng.integers(n_t))
        if s * n_t + t not in known:
            neg.append((s, t))
    neg = np.array(neg)
    sp = score_many(store, r.name, r.source_type, r.target_type, pos[:, 0], pos[:, 1])
    sn = score_many(store, r.name, r.source_type, r.target_type, neg[:, 0], neg[:, 1])
    labels, scores = np.r_[np.ones(len(sp)), np.zeros(len(sn))], np.r_[sp, sn]
    fit, ev = np.arange(0, len(labels), 2), np.arange(1, len(labels), 2)
    scorer = LinearScorer.fit(scores[fit, None], labels[fit])
    cal = rce(labels[ev], expit(scorer.decision(scores[ev, None])))
    return f"metric\tvalue\nrce_raw\t{rce(labels, expit(scores)):.9g}\nrce_calibrated\t{cal:.9g}\n"


def cmd_pipeline(args, cfg) -> None:
    out = Path(args.out_dir or cfg["pipeline"]["out_dir"])
    manifest = run_pipeline(cfg, out)
    print(manifest)


# -- parser -----------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file; flags override its values")
    p.add_argument("--show-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    _opt(p, "train", "seed")
    _opt(p, "train", "workers")


def _data(p, edges=True) -> None:
    _opt(p, "data", "schema")
    if edges:
        _opt(p, "data", "edges")


def _train_opts(p) -> None:
    for key in ("dim", "epochs", "partitions", "negatives", "neg_mix", "lr", "batch_size", "corrupt_side", "init_scale"):
        _opt(p, "train", key)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hinembed", description="Heterogeneous-graph embeddings: train, cluster, retrieve, compress.")
    parser.add_argument("--version", action="version", version=f"hinembed {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="validate an edge file and write the id map and counts")
    _common(p), _data(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("coembed", help="split a graph into co-embedding graphs (one per high-coverage relation)")
    _common(p), _data(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_coembed)

    p = sub.add_parser("train", help="train embeddings and write a checkpoint plus id map")
    _common(p), _data(p), _train_opts(p)
    p.add_argument("--relations", default="", help="comma-separated relations to keep")
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="training report TSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cluster", help="k-means over engaged target embeddings")
    _common(p), _data(p)
    for key in ("k", "max_iters", "batch_size", "source_type", "target_type", "relations"):
        _opt(p, "cluster", key)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("mixture", help="per-entity cluster-engagement mixtures")
    _common(p), _data(p)
    for key in ("source_type", "target_type", "relations"):
        _opt(p, "cluster", key)
    _opt(p, "mixture", "m")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--clusters", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mixture)

    def query_opts(q):
        _common(q)
        q.add_argument("--idx", required=True)
        q.add_argument("--vectors", help="checkpoint holding the query entity (default: the index itself)")
        q.add_argument("--query-type", help="entity type of the query (default: the indexed type)")
        q.add_argument("--query-id", required=True)
        q.add_argument("--mixture", help="mixture TSV; query with the entity's mixture")
        q.add_argument("--clusters", help="cluster file the mixture refers to (required with --mixture)")
        q.add_argument("--out", help="output TSV (default stdout)")
        _opt(q, "query", "k")
        _opt(q, "query", "translate", help="add this relation's vector to every query")
        _opt(q, "query", "exclude_self")
        q.set_defaults(func=cmd_query)

    p = sub.add_parser("index", help="build or query a retrieval index")
    isub = p.add_subparsers(dest="index_cmd", required=True, parser_class=_Parser)
    b = isub.add_parser("build")
    _common(b)
    for key in ("mode", "nlist", "nprobe", "train_iters"):
        _opt(b, "index", key)
    b.add_argument("--vectors", required=True, help="checkpoint")
    b.add_argument("--table", required=True, help="entity type to index")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_index_build)
    query_opts(isub.add_parser("query"))
    query_opts(sub.add_parser("query", help="same as 'index query'"))

    p = sub.add_parser("pq", help="product quantization")
    psub = p.add_subparsers(dest="pq_cmd", required=True, parser_class=_Parser)
    for name in ("train", "encode", "decode", "report"):
        q = psub.add_parser(name)
        _common(q)
        if name != "decode":
            q.add_argument("--ckpt", required=True)
            q.add_argument("--table", required=True)
        if name == "train":
            for key in ("subquantizers", "max_iters", "batch_size"):
                _opt(q, "pq", key)
        else:
            q.add_argument("--codebook", required=True)
        if name in ("decode", "report"):
            q.add_argument("--codes", required=name == "decode")
        q.add_argument("--out", required=name != "report")
        q.set_defaults(func=cmd_pq)

    p = sub.add_parser("retrain", help="train a new version from a previous checkpoint")
    _common(p), _data(p), _train_opts(p)
    for key in ("mode", "alpha", "new_node_init", "directional"):
        _opt(p, "retrain", key)
    _opt(p, "retrain", "epochs", flag="--retrain-epochs")
    p.add_argument("--prev", required=True)
    p.add_argument("--relations", default="")
    p.add_argument("--out", required=True)
    p.add_argument("--drift", help="drift report TSV")
    p.set_defaults(func=cmd_retrain)

    p = sub.add_parser("eval", help="offline metrics")
    esub = p.add_subparsers(dest="eval_cmd", required=True, parser_class=_Parser)
    q = esub.add_parser("linkpred")
    _common(q)
    _data(q, edges=False)
    for key in ("relation", "k", "filter_train"):
        _opt(q, "eval", key)
    q.add_argument("--ckpt", required=True)
    q.add_argument("--split", required=True, help="held-out edge file")
    q.add_argument("--train-edges", help="training edges, used to filter known targets")
    q.add_argument("--out")
    q.set_defaults(func=cmd_eval)
    q = esub.add_parser("rce")
    _common(q)
    q.add_argument("--labels", required=True)
    q.add_argument("--preds", required=True)
    q.add_argument("--out")
    q.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="run every stage end to end")
    _common(p), _data(p), _train_opts(p)
    _opt(p, "data", "edges_next")
    p.add_argument("--demo", action="store_true", help="use the bundled demo config")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_pipeline)
    return parser


def _relax(parser: argparse.ArgumentParser) -> None:
    """Drop required flags so ``--show-config`` works on a partial command line."""
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                _relax(sub)
        elif action.option_strings:
            action.required = False


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        parser = build_parser()
        if "--show-config" in argv:
            _relax(parser)
        args = parser.parse_args(argv)
        logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        if getattr(args, "demo", False) and not args.config:
            args.config = str(DEMO_CONFIG)
        cfg = resolve(args)
        if args.show_config:
            sys.stdout.write(format_config(cfg))
            return 0
        log.info("command %s seed %d config %s", args.command, cfg["train"]["seed"], json.dumps(cfg, sort_keys=True))
        args.func(args, cfg)
        return 0
    except CliError as e:
        err = e
    except FileNotFoundError as e:
        err = CliError("missing_file", f"file not found: {e.filename}", 2)
    except (EdgeFormatError, SchemaError, CheckpointError) as e:
        err = CliError("data", str(e), 1)
    except ValueError as e:
        err = CliError("invalid", str(e), 1)
    msg = " ".join(str(err).split())
    print(f"error\t{err.kind}\t{msg}", file=sys.stderr)
    return err.code


if __name__ == "__main__":
    sys.exit(main())
