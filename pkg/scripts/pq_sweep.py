"""Decoded-vector recall@10 and downstream scorer AUC across PQ compression factors."""

from __future__ import annotations

import argparse

import numpy as np

from hinembed.evalkit import LinearScorer, roc_auc, synthetic_embedding_table, synthetic_embedding_task
from hinembed.quantize import decode, encode, train_codebook
from hinembed.retrieval import brute_force_topk


def overlap_at_k(X, Y, Q, k):
    return float(np.mean([len(set(brute_force_topk(X, q, k)) & set(brute_force_topk(Y, q, k))) / k for q in Q]))


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--rows", type=int, default=10_000)
    p.add_argument("--queries", type=int, default=200)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--factors", default="4,8,16,32", help="compression factors vs float32")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--k", type=int, default=10)
    args = p.parse_args(argv)
    print("factor\tsubquantizers\tseed\trecall_at_k\tauc_raw\tauc_decoded")
    for factor in (int(f) for f in args.factors.split(",")):
        M = args.dim * 4 // factor
        for seed in range(args.seeds):
            A = synthetic_embedding_table(args.rows + args.queries, args.dim, seed)
            X, Q = A[:args.rows], A[args.rows:]
            cb = train_codebook(X, M, seed, batch_size=2048)
            rec = overlap_at_k(X, decode(encode(X, cb), cb), Q, args.k)
            T, y = synthetic_embedding_task(args.rows, args.dim, seed)
            cb = train_codebook(T, M, seed, batch_size=2048)
            D = decode(encode(T, cb), cb)
            half = args.rows // 2
            scorer = LinearScorer.fit(T[:half], y[:half])
            raw = roc_auc(y[half:], scorer.decision(T[half:]))
            dec = roc_auc(y[half:], scorer.decision(D[half:]))
            print(f"{factor}\t{M}\t{seed}\t{rec:.4f}\t{raw:.4f}\t{dec:.4f}", flush=True)


if __name__ == "__main__":
    main()
