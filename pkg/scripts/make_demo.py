"""Regenerate the bundled demo dataset (src/hinembed/demo)."""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from hinembed.evalkit import RelationSpec, SyntheticSpec, generate_synthetic_hin
from hinembed.graph import Coverage

CONFIG = """\
[data]
schema = schema.txt
edges = edges.tsv
edges_next = edges_v2.tsv

[train]
dim = 16
epochs = 30
seed = 0

[cluster]
k = 16
source_type = user
target_type = user
relations = follows

[index]
mode = ivf
nlist = 16
nprobe = 4

[pq]
subquantizers = 8

[eval]
relation = follows
k = 10,20

[pipeline]
out_dir = demo_run
"""


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default=str(Path(__file__).resolve().parents[1] / "src" / "hinembed" / "demo"))
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args(argv)
    spec = SyntheticSpec(
        {"user": 300, "item": 150},
        [
            RelationSpec("follows", "user", "user", density=0.08, inter_density=0.005, interest_sides="source"),
            RelationSpec("favorites", "user", "item", density=0.05, inter_density=0.002),
            RelationSpec("clicks", "user", "item", density=0.05, coverage=Coverage.LOW, participation=0.2),
        ],
        communities=6, interests=2, multi_interest=0.5, multi_interest_types=["user"], popularity=0.8, seed=args.seed,
    )
    v2, _ = generate_synthetic_hin(spec)
    # version 1 lacks 5% of the edges of version 2
    rng = np.random.default_rng(args.seed)
    keep = rng.random(v2.num_edges) >= 0.05
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "schema.txt").write_text(v2.schema.dumps(), encoding="utf-8")
    v2.write_edges(out / "edges.tsv", keep)
    v2.write_edges(out / "edges_v2.tsv")
    (out / "demo.cfg").write_text(CONFIG, encoding="utf-8")
    print(f"wrote {keep.sum()} + {(~keep).sum()} edges to {out}")


if __name__ == "__main__":
    main()
