#!/usr/bin/env python3
"""Convert Planetoid files (ind.<name>.x, tx, allx, y, ty, ally, graph,
test.index) into the dataset directory read by `gcgp`:

    features.csv  one dense row per node
    edges.csv     `u,v` per undirected edge, u < v, no self-loops
    labels.csv    one class id per node
    split.json    {"train": [...], "val": [...], "test": [...]}

The split is the standard one: the first len(y) nodes train, the next 500
validate, and test.index lists the test nodes. Citeseer has test ids with no
features; they become zero rows with label 0 and belong to no split.

    python3 scripts/planetoid_to_dir.py --raw planetoid/data --name cora --out data/cora
    python3 scripts/planetoid_to_dir.py --self-test
"""

import argparse
import json
import pickle
import sys
import tempfile
from pathlib import Path

import numpy as np
import scipy.sparse as sp

PARTS = ["x", "y", "tx", "ty", "allx", "ally", "graph"]


def load_part(raw, name, part):
    with open(raw / f"ind.{name}.{part}", "rb") as f:
        return pickle.load(f, encoding="latin1")


def load_planetoid(raw, name):
    x, y, tx, ty, allx, ally, graph = (load_part(raw, name, p) for p in PARTS)
    test_index = [int(line) for line in (raw / f"ind.{name}.test.index").read_text().split()]
    test_sorted = np.sort(test_index)

    lo, hi = test_sorted[0], test_sorted[-1]
    span = hi - lo + 1
    if span != len(test_sorted):
        # isolated test ids without features
        tx_full = sp.lil_matrix((span, tx.shape[1]))
        tx_full[test_sorted - lo, :] = tx
        tx = tx_full
        ty_full = np.zeros((span, ty.shape[1]))
        ty_full[test_sorted - lo, :] = ty
        ty = ty_full

    features = sp.vstack((sp.csr_matrix(allx), sp.csr_matrix(tx))).tolil()
    features[test_index, :] = features[test_sorted, :]
    onehot = np.vstack((ally, ty))
    onehot[test_index, :] = onehot[test_sorted, :]

    n = features.shape[0]
    labels = onehot.argmax(axis=1)
    edges = set()
    for u, nbrs in graph.items():
        for v in nbrs:
            if u != v and u < n and v < n:
                edges.add((min(u, v), max(u, v)))

    train = list(range(len(y)))
    val = list(range(len(y), len(y) + 500))
    split = {"train": train, "val": val, "test": sorted(int(i) for i in test_index)}
    return features.toarray(), sorted(edges), labels, split


def fmt(v):
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def write_dir(out, features, edges, labels, split):
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "features.csv", "w") as f:
        for row in features:
            f.write(",".join(fmt(v) for v in row))
            f.write("\n")
    with open(out / "edges.csv", "w") as f:
        for u, v in edges:
            f.write(f"{u},{v}\n")
    with open(out / "labels.csv", "w") as f:
        for label in labels:
            f.write(f"{int(label)}\n")
    (out / "split.json").write_text(json.dumps(split))


def convert(raw, name, out):
    features, edges, labels, split = load_planetoid(Path(raw), name)
    write_dir(Path(out), features, edges, labels, split)
    counts = np.bincount(labels[split["train"]])
    print(
        f"{name}: {features.shape[0]} nodes, {features.shape[1]} features, {len(edges)} edges, "
        f"{labels.max() + 1} classes, train per class {counts.tolist()}, "
        f"val {len(split['val'])}, test {len(split['test'])} -> {out}"
    )


def fake_planetoid(raw, name):
    """Tiny Planetoid-format set with one featureless test id."""
    rng = np.random.default_rng(0)
    classes, d = 3, 4
    n_all, test_ids = 509, [511, 509, 512]  # 510 has no features
    dense = rng.integers(0, 2, size=(n_all + 4, d)).astype(float)
    onehot = np.eye(classes)[np.arange(n_all + 4) % classes]
    parts = {
        "x": sp.csr_matrix(dense[:6]),
        "y": onehot[:6],
        "allx": sp.csr_matrix(dense[:n_all]),
        "ally": onehot[:n_all],
        "tx": sp.csr_matrix(dense[test_ids]),  # rows follow test.index order
        "ty": onehot[test_ids],
        "graph": {0: [1, 2, 0], 1: [0], 2: [0, 511], 511: [2]},
    }
    for part, value in parts.items():
        with open(raw / f"ind.{name}.{part}", "wb") as f:
            pickle.dump(value, f)
    (raw / f"ind.{name}.test.index").write_text("\n".join(map(str, test_ids)) + "\n")
    return dense, onehot.argmax(axis=1), test_ids


def self_test():
    with tempfile.TemporaryDirectory() as tmp:
        raw, out = Path(tmp) / "raw", Path(tmp) / "out"
        raw.mkdir()
        dense, labels, test_ids = fake_planetoid(raw, "toy")
        convert(raw, "toy", out)
        feats = np.loadtxt(out / "features.csv", delimiter=",")
        got_labels = np.loadtxt(out / "labels.csv", dtype=int)
        split = json.loads((out / "split.json").read_text())
        edges = [tuple(map(int, l.split(","))) for l in (out / "edges.csv").read_text().split()]

        assert feats.shape == (513, 4), feats.shape
        assert np.array_equal(feats[:509], dense[:509])
        for i in test_ids:
            assert np.array_equal(feats[i], dense[i]), i
            assert got_labels[i] == labels[i], i
        assert not feats[510].any() and got_labels[510] == 0
        assert split["train"] == list(range(6))
        assert split["val"] == list(range(6, 506))
        assert split["test"] == sorted(test_ids)
        assert edges == [(0, 1), (0, 2), (2, 511)], edges
    print("self-test passed")


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--raw", help="directory holding ind.<name>.* files")
    p.add_argument("--name", help="cora, citeseer or pubmed")
    p.add_argument("--out", help="output dataset directory")
    p.add_argument("--self-test", action="store_true", help="convert a fabricated set and check it")
    args = p.parse_args()
    if args.self_test:
        self_test()
        return 0
    if not (args.raw and args.name and args.out):
        p.error("--raw, --name and --out are required")
    convert(args.raw, args.name, args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
