"""Graph container, validation, text-format loaders, and a synthetic generator.

On-disk dataset layout (one directory per dataset):

    edges.txt      whitespace-separated "u v [weight]" lines, 0-based ids,
                   one line per undirected edge
    features.csv   one row of comma-separated floats per node
    labels.csv     "node,class" lines; multi-label datasets store a binary
                   string per node instead of a class id (e.g. "7,0110")
    train.txt / val.txt / test.txt   one node id per line
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .sparse import SparseMatrix

SPLIT_FILES = {"train": "train.txt", "val": "val.txt", "test": "test.txt"}


@dataclass
class Graph:
    adjacency: SparseMatrix
    features: np.ndarray
    labels: np.ndarray
    splits: dict = field(default_factory=dict)

    @property
    def num_nodes(self):
        return self.adjacency.shape[0]

    @property
    def num_features(self):
        return self.features.shape[1]

    @property
    def multi_label(self):
        return self.labels.ndim == 2

    @property
    def num_classes(self):
        if self.multi_label:
            return self.labels.shape[1]
        return int(self.labels.max()) + 1 if self.labels.size else 0


def validate_graph(graph):
    """Raise ValueError unless the graph satisfies every structural contract."""
    adj = graph.adjacency
    V = adj.shape[0]
    if adj.shape[0] != adj.shape[1]:
        raise ValueError("adjacency must be square")
    row_of = np.repeat(np.arange(V), np.diff(adj.indptr))
    if np.any(row_of == adj.indices):
        raise ValueError("self loops are not allowed in the adjacency")
    if adj.nnz and np.any(adj.values < 0):
        raise ValueError("edge weights must be nonnegative")
    at = adj.transpose()
    if not (np.array_equal(at.indptr, adj.indptr)
            and np.array_equal(at.indices, adj.indices)
            and np.array_equal(at.values, adj.values)):
        raise ValueError("adjacency must be symmetric")
    feats = np.asarray(graph.features)
    if feats.ndim != 2 or feats.shape[0] != V:
        raise ValueError(f"features must be (num_nodes, d), got {feats.shape}")
    if not np.all(np.isfinite(feats)):
        raise ValueError("features must be finite")
    labels = np.asarray(graph.labels)
    if labels.ndim == 1:
        if labels.shape[0] != V:
            raise ValueError("labels must have one entry per node")
        if labels.size and labels.min() < 0:
            raise ValueError("class ids must be nonnegative")
    elif labels.ndim == 2:
        if labels.shape[0] != V:
            raise ValueError("labels must have one row per node")
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("multi-label matrix must be 0/1")
    else:
        raise ValueError("labels must be a vector of class ids or a 0/1 matrix")
    seen = np.zeros(V, dtype=bool)
    for name, ids in graph.splits.items():
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= V):
            raise ValueError(f"split '{name}' has out-of-range node ids")
        if np.unique(ids).size != ids.size:
            raise ValueError(f"split '{name}' has duplicate node ids")
        if np.any(seen[ids]):
            raise ValueError(f"split '{name}' overlaps another split")
        seen[ids] = True
    return graph


def load_edge_list(path, num_nodes):
    """Read "u v [weight]" lines into a symmetric adjacency matrix."""
    rows, cols, vals = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) not in (2, 3):
                raise ValueError(f"{path}:{lineno}: expected 'u v [weight]'")
            u, v = int(parts[0]), int(parts[1])
            w = float(parts[2]) if len(parts) == 3 else 1.0
            if u == v:
                raise ValueError(f"{path}:{lineno}: self loop {u}-{v} not allowed")
            if not (0 <= u < num_nodes and 0 <= v < num_nodes):
                raise ValueError(f"{path}:{lineno}: node id out of range")
            rows.extend((u, v))
            cols.extend((v, u))
            vals.extend((w, w))
    return SparseMatrix.from_coo((num_nodes, num_nodes), rows, cols, vals)


def load_features_csv(path):
    feats = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    return feats


def load_labels_csv(path, num_nodes):
    """Read "node,label" lines; binary-string labels mean a multi-label task."""
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                node_s, label_s = line.split(",", 1)
                node = int(node_s)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: expected 'node,label'") from exc
            if not (0 <= node < num_nodes):
                raise ValueError(f"{path}:{lineno}: node id out of range")
            pairs.append((node, label_s.strip()))
    tokens = [t for _, t in pairs]
    multi = bool(tokens) and all(
        len(t) >= 2 and set(t) <= {"0", "1"} for t in tokens)
    if multi:
        width = len(tokens[0])
        if any(len(t) != width for t in tokens):
            raise ValueError(f"{path}: binary label strings must share a length")
        labels = np.zeros((num_nodes, width), dtype=np.int64)
        for node, token in pairs:
            labels[node] = [int(c) for c in token]
    else:
        labels = np.zeros(num_nodes, dtype=np.int64)
        for node, token in pairs:
            labels[node] = int(token)
    return labels


def load_split_file(path):
    with open(path) as fh:
        text = fh.read()
    if not text.strip():
        return np.zeros(0, dtype=np.int64)
    return np.array([int(tok) for tok in text.split()], dtype=np.int64)


def load_graph_dir(path):
    feats = load_features_csv(os.path.join(path, "features.csv"))
    V = feats.shape[0]
    adj = load_edge_list(os.path.join(path, "edges.txt"), V)
    labels = load_labels_csv(os.path.join(path, "labels.csv"), V)
    splits = {}
    for name, fname in SPLIT_FILES.items():
        fpath = os.path.join(path, fname)
        if os.path.exists(fpath):
            splits[name] = load_split_file(fpath)
    return validate_graph(Graph(adj, feats, labels, splits))


def save_graph_dir(graph, path):
    os.makedirs(path, exist_ok=True)
    adj = graph.adjacency
    row_of = np.repeat(np.arange(graph.num_nodes), np.diff(adj.indptr))
    with open(os.path.join(path, "edges.txt"), "w") as fh:
        for u, v, w in zip(row_of, adj.indices, adj.values):
            if u < v:  # one line per undirected edge
                fh.write(f"{u} {v} {w:.17g}\n")
    np.savetxt(os.path.join(path, "features.csv"), graph.features,
               delimiter=",", fmt="%.17g")
    with open(os.path.join(path, "labels.csv"), "w") as fh:
        if graph.multi_label:
            for node, row in enumerate(graph.labels):
                fh.write(f"{node},{''.join(str(int(b)) for b in row)}\n")
        else:
            for node, label in enumerate(graph.labels):
                fh.write(f"{node},{int(label)}\n")
    for name, fname in SPLIT_FILES.items():
        if name in graph.splits:
            np.savetxt(os.path.join(path, fname), graph.splits[name], fmt="%d")
    return path


def generate_sbm(num_nodes=32, num_communities=2, p_in=0.3, p_out=0.02,
                 feature_noise=2.5, feature_signal=1.0, extra_feature_dim=0,
                 labeled_per_community=4, val_per_community=4, seed=0):
    """Stochastic block model with noisy one-hot community features.

    Features are signal * onehot(community) plus Gaussian noise, so the label
    is recoverable from a single node only weakly; neighborhood averaging
    (communities are assortative when p_in > p_out) denoises it.
    """
    if num_nodes % num_communities:
        raise ValueError("num_nodes must be divisible by num_communities")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_communities), num_nodes // num_communities)
    labels = rng.permutation(labels).astype(np.int64)

    upper = np.triu(np.ones((num_nodes, num_nodes), dtype=bool), k=1)
    same = labels[:, None] == labels[None, :]
    prob = np.where(same, p_in, p_out)
    draw = rng.random((num_nodes, num_nodes))
    mask = upper & (draw < prob)
    rows, cols = np.nonzero(mask | mask.T)
    adj = SparseMatrix.from_coo((num_nodes, num_nodes), rows, cols,
                                np.ones(rows.size))

    dim = num_communities + extra_feature_dim
    feats = rng.normal(0.0, feature_noise, size=(num_nodes, dim))
    feats[np.arange(num_nodes), labels] += feature_signal

    splits = {"train": [], "val": [], "test": []}
    for c in range(num_communities):
        members = rng.permutation(np.flatnonzero(labels == c))
        n_tr, n_va = labeled_per_community, val_per_community
        splits["train"].extend(members[:n_tr])
        splits["val"].extend(members[n_tr:n_tr + n_va])
        splits["test"].extend(members[n_tr + n_va:])
    splits = {k: np.sort(np.asarray(v, dtype=np.int64)) for k, v in splits.items()}
    return validate_graph(Graph(adj, feats, labels, splits))
