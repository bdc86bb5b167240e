import numpy as np
import pytest

from vrgcn import Graph, SparseMatrix, build_propagation, validate_graph
from vrgcn.verify import random_graph


def make_path3():
    """The 3-node path 0-1-2 with unit weights."""
    rows = np.array([0, 1, 1, 2])
    cols = np.array([1, 0, 2, 1])
    return SparseMatrix.from_coo((3, 3), rows, cols, np.ones(4))


def make_two_node():
    rows = np.array([0, 1])
    cols = np.array([1, 0])
    return SparseMatrix.from_coo((2, 2), rows, cols, np.ones(2))


def make_ring(n):
    idx = np.arange(n)
    rows = np.concatenate([idx, (idx + 1) % n])
    cols = np.concatenate([(idx + 1) % n, idx])
    return SparseMatrix.from_coo((n, n), rows, cols, np.ones(2 * n))


def make_empty(n):
    z = np.zeros(0, dtype=np.int64)
    return SparseMatrix.from_coo((n, n), z, z, np.zeros(0))


def small_graph(seed=0, num_nodes=5, num_classes=2, dim=3, edge_prob=0.5):
    """Random labeled graph with everything in the train split."""
    rng = np.random.default_rng(seed)
    adj = random_graph(num_nodes, edge_prob, rng)
    feats = rng.normal(size=(num_nodes, dim))
    labels = rng.integers(0, num_classes, num_nodes)
    splits = {"train": np.arange(num_nodes),
              "val": np.zeros(0, np.int64), "test": np.zeros(0, np.int64)}
    return validate_graph(Graph(adj, feats, labels, splits))


@pytest.fixture
def path3():
    return make_path3()


@pytest.fixture
def path3_prop():
    return build_propagation(make_path3())


@pytest.fixture
def two_node_prop():
    return build_propagation(make_two_node())
