"""Receptive-field construction and stochastic propagation matrices.

A plan is built top-down from the minibatch: the aggregation at layer l maps
activation rows for `nodes_in` (global ids, sorted) to rows for `nodes_out`
through a small sampled matrix `p_hat` in local coordinates.

Two neighbor-sampling variants exist because always including the node itself
at weight n(u)/D * P_uu (variant "alg1") makes the sampled matrix biased:

    E[p_hat_uu] = P_uu * n/D,   E[p_hat_uv] = P_uv * (n/D) * (D-1)/(n-1).

Variant "unbiased" keeps the self entry at exactly P_uu and reweights the D-1
drawn neighbors by (n-1)/(D-1), which restores E[p_hat] = P at the price of
requiring D >= 2 wherever a row has non-self neighbors. Both expectations are
computable in closed form via `expectation_of_p_hat`, and the bias of "alg1"
is pinned by tests rather than papered over.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sparse import SparseMatrix

NS_VARIANTS = ("alg1", "unbiased", "full")
CVD_SCALINGS = ("alg3", "sqrt_ratio")


@dataclass
class LayerPlan:
    """Sampled aggregation for one layer: rows nodes_out, columns nodes_in."""

    layer: int
    nodes_out: np.ndarray
    nodes_in: np.ndarray
    p_hat: SparseMatrix


@dataclass
class ReceptiveFieldPlan:
    minibatch: np.ndarray
    layers: list
    preprocess: bool

    @property
    def base_nodes(self):
        """Nodes whose input rows (features, or preprocessed aggregates when
        the first layer is dense) the forward pass may touch."""
        if self.layers:
            return self.layers[0].nodes_in
        return self.minibatch


def _row_neighbors(matrix, u):
    lo, hi = matrix.indptr[u], matrix.indptr[u + 1]
    return matrix.indices[lo:hi], matrix.values[lo:hi]


def _sample_row(prop, u, degree, rng, variant):
    """One sampled row: (global column ids, weights), self always included.

    Rows are clamped when the neighborhood is smaller than the budget: "alg1"
    keeps its n/D weight (leaving the row underweighted for degree > n, a
    documented bias), "unbiased" falls back to the exact row.
    """
    cols, vals = _row_neighbors(prop.matrix, u)
    n = cols.size
    if variant == "full":
        return cols, vals.copy()
    if variant == "unbiased" and degree >= n:
        return cols, vals.copy()
    self_pos = int(np.searchsorted(cols, u))
    take = min(degree - 1, n - 1)
    if take:
        others = np.delete(np.arange(n), self_pos)
        picked = rng.choice(others, size=take, replace=False)
    else:
        picked = np.zeros(0, dtype=np.int64)
    sel = np.sort(np.concatenate(([self_pos], picked)))
    if variant == "alg1":
        weights = vals[sel] * (n / degree)
    elif variant == "unbiased":
        weights = vals[sel].copy()
        weights[sel != self_pos] *= (n - 1) / (degree - 1)
    else:
        raise ValueError(f"unknown sampling variant {variant!r}")
    return cols[sel], weights


def build_receptive_fields(prop, minibatch, num_layers, samples_per_layer, rng,
                           variant="alg1", preprocess=False):
    """Top-down plan construction over the sampled layers.

    `samples_per_layer` is a scalar or one budget per layer (absolute layer
    index). With `preprocess=True` layer 0 is dense, so it receives no plan
    and `base_nodes` are the inputs of layer 1.
    """
    if variant not in NS_VARIANTS:
        raise ValueError(f"unknown sampling variant {variant!r}")
    minibatch = np.asarray(minibatch, dtype=np.int64)
    if minibatch.size == 0:
        raise ValueError("minibatch must be nonempty")
    if np.unique(minibatch).size != minibatch.size:
        raise ValueError("minibatch has duplicate nodes")
    budgets = np.broadcast_to(np.asarray(samples_per_layer, dtype=np.int64),
                              (num_layers,))
    if variant != "full" and np.any(budgets < 1):
        raise ValueError("samples_per_layer must be >= 1")
    if variant == "unbiased":
        needs = prop.neighbor_counts[prop.neighbor_counts > 1]
        for l in range(int(preprocess), num_layers):
            if budgets[l] == 1 and needs.size:
                raise ValueError(
                    "unbiased sampling needs samples_per_layer >= 2 on graphs "
                    "with non-isolated nodes")

    layers = []
    out = np.sort(minibatch)
    for l in range(num_layers - 1, int(preprocess) - 1, -1):
        rows_cols, rows_vals = [], []
        for u in out:
            c, w = _sample_row(prop, u, int(budgets[l]), rng, variant)
            rows_cols.append(c)
            rows_vals.append(w)
        nodes_in = np.unique(np.concatenate(rows_cols))
        lookup = np.full(prop.num_nodes, -1, dtype=np.int64)
        lookup[nodes_in] = np.arange(nodes_in.size)
        counts = np.array([c.size for c in rows_cols], dtype=np.int64)
        indptr = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
        indices = lookup[np.concatenate(rows_cols)]
        values = np.concatenate(rows_vals)
        p_hat = SparseMatrix((out.size, nodes_in.size), indptr, indices, values)
        layers.append(LayerPlan(layer=l, nodes_out=out, nodes_in=nodes_in,
                                p_hat=p_hat))
        out = nodes_in
    layers.reverse()
    return ReceptiveFieldPlan(minibatch=np.sort(minibatch), layers=layers,
                              preprocess=bool(preprocess))


def expectation_of_p_hat(prop, degree, variant="alg1"):
    """Exact E[p_hat] as a full sparse matrix, row for row.

    For "unbiased" and "full" this equals the propagation matrix. For "alg1"
    the self entry carries factor n/D and the others (n/D) * min(D-1, n-1)/(n-1),
    which differs from the propagation matrix unless D = n everywhere.
    """
    if variant not in NS_VARIANTS:
        raise ValueError(f"unknown sampling variant {variant!r}")
    P = prop.matrix
    if variant in ("unbiased", "full"):
        return SparseMatrix(P.shape, P.indptr.copy(), P.indices.copy(),
                            P.values.copy(), validate=False)
    values = P.values.copy()
    for u in range(prop.num_nodes):
        lo, hi = P.indptr[u], P.indptr[u + 1]
        n = hi - lo
        factor = np.full(n, 0.0)
        if n == 1:
            factor[:] = n / degree
        else:
            factor[:] = (n / degree) * min(degree - 1, n - 1) / (n - 1)
            factor[P.indices[lo:hi] == u] = n / degree
        values[lo:hi] *= factor
    return SparseMatrix(P.shape, P.indptr.copy(), P.indices.copy(), values,
                        validate=False)


def scale_for_cvd(layer_plan, prop, degree, scheme="alg3"):
    """Weight matrix for the zero-mean dropout term of the CVD aggregation.

    "alg3" divides every sampled entry by sqrt(n(v)) of its column node.
    "sqrt_ratio" rebuilds the entry from the exact propagation value:
    sqrt(n(u)/D) * P_uv. The second reproduces the advertised variance match
    under uniform subset draws; the first does not, but is kept as the
    training default.
    """
    if scheme not in CVD_SCALINGS:
        raise ValueError(f"unknown cvd scaling {scheme!r}")
    ph = layer_plan.p_hat
    row_of = np.repeat(np.arange(ph.shape[0]), np.diff(ph.indptr))
    global_cols = layer_plan.nodes_in[ph.indices]
    if scheme == "alg3":
        values = ph.values / np.sqrt(prop.neighbor_counts[global_cols])
    else:
        P = prop.matrix
        exact = np.empty(ph.nnz)
        for k in range(ph.nnz):
            u = layer_plan.nodes_out[row_of[k]]
            lo, hi = P.indptr[u], P.indptr[u + 1]
            pos = lo + np.searchsorted(P.indices[lo:hi], global_cols[k])
            exact[k] = P.values[pos]
        n_u = prop.neighbor_counts[layer_plan.nodes_out[row_of]]
        values = np.sqrt(n_u / degree) * exact
    return SparseMatrix(ph.shape, ph.indptr.copy(), ph.indices.copy(), values,
                        validate=False)


def embed_columns(layer_plan, num_nodes):
    """The plan's sampled matrix with columns re-indexed to global node ids
    (shape rows x num_nodes). Lets plan matrices align with full-graph rows."""
    ph = layer_plan.p_hat
    return SparseMatrix((ph.shape[0], num_nodes), ph.indptr.copy(),
                        layer_plan.nodes_in[ph.indices], ph.values.copy())


def importance_distribution(prop):
    """q(v) proportional to the squared column norms of the propagation matrix."""
    P = prop.matrix
    col_sq = np.bincount(P.indices, weights=P.values ** 2,
                         minlength=prop.num_nodes)
    total = col_sq.sum()
    if total <= 0:
        raise ValueError("propagation matrix has no mass")
    return col_sq / total


def sample_importance_layer(prop, nodes_out, num_samples, rng, layer=0):
    """One layer-wise importance-sampled aggregation.

    Draws `num_samples` nodes i.i.d. from q, merges duplicates, and weights
    entry (u, v) by P_uv * count_v / (num_samples * q_v). Rows of the result
    may be empty when no sampled node hits u's neighborhood; unlike the
    neighbor samplers there is no self-inclusion guarantee.
    """
    nodes_out = np.sort(np.asarray(nodes_out, dtype=np.int64))
    q = importance_distribution(prop)
    draws = rng.choice(prop.num_nodes, size=num_samples, replace=True, p=q)
    columns, counts = np.unique(draws, return_counts=True)
    lookup = np.full(prop.num_nodes, -1, dtype=np.int64)
    lookup[columns] = np.arange(columns.size)

    sl = prop.matrix.row_slice(nodes_out)
    keep = lookup[sl.indices] >= 0
    row_of = np.repeat(np.arange(nodes_out.size), np.diff(sl.indptr))[keep]
    local_cols = lookup[sl.indices[keep]]
    scale = counts[local_cols] / (num_samples * q[columns[local_cols]])
    p_hat = SparseMatrix.from_coo((nodes_out.size, columns.size),
                                  row_of, local_cols, sl.values[keep] * scale)
    return LayerPlan(layer=layer, nodes_out=nodes_out, nodes_in=columns,
                     p_hat=p_hat)


def build_importance_plan(prop, minibatch, num_layers, num_samples, rng,
                          preprocess=False):
    """Layer-wise importance-sampling plan (top-down, like the neighbor plans)."""
    minibatch = np.asarray(minibatch, dtype=np.int64)
    samples = np.broadcast_to(np.asarray(num_samples, dtype=np.int64),
                              (num_layers,))
    layers = []
    out = np.sort(minibatch)
    for l in range(num_layers - 1, int(preprocess) - 1, -1):
        plan = sample_importance_layer(prop, out, int(samples[l]), rng, layer=l)
        layers.append(plan)
        out = plan.nodes_in
    layers.reverse()
    return ReceptiveFieldPlan(minibatch=np.sort(minibatch), layers=layers,
                              preprocess=bool(preprocess))
