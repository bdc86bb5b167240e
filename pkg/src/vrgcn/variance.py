"""Variance calculus for the aggregation estimators, plus empirical probes.

Closed forms use the scalar one-dimensional model: a node u with n
neighborhood members (self included), exact weights p_v, activations
h_v = mu_v + ring_v with ring_v ~ N(0, s_v) independent across nodes, and an
i.i.d.-history copy hbar_v with mean mu_v - delta_v and the same s_v. The
subset nhat(u) holds D members drawn uniformly without replacement; the
importance of u itself is not special-cased here (that is a property of the
receptive-field sampler, not of the variance model).

Key quantities, with S = sum_v p_v^2 s_v and C = 1 - (D-1)/(n-1):

    subset variance of (n/D) sum_{v in nhat} x_v
        = C/(2D) * sum_{v1,v2} (x_{v1} - x_{v2})^2          (x fixed numbers)

    estimator
 variance from subsets      variance from dropout
    exact          0                            S
    ns             formula above on p*mu        (n/D) S
    cv             formula above on p*delta     (2n/D - 1) S
    cvd            formula above on p*delta     S

The cv dropout factor is (2n/D - 1), not the published (3 + n/D): at D = n
the estimator degenerates to exact-plus-history-noise whose variance is S,
which forces the coefficient to 1; expanding the cross terms confirms
E[(h - hbar)ring terms] contributes -2S and the squared residual 2(n/D)S.
Monte-Carlo checks in the test suite pin both routes against each other.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import comb

import numpy as np

from . import model as M
from .sampling import build_importance_plan, build_receptive_fields

SCALAR_ESTIMATORS = ("exact", "ns", "cv", "cvd")


def _corrected_c(n, D):
    if not 1 <= D <= n:
        raise ValueError("need 1 <= D <= n")
    if n == 1:
        return 0.0
    return 1.0 - (D - 1) / (n - 1)


def analytic_sampling_variance(values, D, weights=None):
    """Variance of the scaled subset sum (n/D) * sum_{v in nhat} x_v over
    uniform without-replacement D-subsets of the n fixed numbers x."""
    x = np.asarray(values, dtype=np.float64)
    if weights is not None:
        x = x * np.asarray(weights, dtype=np.float64)
    n = x.size
    C = _corrected_c(n, D)
    # sum over ordered pairs (x_i - x_j)^2 = 2n sum x^2 - 2 (sum x)^2
    pair_sum = 2.0 * n * np.sum(x * x) - 2.0 * np.sum(x) ** 2
    return C / (2.0 * D) * pair_sum


def enumerate_subset_variance(values, D, weights=None, limit=2_000_000):
    """The same variance by brute-force enumeration of all C(n, D) subsets."""
    x = np.asarray(values, dtype=np.float64)
    if weights is not None:
        x = x * np.asarray(weights, dtype=np.float64)
    n = x.size
    if not 1 <= D <= n:
        raise ValueError("need 1 <= D <= n")
    if comb(n, D) > limit:
        raise ValueError(f"C({n},{D}) exceeds the enumeration limit")
    estimates = np.array([(n / D) * sum(x[list(sub)])
                          for sub in combinations(range(n), D)])
    return float(np.mean((estimates - estimates.mean()) ** 2))


@dataclass
class VarianceBreakdown:
    estimator: str
    from_sampling: float   # variance contributed by the subset draw
    from_dropout: float    # variance contributed by the mask randomness

    @property
    def total(self):
        return self.from_sampling + self.from_dropout


def table2_breakdown(estimator, p_row, mu, s, delta, D):
    """Closed-form variance split for one scalar aggregation."""
    p = np.asarray(p_row, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    n = p.size
    S = float(np.sum(p * p * s))
    if estimator == "exact":
        return VarianceBreakdown(estimator, 0.0, S)
    if estimator == "ns":
        return VarianceBreakdown(
            estimator, analytic_sampling_variance(mu, D, weights=p), (n / D) * S)
    if estimator == "cv":
        return VarianceBreakdown(
            estimator, analytic_sampling_variance(delta, D, weights=p),
            (2.0 * n / D - 1.0) * S)
    if estimator == "cvd":
        return VarianceBreakdown(
            estimator, analytic_sampling_variance(delta, D, weights=p), S)
    raise ValueError(f"unknown scalar estimator {estimator!r}")


def _uniform_subset_masks(rng, draws, n, D):
    order = np.argsort(rng.random((draws, n)), axis=1)
    mask = np.zeros((draws, n))
    np.put_along_axis(mask, order[:, :D], 1.0, axis=1)
    return mask


def mc_estimator_values(estimator, p_row, mu, s, delta, D, draws, rng):
    """Monte-Carlo draws of the scalar estimator under the model above."""
    p = np.asarray(p_row, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    sd = np.sqrt(np.asarray(s, dtype=np.float64))
    delta = np.asarray(delta, dtype=np.float64)
    n = p.size
    h = mu + sd * rng.standard_normal((draws, n))
    if estimator == "exact":
        return (p * h).sum(axis=1)
    hbar = (mu - delta) + sd * rng.standard_normal((draws, n))
    mask = _uniform_subset_masks(rng, draws, n, D)
    if estimator == "ns":
        return (n / D) * (p * h * mask).sum(axis=1)
    if estimator == "cv":
        return ((n / D) * (p * (h - hbar) * mask).sum(axis=1)
                + (p * hbar).sum(axis=1))
    if estimator == "cvd":
        # Dropout-free track mu is exact under this model; the history stores
        # its stale copy mu - delta. The residual h - mu rides the
        # sqrt(n/D)-rescaled weights.
        return (np.sqrt(n / D) * (p * (h - mu) * mask).sum(axis=1)
                + (n / D) * (p * (mu - (mu - delta)) * mask).sum(axis=1)
                + (p * (mu - delta)).sum())
    raise ValueError(f"unknown scalar estimator {estimator!r}")


def mc_variance(samples):
    """Empirical variance plus its asymptotic standard error
    sqrt((m4 - var^2) / N)."""
    x = np.asarray(samples, dtype=np.float64)
    var = float(np.mean((x - x.mean()) ** 2))
    m4 = float(np.mean((x - x.mean()) ** 4))
    se = float(np.sqrt(max(m4 - var * var, 0.0) / x.size))
    return var, se


def gradient_bias_std(prop, features, labels, labeled_nodes, params, config,
                      draws, seed, history=None, multi_label=False,
                      minibatch_size=None):
    """Bias and spread of stochastic weight gradients, layer by layer.

    Samples `draws` minibatch gradients at fixed weights (fresh plan, mask,
    and, when `minibatch_size` is given, a fresh uniform labeled minibatch per
    draw), compares their mean to the exact full-batch gradient, and reports
    per layer:

        bias_l = mean_entry |E ghat - g*| / mean_entry |W_l|
        std_l  = mean_entry std(ghat)    / mean_entry |W_l|
    """
    from .training import _build_plan, _forward
    from types import SimpleNamespace

    features = np.asarray(features, dtype=np.float64)
    graph_like = SimpleNamespace(features=features)
    preprocessed = M.preprocess_input(prop, features) if config.preprocess \
        else None
    plan_rng = np.random.default_rng(seed)
    drop_rng = np.random.default_rng(seed + 1)
    batch_rng = np.random.default_rng(seed + 2)
    labeled = np.sort(np.asarray(labeled_nodes, dtype=np.int64))

    sums = [np.zeros_like(w) for w in params.weights]
    sumsq = [np.zeros_like(w) for w in params.weights]
    for _ in range(draws):
        if minibatch_size is not None and minibatch_size < labeled.size:
            batch = np.sort(batch_rng.choice(labeled, size=minibatch_size,
                                             replace=False))
        else:
            batch = labeled
        plan = _build_plan(config, prop, batch, plan_rng)
        result = _forward(config, prop, graph_like, params, plan, history,
                          drop_rng, None, preprocessed)
        loss_node = M.attach_loss(result, labels, batch, multi_label=multi_label)
        _, grads = M.loss_and_gradients(result, loss_node)
        for acc, acc2, g in zip(sums, sumsq, grads):
            acc += g
            acc2 += g * g

    exact_result = M.forward_exact(prop, features, params,
                                   preprocessed=preprocessed)
    exact_loss = M.attach_loss(exact_result, labels, labeled,
                               multi_label=multi_label)
    _, exact_grads = M.loss_and_gradients(exact_result, exact_loss)

    biases, stds = [], []
    for acc, acc2, g_star, w in zip(sums, sumsq, exact_grads, params.weights):
        mean = acc / draws
        var = np.maximum(acc2 / draws - mean * mean, 0.0)
        scale = float(np.mean(np.abs(w)))
        biases.append(float(np.mean(np.abs(mean - g_star))) / scale)
        stds.append(float(np.mean(np.sqrt(var))) / scale)
    return biases, stds


def correlation_diagnostics(prop, features, params, plan, *, keep_prob,
                            draws=1000, seed=0, variance_floor=1e-12):
    """Empirical activation correlations under a fixed plan and random masks.

    Reruns the sampled forward `draws` times with fresh dropout masks and, for
    every hidden layer l >= 1, reports:

        feature correlation: corr(h_v[i], h_v[j]) averaged over nodes v and
        dimension pairs i != j;
        neighbor correlation: for each aggregation row of layer l and each
        dimension d, corr(h_i[d], h_j[d]) over the row's sampled neighbor
        pairs i != j, averaged over rows and dimensions.

    Pairs whose variance falls below `variance_floor` (dead rectifier units,
    constant activations) are skipped and counted.
    """
    if keep_prob >= 1.0:
        raise ValueError("correlation diagnostics need dropout (keep_prob < 1)")
    X = np.asarray(features, dtype=np.float64)
    rng = np.random.default_rng(seed)
    preprocessed = M.preprocess_input(prop, X) if plan.preprocess else None
    layer_nodes = {}
    records = {}
    for _ in range(draws):
        result = M.forward_ns(plan, X, params, keep_prob=keep_prob,
                              dropout_rng=rng, preprocessed=preprocessed)
        for layer, (nodes, values) in result.activations.items():
            if layer == 0:
                continue  # inputs are deterministic
            layer_nodes[layer] = nodes
            records.setdefault(layer, []).append(values)

    out = {}
    for layer, stack in sorted(records.items()):
        samples = np.stack(stack)              # (draws, rows, dims)
        nodes = layer_nodes[layer]
        mean = samples.mean(axis=0)
        centered = samples - mean
        var = (centered ** 2).mean(axis=0)
        sd = np.sqrt(var)

        # feature correlation: per node, across dimension pairs
        feat_vals, feat_skipped = [], 0
        dims = samples.shape[2]
        for r in range(samples.shape[1]):
            for i in range(dims):
                for j in range(i + 1, dims):
                    if var[r, i] < variance_floor or var[r, j] < variance_floor:
                        feat_skipped += 1
                        continue
                    cov = float(np.mean(centered[:, r, i] * centered[:, r, j]))
                    feat_vals.append(cov / (sd[r, i] * sd[r, j]))

        # neighbor correlation: pairs within each aggregation row of this layer
        nb_vals, nb_skipped = [], 0
        lp = next((l for l in plan.layers if l.layer == layer), None)
        if lp is not None:
            local = {int(v): k for k, v in enumerate(nodes)}
            for r in range(lp.p_hat.shape[0]):
                lo, hi = lp.p_hat.indptr[r], lp.p_hat.indptr[r + 1]
                members = [local[int(lp.nodes_in[c])]
                           for c in lp.p_hat.indices[lo:hi]]
                for d in range(dims):
                    row_vals = []
                    for a in range(len(members)):
                        for b in range(a + 1, len(members)):
                            i, j = members[a], members[b]
                            if var[i, d] < variance_floor or var[j, d] < variance_floor:
                                nb_skipped += 1
                                continue
                            cov = float(np.mean(centered[:, i, d] * centered[:, j, d]))
                            row_vals.append(cov / (sd[i, d] * sd[j, d]))
                    if row_vals:
                        nb_vals.append(float(np.mean(row_vals)))
        out[layer] = {
            "avg_feature_corr": float(np.mean(feat_vals)) if feat_vals else 0.0,
            "avg_neighbor_corr": float(np.mean(nb_vals)) if nb_vals else 0.0,
            "feature_pairs": len(feat_vals),
            "neighbor_rows": len(nb_vals),
            "skipped_feature_pairs": feat_skipped,
            "skipped_neighbor_pairs": nb_skipped,
        }
    return out
