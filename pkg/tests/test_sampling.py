import numpy as np
import pytest

from vrgcn import (build_propagation, build_receptive_fields,
                   build_importance_plan, embed_columns, expectation_of_p_hat,
                   sample_importance_layer, scale_for_cvd, spmm)
from vrgcn.sampling import _sample_row, importance_distribution
from vrgcn.verify import random_graph

from conftest import make_empty, make_two_node, make_path3


def dense_plan_layer(lp, num_nodes):
    return embed_columns(lp, num_nodes).to_dense()


# ------------------------------------------------------------- plan shape

def test_layers_chain_and_self_inclusion():
    rng = np.random.default_rng(0)
    prop = build_propagation(random_graph(12, 0.4, rng))
    plan = build_receptive_fields(prop, np.array([1, 5, 7]), 2, 2, rng)
    assert np.array_equal(plan.minibatch, [1, 5, 7])
    assert np.array_equal(plan.layers[-1].nodes_out, [1, 5, 7])
    for a, b in zip(plan.layers[:-1], plan.layers[1:]):
        assert a.nodes_out is b.nodes_in
    for lp in plan.layers:
        dense = dense_plan_layer(lp, 12)
        for u in lp.nodes_out:
            assert dense[list(lp.nodes_out).index(u), u] > 0  # self entry
        # no duplicate columns within a row
        assert np.all(np.diff(lp.p_hat.indices[
            lp.p_hat.indptr[0]:lp.p_hat.indptr[1]]) > 0)


def test_row_budget_respected():
    rng = np.random.default_rng(1)
    prop = build_propagation(random_graph(20, 0.5, rng))
    for D in (1, 2, 3):
        plan = build_receptive_fields(prop, np.arange(20), 2, D, rng)
        for lp in plan.layers:
            assert np.max(np.diff(lp.p_hat.indptr)) <= D


def test_plan_determinism():
    rng_a = np.random.default_rng(42)
    rng_b = np.random.default_rng(42)
    prop = build_propagation(random_graph(15, 0.4, np.random.default_rng(7)))
    a = build_receptive_fields(prop, np.arange(15), 2, 2, rng_a)
    b = build_receptive_fields(prop, np.arange(15), 2, 2, rng_b)
    for la, lb in zip(a.layers, b.layers):
        assert np.array_equal(la.nodes_in, lb.nodes_in)
        assert np.array_equal(la.p_hat.indices, lb.p_hat.indices)
        assert np.array_equal(la.p_hat.values, lb.p_hat.values)


def test_full_variant_reproduces_propagation_rows():
    rng = np.random.default_rng(2)
    prop = build_propagation(random_graph(10, 0.5, rng))
    plan = build_receptive_fields(prop, np.arange(10), 2, 1, rng,
                                  variant="full")
    P = prop.matrix.to_dense()
    for lp in plan.layers:
        assert np.array_equal(dense_plan_layer(lp, 10), P)


def test_self_weighted_sampler_full_budget_equals_p_row():
    # When the budget D equals the row's neighbor count, the n/D scaling is 1
    # and the sampled row is exactly the propagation row.
    prop = build_propagation(make_path3())
    rng = np.random.default_rng(3)
    row = np.zeros(3)
    cols, weights = _sample_row(prop, 1, 3, rng, "alg1")
    row[cols] = weights
    assert np.allclose(row, prop.matrix.to_dense()[1], atol=1e-15)


def test_isolated_node_row():
    prop = build_propagation(make_empty(3))
    rng = np.random.default_rng(4)
    cols, weights = _sample_row(prop, 2, 1, rng, "alg1")
    assert np.array_equal(cols, [2])
    assert np.allclose(weights, [1.0])  # P_uu * n(u)/D = 1 * 1/1
    cols, weights = _sample_row(prop, 2, 4, rng, "alg1")
    assert np.allclose(weights, [0.25])  # clamped row keeps the 1/D scaling


def test_two_node_single_sample_row():
    prop = build_propagation(make_two_node())
    rng = np.random.default_rng(5)
    cols, weights = _sample_row(prop, 0, 1, rng, "alg1")
    assert np.array_equal(cols, [0])
    assert np.allclose(weights, [1.0])  # 0.5 * n(0)/D = 0.5 * 2


def test_self_weighted_expectation_examples():
    prop = build_propagation(make_path3())
    P = prop.matrix.to_dense()
    # middle node has n=3: budget 3 reproduces the row
    assert np.allclose(expectation_of_p_hat(prop, 3, "alg1").to_dense()[1],
                       P[1], atol=1e-15)
    # budget 1 keeps only the scaled diagonal
    e1 = expectation_of_p_hat(prop, 1, "alg1").to_dense()
    assert e1[1, 1] == pytest.approx(P[1, 1] * 3.0)
    assert e1[1, 0] == 0.0
    # budget 2, n=3: diagonal 3/2 P_uu, off-diagonals 3/4 P_uv
    e2 = expectation_of_p_hat(prop, 2, "alg1").to_dense()
    assert e2[1, 1] == pytest.approx(P[1, 1] * 1.5)
    assert e2[1, 0] == pytest.approx(P[1, 0] * 1.5 * 0.5)


def test_reweighted_expectation_is_p():
    rng = np.random.default_rng(6)
    prop = build_propagation(random_graph(9, 0.5, rng))
    for D in (2, 3):
        exp = expectation_of_p_hat(prop, D, "unbiased").to_dense()
        assert np.allclose(exp, prop.matrix.to_dense(), atol=1e-14)


@pytest.mark.parametrize("variant", ["alg1", "unbiased"])
def test_sampler_matches_closed_form_expectation(variant):
    rng = np.random.default_rng(7)
    prop = build_propagation(random_graph(6, 0.6, rng))
    D = 2
    expected = expectation_of_p_hat(prop, D, variant).to_dense()
    draws = 100_000
    acc = np.zeros((6, 6))
    acc2 = np.zeros((6, 6))
    for u in range(6):
        for _ in range(draws // 6):
            cols, weights = _sample_row(prop, u, D, rng, variant)
            row = np.zeros(6)
            row[cols] = weights
            acc[u] += row
            acc2[u] += row * row
    n_draws = draws // 6
    mean = acc / n_draws
    se = np.sqrt(np.maximum(acc2 / n_draws - mean ** 2, 0.0) / n_draws)
    gap = np.abs(mean - expected)
    assert np.all(gap <= 4.0 * np.maximum(se, 1e-15)), \
        f"worst {np.max(gap / np.maximum(se, 1e-15)):.2f} SE"


def test_reweighted_rejects_budget_one_with_neighbors():
    prop = build_propagation(make_two_node())
    with pytest.raises(ValueError):
        build_receptive_fields(prop, np.array([0]), 1, 1,
                               np.random.default_rng(0), variant="unbiased")


# ------------------------------------------------------------- cvd scaling

def test_cvd_scaling_divides_by_sqrt_degree():
    rng = np.random.default_rng(8)
    prop = build_propagation(random_graph(10, 0.5, rng))
    plan = build_receptive_fields(prop, np.arange(10), 1, 2, rng)
    lp = plan.layers[0]
    bar = scale_for_cvd(lp, prop, 2, "alg3")
    counts = prop.neighbor_counts[lp.nodes_in[lp.p_hat.indices]]
    assert np.allclose(bar.values, lp.p_hat.values / np.sqrt(counts), atol=1e-15)


def test_cvd_scaling_isolated_node_unchanged():
    prop = build_propagation(make_empty(2))
    plan = build_receptive_fields(prop, np.arange(2), 1, 1,
                                  np.random.default_rng(0))
    lp = plan.layers[0]
    bar = scale_for_cvd(lp, prop, 1, "alg3")
    assert np.allclose(bar.values, lp.p_hat.values)  # n(v) = 1


def test_cvd_scaling_two_node_full_budget():
    prop = build_propagation(make_two_node())
    plan = build_receptive_fields(prop, np.arange(2), 1, 2,
                                  np.random.default_rng(0))
    lp = plan.layers[0]
    bar = scale_for_cvd(lp, prop, 2, "alg3")
    assert np.allclose(bar.values, lp.p_hat.values / np.sqrt(2.0), atol=1e-15)


def test_cvd_sqrt_ratio_scaling_values():
    # sqrt(n(u)/D) times the exact propagation entry, whatever was sampled.
    rng = np.random.default_rng(9)
    prop = build_propagation(random_graph(8, 0.5, rng))
    plan = build_receptive_fields(prop, np.arange(8), 1, 2, rng)
    lp = plan.layers[0]
    bar = scale_for_cvd(lp, prop, 2, "sqrt_ratio")
    P = prop.matrix.to_dense()
    dense = embed_columns(
        type(lp)(lp.layer, lp.nodes_out, lp.nodes_in, bar), 8).to_dense()
    for r, u in enumerate(lp.nodes_out):
        factor = np.sqrt(prop.neighbor_counts[u] / 2.0)
        picked = dense[r] != 0
        assert np.allclose(dense[r][picked], (factor * P[u])[picked], atol=1e-15)


# ------------------------------------------------------------- importance

def test_importance_distribution_two_node():
    prop = build_propagation(make_two_node())
    q = importance_distribution(prop)
    assert np.allclose(q, [0.5, 0.5], atol=1e-15)


def test_importance_single_node():
    prop = build_propagation(make_empty(1))
    lp = sample_importance_layer(prop, np.array([0]), 1,
                                 np.random.default_rng(0))
    assert np.allclose(lp.p_hat.to_dense(), [[1.0]])


def test_importance_aggregate_is_unbiased():
    rng = np.random.default_rng(10)
    prop = build_propagation(random_graph(8, 0.5, rng))
    H = rng.normal(size=(8, 2))
    exact = spmm(prop.matrix, H)
    draws = 20_000
    acc = np.zeros_like(exact)
    acc2 = np.zeros_like(exact)
    for _ in range(draws):
        lp = sample_importance_layer(prop, np.arange(8), 4, rng)
        z = spmm(embed_columns(lp, 8), H)
        acc += z
        acc2 += z * z
    mean = acc / draws
    se = np.sqrt(np.maximum(acc2 / draws - mean ** 2, 0.0) / draws)
    assert np.all(np.abs(mean - exact) <= 4.0 * np.maximum(se, 1e-15))


def test_importance_plan_layers_chain():
    rng = np.random.default_rng(11)
    prop = build_propagation(random_graph(10, 0.4, rng))
    plan = build_importance_plan(prop, np.array([2, 3]), 2, 3, rng)
    assert [lp.layer for lp in plan.layers] == [0, 1]
    for a, b in zip(plan.layers[:-1], plan.layers[1:]):
        assert np.array_equal(a.nodes_out, b.nodes_in)
