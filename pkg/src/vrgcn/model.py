"""Graph convolutional forward passes for every aggregation estimator.

Layer recipe (dropout sits after aggregation, so each output row owns its
mask row): U = aggregate(H), Z = Dropout(U) @ W, H = relu(Z) except at the
output layer. Setting the propagation matrix to the identity turns every
variant into a plain MLP.

With `preprocess=True` the layer-0 aggregate P @ X is computed once ahead of
training and layer 0 becomes dense; plans then start at layer 1.

Estimators:

    exact   full propagation over all nodes
    ns      sampled propagation (plan rows only)
    is      like ns but on layer-wise importance-sampled plans
    cv      sampled propagation of (H - history) plus exact propagation of
            history; the exact term uses full neighborhoods of output rows
    cvd     cv with separate dropout and mean tracks so the history stores
            dropout-free activations; the zero-mean (H - mean) term is
            aggregated under a rescaled matrix (see sampling.scale_for_cvd)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import sparse as sp
from .autodiff import Tape, backward
from .sampling import scale_for_cvd

ESTIMATORS = ("exact", "ns", "is", "cv", "cvd")


@dataclass
class ModelParams:
    weights: list

    @property
    def num_layers(self):
        return len(self.weights)

    @property
    def layer_dims(self):
        dims = [self.weights[0].shape[0]]
        dims.extend(w.shape[1] for w in self.weights)
        return tuple(dims)

    def copy(self):
        return ModelParams([w.copy() for w in self.weights])


def init_params(layer_dims, seed=0):
    """Glorot-uniform weights; `layer_dims` = (input, hidden..., classes)."""
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    weights = []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    return ModelParams(weights)


@dataclass
class ForwardResult:
    logits: object            # autodiff Node, rows follow output_nodes
    output_nodes: np.ndarray  # global node ids of the logits rows
    weight_nodes: list
    tape: Tape
    activations: dict = field(default_factory=dict)  # layer -> (nodes, values)

    @property
    def logit_values(self):
        return self.logits.value


def preprocess_input(prop, features, counter=None):
    """The dense layer-0 aggregate P @ X, computed once before training."""
    return sp.spmm(prop.matrix, np.asarray(features, dtype=np.float64), counter)


def _input_rows(features, nodes, counter):
    if counter is not None:
        counter.record_input_rows(nodes)
    return np.asarray(features, dtype=np.float64)[nodes]


def _maybe_dropout(tape, node, keep_prob, rng):
    if keep_prob >= 1.0 or rng is None:
        return node
    mask = (rng.random(node.value.shape) < keep_prob).astype(np.float64)
    return tape.dropout(node, mask, keep_prob)


def _dense(tape, a, w, counter):
    if counter is not None:
        counter.record_gemm(a.value.shape[0], w.value.shape[0], w.value.shape[1])
    return tape.matmul(a, w)


def forward_exact(prop, features, params, *, keep_prob=1.0, dropout_rng=None,
                  preprocessed=None, counter=None):
    tape = Tape()
    weight_nodes = [tape.leaf(w) for w in params.weights]
    V = prop.matrix.shape[0]
    all_nodes = np.arange(V)
    X = _input_rows(features, all_nodes, counter)
    H = tape.constant(X)
    activations = {0: (all_nodes, X)}
    L = params.num_layers
    Z = None
    for l in range(L):
        if l == 0 and preprocessed is not None:
            U = tape.constant(preprocessed)
        else:
            U = tape.spmm(prop.matrix, H, counter)
        U = _maybe_dropout(tape, U, keep_prob, dropout_rng)
        Z = _dense(tape, U, weight_nodes[l], counter)
        if l < L - 1:
            H = tape.relu(Z)
            activations[l + 1] = (all_nodes, H.value)
    return ForwardResult(logits=Z, output_nodes=all_nodes,
                         weight_nodes=weight_nodes, tape=tape,
                         activations=activations)


def _check_plan(plan, params, preprocessed):
    L = params.num_layers
    start = 1 if plan.preprocess else 0
    if plan.preprocess and preprocessed is None:
        raise ValueError("plan expects a preprocessed layer-0 aggregate")
    got = [lp.layer for lp in plan.layers]
    if got != list(range(start, L)):
        raise ValueError(f"plan covers layers {got}, model needs {list(range(start, L))}")


def _sampled_skeleton(plan, features, params, preprocessed, counter, tape,
                      aggregate, keep_prob, dropout_rng, record):
    """Shared driver for the plan-based forwards. `aggregate(lp, H)` returns
    the pre-dropout aggregation node for one sampled layer; `record(l, nodes,
    node)` hooks activation bookkeeping."""
    weight_nodes = [tape.leaf(w) for w in params.weights]
    L = params.num_layers
    activations = {}
    if plan.preprocess:
        U = tape.constant(_input_rows(preprocessed, plan.base_nodes, counter))
        U = _maybe_dropout(tape, U, keep_prob, dropout_rng)
        Z = _dense(tape, U, weight_nodes[0], counter)
        H = tape.relu(Z) if L > 1 else None
        if H is not None:
            record(1, plan.base_nodes, H, activations)
    else:
        X = _input_rows(features, plan.base_nodes, counter)
        H = tape.constant(X)
        activations[0] = (plan.base_nodes, X)
        Z = None
    for lp in plan.layers:
        U = aggregate(lp, H)
        U = _maybe_dropout(tape, U, keep_prob, dropout_rng)
        Z = _dense(tape, U, weight_nodes[lp.layer], counter)
        if lp.layer < L - 1:
            H = tape.relu(Z)
            record(lp.layer + 1, lp.nodes_out, H, activations)
    out = plan.layers[-1].nodes_out if plan.layers else plan.base_nodes
    return ForwardResult(logits=Z, output_nodes=out, weight_nodes=weight_nodes,
                         tape=tape, activations=activations)


def forward_ns(plan, features, params, *, keep_prob=1.0, dropout_rng=None,
               preprocessed=None, counter=None):
    """Neighbor-sampling forward: each aggregation uses the plan's sampled
    matrix directly."""
    _check_plan(plan, params, preprocessed)
    tape = Tape()

    def aggregate(lp, H):
        return tape.spmm(lp.p_hat, H, counter)

    def record(layer, nodes, node, activations):
        activations[layer] = (nodes, node.value)

    return _sampled_skeleton(plan, features, params, preprocessed, counter,
                             tape, aggregate, keep_prob, dropout_rng, record)


def forward_is(plan, features, params, *, keep_prob=1.0, dropout_rng=None,
               preprocessed=None, counter=None):
    """Importance-sampling forward; identical math to forward_ns, but plans
    come from build_importance_plan and rows carry no self-inclusion
    guarantee (a row with no sampled neighbor aggregates to zero)."""
    return forward_ns(plan, features, params, keep_prob=keep_prob,
                      dropout_rng=dropout_rng, preprocessed=preprocessed,
                      counter=counter)


def forward_cv(plan, prop, features, params, history, *, keep_prob=1.0,
               dropout_rng=None, preprocessed=None, counter=None):
    """Control-variate forward.

    U_l = p_hat @ (H - history_rows) + P[out rows] @ history. The second term
    is constant under differentiation (history never carries gradient) and
    deliberately touches full neighborhoods.
    """
    _check_plan(plan, params, preprocessed)
    tape = Tape()

    def aggregate(lp, H):
        hbar_in = history.read_rows(lp.layer, lp.nodes_in, counter)
        stoch = tape.spmm(lp.p_hat, tape.sub(H, hbar_in), counter)
        exact_rows = prop.matrix.row_slice(lp.nodes_out)
        exact = sp.spmm(exact_rows, history.read_full(lp.layer, counter), counter)
        return tape.add(stoch, exact)

    def record(layer, nodes, node, activations):
        activations[layer] = (nodes, node.value)

    result = _sampled_skeleton(plan, features, params, preprocessed, counter,
                               tape, aggregate, keep_prob, dropout_rng, record)
    if not plan.preprocess:
        # Layer-0 "activations" are the raw features; they feed the layer-0
        # history so that P @ history converges to the exact aggregate.
        result.activations[0] = (plan.base_nodes,
                                 np.asarray(features, dtype=np.float64)[plan.base_nodes])
    return result


def forward_cvd(plan, prop, features, params, history, *, samples_per_layer,
                cvd_scaling="alg3", keep_prob=1.0, dropout_rng=None,
                preprocessed=None, counter=None):
    """Control-variate forward under dropout, with twin tracks.

    The dropout track H feeds the loss; the mean track MU (no dropout) feeds
    the history. Aggregation splits into three terms: the zero-mean residual
    (H - MU) under the variance-rescaled matrix, the sampled mean shift
    (MU - history), and the exact constant term P @ history.
    """
    _check_plan(plan, params, preprocessed)
    L = params.num_layers
    budgets = np.broadcast_to(np.asarray(samples_per_layer, dtype=np.int64), (L,))
    tape = Tape()
    weight_nodes = [tape.leaf(w) for w in params.weights]
    activations = {}

    if plan.preprocess:
        U0 = tape.constant(_input_rows(preprocessed, plan.base_nodes, counter))
        ZH = _dense(tape, _maybe_dropout(tape, U0, keep_prob, dropout_rng),
                    weight_nodes[0], counter)
        if L > 1:
            H = tape.relu(ZH)
            MU = tape.relu(_dense(tape, U0, weight_nodes[0], counter))
            activations[1] = (plan.base_nodes, MU.value)
        Z = ZH
    else:
        X = _input_rows(features, plan.base_nodes, counter)
        H = tape.constant(X)
        MU = tape.constant(X)
        activations[0] = (plan.base_nodes, X)
        Z = None

    for lp in plan.layers:
        p_bar = scale_for_cvd(lp, prop, int(budgets[lp.layer]), cvd_scaling)
        mubar_in = history.read_rows(lp.layer, lp.nodes_in, counter)
        residual = tape.spmm(p_bar, tape.sub(H, MU), counter)
        shift = tape.spmm(lp.p_hat, tape.sub(MU, mubar_in), counter)
        exact_rows = prop.matrix.row_slice(lp.nodes_out)
        exact = sp.spmm(exact_rows, history.read_full(lp.layer, counter), counter)
        U = tape.add(tape.add(residual, shift), exact)
        ZH = _dense(tape, _maybe_dropout(tape, U, keep_prob, dropout_rng),
                    weight_nodes[lp.layer], counter)
        if lp.layer < L - 1:
            H = tape.relu(ZH)
            MU = tape.relu(_dense(tape, U, weight_nodes[lp.layer], counter))
            activations[lp.layer + 1] = (lp.nodes_out, MU.value)
        Z = ZH
    out = plan.layers[-1].nodes_out if plan.layers else plan.base_nodes
    return ForwardResult(logits=Z, output_nodes=out, weight_nodes=weight_nodes,
                         tape=tape, activations=activations)


def attach_loss(result, labels, nodes, multi_label=False):
    """Cross-entropy over the given label-bearing nodes (global ids, must be
    rows of the forward result). Softmax for single-label, sigmoid-per-class
    for multi-label tasks."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        raise ValueError("loss needs at least one labeled node")
    pos = np.searchsorted(result.output_nodes, nodes)
    if np.any(pos >= result.output_nodes.size):
        raise ValueError("loss nodes must be part of the forward output")
    if not np.array_equal(result.output_nodes[pos], nodes):
        raise ValueError("loss nodes must be part of the forward output")
    tape = result.tape
    sel = tape.gather_rows(result.logits, pos)
    y = np.asarray(labels)
    if multi_label:
        return tape.sigmoid_cross_entropy_mean(sel, y[nodes])
    return tape.softmax_cross_entropy_mean(sel, y[nodes])


def loss_and_gradients(result, loss_node):
    """Run the backward pass; returns (loss value, gradient per weight)."""
    backward(result.tape, loss_node)
    grads = []
    for wn in result.weight_nodes:
        grads.append(wn.grad if wn.grad is not None else np.zeros_like(wn.value))
    return float(loss_node.value), grads


def grad_check_model(run_forward, params, *, step=1e-5):
    """Gradient check for a frozen-randomness forward closure.

    `run_forward(ModelParams) -> (loss_node, ForwardResult)` must replay the
    exact same plan, masks, and history on every call. Returns the
    per-weight maximum relative error (see autodiff.grad_check for the
    denominator convention).
    """
    from .autodiff import grad_check

    def value_fn(weights):
        loss_node, _ = run_forward(ModelParams([w for w in weights]))
        return float(loss_node.value)

    def grads_fn(weights):
        loss_node, result = run_forward(ModelParams([w for w in weights]))
        _, grads = loss_and_gradients(result, loss_node)
        return grads

    return grad_check(value_fn, grads_fn, [w.copy() for w in params.weights],
                      step=step)
