"""Minibatch training loop, optimizers, evaluation, checkpoints, and the
fixed-weight exactness demonstration for the control-variate estimator.

Orderings that matter:

* history rows are written after the optimizer step, from activations
  computed during the iteration's forward pass (so the stored state always
  lags the weights by one step);
* the per-epoch reported training loss is the deterministic full-graph loss
  over the training labels, recomputed at every epoch end, which makes runs
  with different estimators comparable epoch for epoch;
* a non-finite loss aborts training and returns the last epoch-end
  checkpoint instead of the poisoned parameters.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .history import HistoryStore
from .instrument import OpCounter
from .sampling import (CVD_SCALINGS, NS_VARIANTS, build_importance_plan,
                       build_receptive_fields)
from .sparse import build_propagation

SCANS = ("labeled", "all-nodes")
OPTIMIZERS = ("adam", "sgd")
SCHEDULES = ("constant", "invsqrt")


@dataclass
class TrainConfig:
    estimator: str = "cv"
    hidden_dims: tuple = (32,)
    samples_per_layer: int = 2     # neighbors per row (ns/cv/cvd) or draws (is)
    minibatch_size: int = 0        # 0 means one full batch per epoch
    epochs: int = 200
    optimizer: str = "adam"
    learning_rate: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_schedule: str = "constant"
    dropout_rate: float = 0.0      # probability of zeroing an entry
    weight_decay: float = 0.0
    epoch_scan: str = "labeled"    # which nodes the minibatch partition covers
    preprocess: bool = False
    sampler_variant: str = "alg1"
    cvd_scaling: str = "alg3"
    seed: int = 0

    def validate(self):
        if self.estimator not in M.ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in SCHEDULES:
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.epoch_scan not in SCANS:
            raise ValueError(f"unknown epoch scan {self.epoch_scan!r}")
        if self.sampler_variant not in NS_VARIANTS:
            raise ValueError(f"unknown sampler variant {self.sampler_variant!r}")
        if self.cvd_scaling not in CVD_SCALINGS:
            raise ValueError(f"unknown cvd scaling {self.cvd_scaling!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if not all(int(h) > 0 for h in self.hidden_dims):
            raise ValueError("hidden_dims must be positive")
        if np.any(np.asarray(self.samples_per_layer) < 1):
            raise ValueError("samples_per_layer must be >= 1")
        return self

    @property
    def keep_prob(self):
        return 1.0 - self.dropout_rate

    @property
    def num_layers(self):
        return len(self.hidden_dims) + 1


@dataclass
class TrainReport:
    epoch_losses: list = field(default_factory=list)
    epoch_val_metrics: list = field(default_factory=list)  # nan if no val split
    epoch_wall_times: list = field(default_factory=list)
    epoch_counters: list = field(default_factory=list)     # cumulative totals
    minibatch_losses: list = field(default_factory=list)
    steps: int = 0
    aborted: bool = False
    abort_epoch: int = 0
    abort_reason: str = ""
    counter: OpCounter = field(default_factory=OpCounter)
    history: HistoryStore = None
    history_values: int = 0


class Sgd:
    def __init__(self, params):
        pass

    def step(self, weights, grads, lr):
        for w, g in zip(weights, grads):
            w -= lr * g


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(w) for w in params.weights]
        self.v = [np.zeros_like(w) for w in params.weights]
        self.t = 0

    def step(self, weights, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for w, g, m, v in zip(weights, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            w -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _make_optimizer(config, params):
    if config.optimizer == "adam":
        return Adam(params, config.adam_beta1, config.adam_beta2, config.adam_eps)
    return Sgd(params)


def _history_dims(config, layer_dims):
    start = 1 if config.preprocess else 0
    return {l: layer_dims[l] for l in range(start, len(layer_dims) - 1)}


def _forward(config, prop, graph, params, plan, history, dropout_rng, counter,
             preprocessed):
    kp = config.keep_prob
    kwargs = dict(keep_prob=kp, dropout_rng=dropout_rng,
                  preprocessed=preprocessed, counter=counter)
    if config.estimator == "exact":
        return M.forward_exact(prop, graph.features, params, **kwargs)
    if config.estimator == "ns":
        return M.forward_ns(plan, graph.features, params, **kwargs)
    if config.estimator == "is":
        return M.forward_is(plan, graph.features, params, **kwargs)
    if config.estimator == "cv":
        return M.forward_cv(plan, prop, graph.features, params, history, **kwargs)
    return M.forward_cvd(plan, prop, graph.features, params, history,
                         samples_per_layer=config.samples_per_layer,
                         cvd_scaling=config.cvd_scaling, **kwargs)


def _build_plan(config, prop, batch, plan_rng):
    if config.estimator == "exact":
        return None
    if config.estimator == "is":
        return build_importance_plan(prop, batch, config.num_layers,
                                     config.samples_per_layer, plan_rng,
                                     preprocess=config.preprocess)
    variant = "full" if config.estimator == "exact" else config.sampler_variant
    return build_receptive_fields(prop, batch, config.num_layers,
                                  config.samples_per_layer, plan_rng,
                                  variant=variant, preprocess=config.preprocess)


def exact_training_loss(prop, graph, params, train_nodes, preprocessed=None):
    """Deterministic full-graph loss over the training labels (the quantity
    curves are plotted against, whatever estimator produced the step)."""
    result = M.forward_exact(prop, graph.features, params,
                             preprocessed=preprocessed)
    loss = M.attach_loss(result, graph.labels, train_nodes,
                         multi_label=graph.multi_label)
    return float(loss.value)


def _split_metric(graph, logits, nodes):
    picked = logits[nodes]
    if graph.multi_label:
        return micro_f1(picked > 0.0, graph.labels[nodes] > 0)
    return float(np.mean(np.argmax(picked, axis=1) == graph.labels[nodes]))


def train(graph, config):
    """Train per the config; returns (ModelParams, TrainReport)."""
    config.validate()
    prop = build_propagation(graph.adjacency)
    X = np.asarray(graph.features, dtype=np.float64)
    counter = OpCounter()
    preprocessed = M.preprocess_input(prop, X, counter) if config.preprocess else None

    layer_dims = (graph.num_features, *map(int, config.hidden_dims),
                  graph.num_classes)
    init_ss, shuffle_ss, plan_ss, drop_ss = \
        np.random.SeedSequence(config.seed).spawn(4)
    params = M.init_params(layer_dims, np.random.default_rng(init_ss))
    shuffle_rng = np.random.default_rng(shuffle_ss)
    plan_rng = np.random.default_rng(plan_ss)
    dropout_rng = np.random.default_rng(drop_ss)

    train_nodes = np.sort(np.asarray(graph.splits["train"], dtype=np.int64))
    if train_nodes.size == 0:
        raise ValueError("training requires a nonempty train split")
    is_train = np.zeros(graph.num_nodes, dtype=bool)
    is_train[train_nodes] = True

    history = None
    if config.estimator in ("cv", "cvd"):
        history = HistoryStore(graph.num_nodes, _history_dims(config, layer_dims))

    pool = np.arange(graph.num_nodes) if config.epoch_scan == "all-nodes" \
        else train_nodes
    batch_size = config.minibatch_size if config.minibatch_size > 0 else pool.size

    report = TrainReport(history=history,
                         history_values=history.num_values() if history else 0)
    optimizer = _make_optimizer(config, params)
    last_good = params.copy()
    step_index = 0
    val_nodes = np.sort(np.asarray(graph.splits.get("val", ()), dtype=np.int64))

    for epoch in range(1, config.epochs + 1):
        epoch_start = time.perf_counter()
        order = shuffle_rng.permutation(pool)
        epoch_batch_losses = []
        aborted = False
        for lo in range(0, order.size, batch_size):
            batch = np.sort(order[lo:lo + batch_size])
            labeled = batch[is_train[batch]]
            plan = _build_plan(config, prop, batch, plan_rng)
            result = _forward(config, prop, graph, params, plan, history,
                              dropout_rng, counter, preprocessed)
            if labeled.size:
                loss_node = M.attach_loss(result, graph.labels, labeled,
                                          multi_label=graph.multi_label)
                loss_value, grads = M.loss_and_gradients(result, loss_node)
                if not np.isfinite(loss_value):
                    report.aborted, report.abort_epoch = True, epoch
                    report.abort_reason = (
                        f"non-finite minibatch loss at epoch {epoch}")
                    aborted = True
                    break
                if config.weight_decay:
                    for g, w in zip(grads, params.weights):
                        g += 2.0 * config.weight_decay * w
                step_index += 1
                lr = config.learning_rate
                if config.lr_schedule == "invsqrt":
                    lr = lr / np.sqrt(step_index)
                optimizer.step(params.weights, grads, lr)
                epoch_batch_losses.append(loss_value)
            # History is written after the step, from this iteration's
            # activations (computed under the pre-step weights).
            if history is not None:
                for layer, (nodes, values) in result.activations.items():
                    history.write_rows(layer, nodes, values)
        if aborted:
            break
        if history is not None:
            history.epoch += 1
        # Epoch-end bookkeeping runs uninstrumented: the counters account for
        # training cost only.
        eval_result = M.forward_exact(prop, graph.features, params,
                                      preprocessed=preprocessed)
        epoch_loss = float(M.attach_loss(eval_result, graph.labels, train_nodes,
                                         multi_label=graph.multi_label).value)
        if not np.isfinite(epoch_loss):
            report.aborted, report.abort_epoch = True, epoch
            report.abort_reason = f"non-finite training loss at epoch {epoch}"
            break
        report.epoch_losses.append(epoch_loss)
        report.epoch_val_metrics.append(
            _split_metric(graph, eval_result.logit_values, val_nodes)
            if val_nodes.size else float("nan"))
        report.minibatch_losses.append(
            float(np.mean(epoch_batch_losses)) if epoch_batch_losses else np.nan)
        report.epoch_counters.append({
            "spmm_multiplies": counter.spmm_multiplies,
            "gemm_multiplies": counter.gemm_multiplies,
            "input_rows_read": counter.input_rows_read,
            "history_rows_read": counter.history_rows_read,
        })
        report.epoch_wall_times.append(time.perf_counter() - epoch_start)
        last_good = params.copy()

    report.steps = step_index
    report.counter = counter
    if report.aborted:
        return last_good, report
    return params, report


def predict_logits(graph, params):
    prop = build_propagation(graph.adjacency)
    result = M.forward_exact(prop, graph.features, params)
    return result.logit_values


def micro_f1(predicted, actual):
    predicted = np.asarray(predicted, dtype=bool)
    actual = np.asarray(actual, dtype=bool)
    tp = int(np.sum(predicted & actual))
    fp = int(np.sum(predicted & ~actual))
    fn = int(np.sum(~predicted & actual))
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2.0 * tp / denom


def evaluate(graph, params, split="test"):
    """Deterministic evaluation: exact forward, no dropout. Reports accuracy
    (argmax, ties to the lowest class id) or micro-F1 (sigmoid threshold 0.5)
    for multi-label tasks, plus the split loss."""
    nodes = np.sort(np.asarray(graph.splits[split], dtype=np.int64))
    if nodes.size == 0:
        raise ValueError(f"split {split!r} is empty")
    prop = build_propagation(graph.adjacency)
    result = M.forward_exact(prop, graph.features, params)
    loss = M.attach_loss(result, graph.labels, nodes,
                         multi_label=graph.multi_label)
    logits = result.logit_values[nodes]
    out = {"loss": float(loss.value), "count": int(nodes.size)}
    if graph.multi_label:
        out["micro_f1"] = micro_f1(logits > 0.0, graph.labels[nodes] > 0)
    else:
        pred = np.argmax(logits, axis=1)
        out["accuracy"] = float(np.mean(pred == graph.labels[nodes]))
    return out


def exact_test_forward(graph, params, *, samples_per_layer=2, minibatch_size=8,
                       preprocess=False, sampler_variant="alg1", warm_epochs=None,
                       seed=0):
    """Fixed-weight control-variate inference that becomes exact.

    Runs forward-only epochs over partitions of every node, writing history
    after each minibatch; after as many epochs as there are stochastic
    layers, every history row equals the exact activation, so one further
    assembly pass reproduces the exact output logits row for row (to
    float64 roundoff; the residual is pinned below 1e-9 by tests).
    """
    prop = build_propagation(graph.adjacency)
    X = np.asarray(graph.features, dtype=np.float64)
    preprocessed = M.preprocess_input(prop, X) if preprocess else None
    L = params.num_layers
    layer_dims = params.layer_dims
    start = 1 if preprocess else 0
    history = HistoryStore(graph.num_nodes,
                           {l: layer_dims[l] for l in range(start, L)})
    if warm_epochs is None:
        warm_epochs = L - start
    rng = np.random.default_rng(seed)
    plan_rng = np.random.default_rng(seed + 1)

    def one_pass(collect=None):
        order = rng.permutation(graph.num_nodes)
        bs = minibatch_size if minibatch_size > 0 else graph.num_nodes
        for lo in range(0, order.size, bs):
            batch = np.sort(order[lo:lo + bs])
            plan = build_receptive_fields(prop, batch, L, samples_per_layer,
                                          plan_rng, variant=sampler_variant,
                                          preprocess=preprocess)
            result = M.forward_cv(plan, prop, X, params, history,
                                  preprocessed=preprocessed)
            for layer, (nodes, values) in result.activations.items():
                history.write_rows(layer, nodes, values)
            if collect is not None:
                collect[batch] = result.logit_values

    for _ in range(warm_epochs):
        one_pass()
    Z = np.zeros((graph.num_nodes, layer_dims[-1]))
    one_pass(collect=Z)
    return Z


def save_checkpoint(path, params, *, estimator="exact", seed=0, epoch=0):
    """Weights as concatenated row-major little-endian float64, with a JSON
    sidecar (same path + '.json') recording layer_dims/estimator/seed/epoch."""
    with open(path, "wb") as fh:
        for w in params.weights:
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
    meta = {"layer_dims": list(params.layer_dims), "estimator": estimator,
            "seed": int(seed), "epoch": int(epoch)}
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")
    return path


def load_checkpoint(path):
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    dims = meta["layer_dims"]
    weights = []
    with open(path, "rb") as fh:
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            buf = fh.read(8 * fan_in * fan_out)
            weights.append(np.frombuffer(buf, dtype="<f8")
                           .reshape(fan_in, fan_out).astype(np.float64))
    return M.ModelParams(weights), meta
