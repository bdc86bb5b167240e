"""scikit-learn style facade over the functional trainer.

GCNClassifier works on Graph objects instead of flat (X, y) pairs: the graph
carries features, labels, and splits together because the aggregation model
needs the adjacency at both fit and predict time. get_params/set_params and
clone-compatibility come from sklearn's BaseEstimator, so the class composes
with model-selection tooling that treats the graph as an opaque X.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .graphs import Graph, load_graph_dir, validate_graph
from .model import forward_exact
from .sparse import build_propagation
from .training import TrainConfig, evaluate, train


def ensure_graph(data):
    """Accept a Graph or a dataset directory path; validate either way."""
    if isinstance(data, Graph):
        return validate_graph(data)
    if isinstance(data, (str,)) or hasattr(data, "__fspath__"):
        return load_graph_dir(data)
    raise TypeError(f"expected a Graph or dataset path, got {type(data)!r}")


def check_fitted(est):
    if not hasattr(est, "params_"):
        raise RuntimeError("this GCNClassifier instance is not fitted yet")
    return est


class GCNClassifier(BaseEstimator):
    """Semi-supervised node classifier with sampled graph convolutions.

    Parameters mirror TrainConfig; see its docstring for semantics. The
    defaults follow the citation-graph recipe: one 32-unit hidden layer,
    Adam at 0.01, dropout 0.5, weight decay 5e-4, layer-0 preprocessing,
    control-variate aggregation with 2 sampled neighbors.
    """

    def __init__(self, estimator="cv", hidden_dims=(32,), samples_per_layer=2,
                 minibatch_size=8, epochs=200, optimizer="adam",
                 learning_rate=0.01, dropout_rate=0.5, weight_decay=5e-4,
                 lr_schedule="constant", epoch_scan="all-nodes",
                 preprocess=True, sampler_variant="alg1", cvd_scaling="alg3",
                 seed=0):
        self.estimator = estimator
        self.hidden_dims = hidden_dims
        self.samples_per_layer = samples_per_layer
        self.minibatch_size = minibatch_size
        self.epochs = epochs
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.dropout_rate = dropout_rate
        self.weight_decay = weight_decay
        self.lr_schedule = lr_schedule
        self.epoch_scan = epoch_scan
        self.preprocess = preprocess
        self.sampler_variant = sampler_variant
        self.cvd_scaling = cvd_scaling
        self.seed = seed

    def _config(self):
        return TrainConfig(
            estimator=self.estimator, hidden_dims=tuple(self.hidden_dims),
            samples_per_layer=self.samples_per_layer,
            minibatch_size=self.minibatch_size, epochs=self.epochs,
            optimizer=self.optimizer, learning_rate=self.learning_rate,
            lr_schedule=self.lr_schedule, dropout_rate=self.dropout_rate,
            weight_decay=self.weight_decay, epoch_scan=self.epoch_scan,
            preprocess=self.preprocess, sampler_variant=self.sampler_variant,
            cvd_scaling=self.cvd_scaling, seed=self.seed,
        ).validate()

    def fit(self, graph, y=None):
        """Train on the graph's train split. `y` is accepted for API
        compatibility and must be None (labels live on the graph)."""
        if y is not None:
            raise ValueError("labels are carried by the graph; pass y=None")
        graph = ensure_graph(graph)
        self.params_, self.report_ = train(graph, self._config())
        self.multi_label_ = graph.multi_label
        self.classes_ = np.arange(graph.num_classes)
        return self

    def decision_function(self, graph, nodes=None):
        """Exact (deterministic, dropout-free) logits; sampling is a training
        device only."""
        check_fitted(self)
        graph = ensure_graph(graph)
        prop = build_propagation(graph.adjacency)
        logits = forward_exact(prop, graph.features, self.params_).logit_values
        return logits if nodes is None else logits[np.asarray(nodes)]

    def predict_proba(self, graph, nodes=None):
        z = self.decision_function(graph, nodes)
        if self.multi_label_:
            return 1.0 / (1.0 + np.exp(-z))
        m = z.max(axis=1, keepdims=True)
        e = np.exp(z - m)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, graph, nodes=None):
        z = self.decision_function(graph, nodes)
        if self.multi_label_:
            return (z > 0.0).astype(np.int64)
        return np.argmax(z, axis=1)

    def score(self, graph, y=None, split="test"):
        """Accuracy (or micro-F1 for multi-label tasks) on a stored split."""
        check_fitted(self)
        if y is not None:
            raise ValueError("labels are carried by the graph; pass y=None")
        graph = ensure_graph(graph)
        metrics = evaluate(graph, self.params_, split=split)
        return metrics["micro_f1"] if self.multi_label_ else metrics["accuracy"]
