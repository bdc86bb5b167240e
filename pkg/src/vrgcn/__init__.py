"""Variance-reduced stochastic training for graph convolutional networks."""

from . import _threads  # noqa: F401  (must run before numpy loads BLAS)

from .sparse import SparseMatrix, PropagationMatrix, build_propagation, spmm, row_sums
from .graphs import Graph, validate_graph, load_graph_dir, save_graph_dir, generate_sbm
from .sampling import (LayerPlan, ReceptiveFieldPlan, build_receptive_fields,
                       build_importance_plan, sample_importance_layer,
                       expectation_of_p_hat, scale_for_cvd, embed_columns)
from .history import HistoryStore
from .instrument import OpCounter
from .autodiff import (Tape, backward, finite_difference_gradient, grad_check)
from .model import (ModelParams, ForwardResult, init_params, preprocess_input,
                    forward_exact, forward_ns, forward_is, forward_cv,
                    forward_cvd, attach_loss, loss_and_gradients,
                    grad_check_model)
from .training import (TrainConfig, TrainReport, train, evaluate,
                       exact_test_forward, exact_training_loss,
                       save_checkpoint, load_checkpoint)
from .variance import (VarianceBreakdown, analytic_sampling_variance,
                       enumerate_subset_variance, table2_breakdown,
                       gradient_bias_std, correlation_diagnostics)
from .fastdropout import (GaussianActivation, moments_input, moments_dropout,
                          moments_linear, moments_layernorm, moments_relu,
                          moments_ns_aggregate, moments_cv_aggregate,
                          sample_from_moments)
from .estimator import GCNClassifier

__version__ = "0.1.0"

__all__ = [
    "SparseMatrix", "PropagationMatrix", "build_propagation", "spmm", "row_sums",
    "Graph", "validate_graph", "load_graph_dir", "save_graph_dir", "generate_sbm",
    "LayerPlan", "ReceptiveFieldPlan", "build_receptive_fields",
    "build_importance_plan", "sample_importance_layer", "expectation_of_p_hat",
    "scale_for_cvd", "embed_columns", "HistoryStore", "OpCounter",
    "Tape", "backward", "finite_difference_gradient", "grad_check",
    "ModelParams", "ForwardResult", "init_params", "preprocess_input",
    "forward_exact", "forward_ns", "forward_is", "forward_cv", "forward_cvd",
    "attach_loss", "loss_and_gradients", "grad_check_model",
    "TrainConfig", "TrainReport", "train", "evaluate", "exact_test_forward",
    "exact_training_loss", "save_checkpoint", "load_checkpoint",
    "VarianceBreakdown", "analytic_sampling_variance",
    "enumerate_subset_variance", "table2_breakdown", "gradient_bias_std",
    "correlation_diagnostics",
    "GaussianActivation", "moments_input", "moments_dropout", "moments_linear",
    "moments_layernorm", "moments_relu", "moments_ns_aggregate",
    "moments_cv_aggregate", "sample_from_moments",
    "GCNClassifier",
    "__version__",
]
