"""Deterministic dropout via Gaussian moment propagation.

Activations are approximated as Gaussians with diagonal covariance,
represented by (mean, var) arrays of equal shape. Each op maps moments to
moments analytically, so a forward pass under dropout becomes deterministic;
`sample_from_moments` is the explicit cut point where a caller resumes
ordinary sampled computation (typically after the last aggregation).

The rectifier moments come from the direct second-moment identity

    E Z   = mu * (1 - Phi(a)) + sigma * phi(a)
    E Z^2 = (mu^2 + sigma^2) * (1 - Phi(a)) + mu * sigma * phi(a),  a = -mu/sigma

with Phi evaluated by scipy's complementary-error-function based ndtr, which
stays accurate deep into both tails; no Mills-ratio division appears
anywhere, so there is no 0/0 regime to guard.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .sparse import SparseMatrix


@dataclass
class GaussianActivation:
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        if self.mean.shape != self.var.shape:
            raise ValueError("mean and var must share a shape")
        if np.any(self.var < 0):
            raise ValueError("variances must be nonnegative")

    @property
    def std(self):
        return np.sqrt(self.var)


def moments_input(x):
    """Deterministic inputs: mean x, variance 0."""
    x = np.asarray(x, dtype=np.float64)
    return GaussianActivation(x.copy(), np.zeros_like(x))


def moments_dropout(g, keep_prob):
    """Inverted dropout H = (Z / p) X, Z ~ Bernoulli(p): the mean survives,
    the variance becomes (var + mean^2)/p - mean^2."""
    if not (0.0 < keep_prob <= 1.0):
        raise ValueError("keep_prob must lie in (0, 1]")
    var = (g.var + g.mean ** 2) / keep_prob - g.mean ** 2
    return GaussianActivation(g.mean.copy(), var)


def moments_linear(g, weights):
    """Z = X @ W with the covariance truncated to its diagonal:
    mean @ W, var @ (W * W)."""
    W = np.asarray(weights, dtype=np.float64)
    return GaussianActivation(g.mean @ W, g.var @ (W * W))


def moments_layernorm(g, gamma=1.0, beta=0.0, eps=1e-5):
    """Row-wise layer normalization with the batch statistics frozen at the
    means: Z = gamma * (X - m) / sqrt(v + eps) + beta, where m and v are the
    mean and variance of the row of means."""
    m = g.mean.mean(axis=-1, keepdims=True)
    v = ((g.mean - m) ** 2).mean(axis=-1, keepdims=True)
    scale = gamma / np.sqrt(v + eps)
    return GaussianActivation(scale * (g.mean - m) + beta,
                              scale ** 2 * g.var)


def moments_relu(g):
    """Moments of max(0, X) for Gaussian X; exact for true Gaussian input."""
    sigma = g.std
    mean = np.where(sigma > 0, g.mean, np.maximum(g.mean, 0.0)).astype(np.float64)
    var = np.zeros_like(g.var)
    pos = sigma > 0
    mu_p, sd_p = g.mean[pos], sigma[pos]
    alpha = -mu_p / sd_p
    upper = ndtr(-alpha)                     # 1 - Phi(alpha), tail-accurate
    phi = np.exp(-0.5 * alpha ** 2) / np.sqrt(2.0 * np.pi)
    ez = mu_p * upper + sd_p * phi
    ez2 = (mu_p ** 2 + sd_p ** 2) * upper + mu_p * sd_p * phi
    mean[pos] = ez
    var[pos] = np.maximum(ez2 - ez ** 2, 0.0)
    return GaussianActivation(mean, var)


def _as_dense(mat):
    if isinstance(mat, SparseMatrix):
        return mat.to_dense()
    return np.asarray(mat, dtype=np.float64)


def moments_ns_aggregate(p_hat, g):
    """Z = p_hat @ H for independent rows of H: mean p_hat @ mu, variance
    (p_hat * p_hat) @ var."""
    A = _as_dense(p_hat)
    return GaussianActivation(A @ g.mean, (A * A) @ g.var)


def moments_cv_aggregate(p_hat, p, g, g_hist):
    """Z = p_hat @ (H - Hbar) + P @ Hbar under the shared-noise model
    H = mu + sigma * eps, Hbar = mubar + sigmabar * eps (same eps):

        E Z   = p_hat @ (mu - mubar) + P @ mubar
        Var Z = sum_v (p_hat * (sigma - sigmabar) + P * sigmabar)^2

    expanded into three matrix products. Both matrices must share the column
    space (use sampling.embed_columns for plan matrices)."""
    A = _as_dense(p_hat)
    B = _as_dense(p)
    if A.shape != B.shape:
        raise ValueError("p_hat and p must share a shape")
    dmu = g.mean - g_hist.mean
    dsd = g.std - g_hist.std
    sbar = g_hist.std
    mean = A @ dmu + B @ g_hist.mean
    var = ((A * A) @ (dsd * dsd)
           + 2.0 * (A * B) @ (dsd * sbar)
           + (B * B) @ (sbar * sbar))
    return GaussianActivation(mean, np.maximum(var, 0.0))


def sample_from_moments(g, rng):
    """The cut back to sampled computation: one Gaussian draw per entry."""
    return g.mean + g.std * rng.standard_normal(g.mean.shape)
