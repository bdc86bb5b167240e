"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tape records nodes in creation order; `backward` walks them once in
reverse, so each vector-Jacobian product runs exactly one time. Sparse
matrices enter only as constants of the `spmm` op (their adjoint is the
transposed product; no gradient flows into the matrix itself). The rectifier
uses subgradient 0 at exactly 0.
"""

from __future__ import annotations

import numpy as np

from . import sparse as sp


class Node:
    __slots__ = ("value", "parents", "grad", "requires_grad")

    def __init__(self, value, parents=(), requires_grad=False):
        self.value = value
        self.parents = parents  # tuple of (Node, vjp callable)
        self.grad = None
        self.requires_grad = requires_grad


class Tape:
    def __init__(self):
        self.nodes = []

    def _record(self, value, parents=(), requires_grad=None):
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p, _ in parents)
        node = Node(value, parents, requires_grad)
        self.nodes.append(node)
        return node

    def leaf(self, value):
        """Differentiable input; `backward` leaves its gradient on `.grad`."""
        return self._record(np.asarray(value, dtype=np.float64),
                            requires_grad=True)

    def constant(self, value):
        return self._record(np.asarray(value, dtype=np.float64),
                            requires_grad=False)

    def _wrap(self, x):
        return x if isinstance(x, Node) else self.constant(x)

    # ---- ops ----

    def matmul(self, a, b):
        a, b = self._wrap(a), self._wrap(b)
        value = a.value @ b.value
        parents = (
            (a, lambda g, b=b: g @ b.value.T),
            (b, lambda g, a=a: a.value.T @ g),
        )
        return self._record(value, parents)

    def spmm(self, matrix, h, counter=None):
        """matrix (SparseMatrix, constant) @ h."""
        h = self._wrap(h)
        value = sp.spmm(matrix, h.value, counter)
        cache = {}

        def vjp(g):
            if "t" not in cache:
                cache["t"] = matrix.transpose()
            return sp.spmm(cache["t"], g)

        return self._record(value, ((h, vjp),))

    def add(self, a, b):
        a, b = self._wrap(a), self._wrap(b)
        parents = ((a, lambda g: g), (b, lambda g: g))
        return self._record(a.value + b.value, parents)

    def sub(self, a, b):
        a, b = self._wrap(a), self._wrap(b)
        parents = ((a, lambda g: g), (b, lambda g: -g))
        return self._record(a.value - b.value, parents)

    def scale(self, a, c):
        a = self._wrap(a)
        c = float(c)
        return self._record(a.value * c, ((a, lambda g: g * c),))

    def relu(self, a):
        a = self._wrap(a)
        value = np.maximum(a.value, 0.0)
        keep = a.value > 0.0
        return self._record(value, ((a, lambda g: g * keep),))

    def dropout(self, a, mask, keep_prob):
        """Inverted dropout with an externally drawn 0/1 mask."""
        a = self._wrap(a)
        if not (0.0 < keep_prob <= 1.0):
            raise ValueError("keep_prob must lie in (0, 1]")
        scaled = np.asarray(mask, dtype=np.float64) / keep_prob
        if scaled.shape != a.value.shape:
            raise ValueError("mask shape must match the input")
        return self._record(a.value * scaled, ((a, lambda g: g * scaled),))

    def gather_rows(self, a, idx):
        a = self._wrap(a)
        idx = np.asarray(idx, dtype=np.int64)

        def vjp(g):
            out = np.zeros_like(a.value)
            np.add.at(out, idx, g)
            return out

        return self._record(a.value[idx], ((a, vjp),))

    def sum_all(self, a):
        a = self._wrap(a)
        shape = a.value.shape
        return self._record(float(np.sum(a.value)),
                            ((a, lambda g: np.full(shape, g)),))

    def softmax_cross_entropy_mean(self, logits, labels):
        """Mean over rows of -log softmax(z)[y]; stable via max subtraction."""
        logits = self._wrap(logits)
        labels = np.asarray(labels, dtype=np.int64)
        z = logits.value
        if z.ndim != 2 or labels.shape != (z.shape[0],):
            raise ValueError("logits must be (rows, classes), labels (rows,)")
        m = z.max(axis=1, keepdims=True)
        lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
        value = float(np.mean(lse[:, 0] - z[np.arange(z.shape[0]), labels]))
        probs = np.exp(z - lse)

        def vjp(g):
            out = probs.copy()
            out[np.arange(z.shape[0]), labels] -= 1.0
            return out * (g / z.shape[0])

        return self._record(value, ((logits, vjp),))

    def sigmoid_cross_entropy_mean(self, logits, targets):
        """Multi-label loss: per node, sum over labels of the binary cross
        entropy of sigmoid(z); averaged over nodes."""
        logits = self._wrap(logits)
        y = np.asarray(targets, dtype=np.float64)
        z = logits.value
        if z.shape != y.shape:
            raise ValueError("logits and targets must share a shape")
        # softplus(z) - z*y, with softplus(z) = max(z, 0) + log1p(exp(-|z|))
        per_entry = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))) - z * y
        value = float(per_entry.sum(axis=1).mean())
        sig = 1.0 / (1.0 + np.exp(-z))

        def vjp(g):
            return (sig - y) * (g / z.shape[0])

        return self._record(value, ((logits, vjp),))


def backward(tape, root):
    """Accumulate gradients of the scalar `root` into `.grad` of every node
    on the tape that requires one."""
    for node in tape.nodes:
        node.grad = None
    if np.ndim(root.value) != 0:
        raise ValueError("backward starts from a scalar loss")
    root.grad = 1.0
    for node in reversed(tape.nodes):
        if node.grad is None or not node.parents:
            continue
        for parent, vjp in node.parents:
            if not parent.requires_grad:
                continue
            g = vjp(node.grad)
            parent.grad = g if parent.grad is None else parent.grad + g


def finite_difference_gradient(fn, params, step=1e-5):
    """Central differences of a scalar function of a list of arrays."""
    grads = []
    for k, p in enumerate(params):
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn(params)
            flat[i] = orig - step
            fm = fn(params)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def grad_check(loss_fn, grads_fn, params, step=1e-5):
    """Compare analytic gradients against central differences.

    Relative error uses denominator max(|fd|, 1e-3 * max(1, max|fd|)): a
    plain relative error except that entries far below the gradient's own
    scale are compared at a floor, since central differences carry ~1e-10
    absolute noise in float64.

    Returns the per-parameter maximum relative error as a list.
    """
    analytic = grads_fn(params)
    numeric = finite_difference_gradient(loss_fn, params, step=step)
    errors = []
    for ga, gf in zip(analytic, numeric):
        floor = 1e-3 * max(1.0, float(np.max(np.abs(gf))) if gf.size else 1.0)
        denom = np.maximum(np.abs(gf), floor)
        errors.append(float(np.max(np.abs(ga - gf) / denom)) if gf.size else 0.0)
    return errors
