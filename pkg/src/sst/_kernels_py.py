"""Pure-numpy implementations of the training hot kernels.

This is the fallback backend; ``sst._kernels`` (Cython) implements the same
four functions with fused loops.  Both backends are deterministic on a given
machine, but they accumulate sums in different orders, so results agree only
to rounding error across backends.  Elementwise operations (ReLU, the SGD
update) are written with identical association in both and match bit for bit.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def forward(x, weights, biases, keep_hidden):
    """Forward pass through an affine/ReLU stack.

    Returns ``(logits, hidden)`` where ``hidden`` lists the post-ReLU
    activations of each hidden layer (empty unless ``keep_hidden``).
    """
    hidden = []
    a = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = a @ w + b
        if i < last:
            a = np.maximum(z, 0.0)
            if keep_hidden:
                hidden.append(a)
        else:
            a = z
    return a, hidden


def softmax_xent(logits, labels):
    """Summed cross-entropy and its unscaled logits gradient.

    Returns ``(sum_loss, grad)`` with ``grad = softmax(logits) - onehot``;
    divide both by the row count for the mean loss.  Uses the log-sum-exp
    shift, so arbitrarily large logits do not overflow.
    """
    m = logits.max(axis=1)
    ex = np.exp(logits - m[:, None])
    se = ex.sum(axis=1)
    rows = np.arange(logits.shape[0])
    sum_loss = float(np.sum(m + np.log(se) - logits[rows, labels]))
    grad = ex / se[:, None]
    grad[rows, labels] -= 1.0
    return sum_loss, grad


def backward(x, weights, hidden, dlogits):
    """Backpropagate ``dlogits`` through the stack; returns (dws, dbs).

    ``hidden`` must be the list produced by ``forward(..., keep_hidden=True)``.
    The ReLU mask is taken from the activations (a > 0 iff pre-activation > 0).
    """
    dws = [None] * len(weights)
    dbs = [None] * len(weights)
    delta = dlogits
    for l in range(len(weights) - 1, -1, -1):
        a_prev = x if l == 0 else hidden[l - 1]
        dws[l] = a_prev.T @ delta
        dbs[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ weights[l].T) * (hidden[l - 1] > 0.0)
    return dws, dbs


def sgd_update(weights, biases, vel_w, vel_b, dws, dbs, lr, momentum, weight_decay):
    """Heavy-ball SGD with coupled L2 decay, in place, per tensor:

    v <- momentum * v + (grad + weight_decay * w);  w <- w - lr * v
    """
    for w, v, g in zip(weights, vel_w, dws):
        v[...] = momentum * v + (g + weight_decay * w)
        w -= lr * v
    for b, v, g in zip(biases, vel_b, dbs):
        v[...] = momentum * v + (g + weight_decay * b)
        b -= lr * v
