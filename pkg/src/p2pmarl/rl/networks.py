"""Small fully connected networks in plain numpy with hand-written backprop.

Parameters live in a flat dict: ``W0, b0, W1, b1, ...`` with ``W_k`` of shape
(fan_in, fan_out), plus an optional ``log_std`` vector for Gaussian policies.
Hidden layers use tanh; the last layer is linear.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

Params = dict[str, np.ndarray]


def glorot_init(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    """Glorot/Xavier uniform weights on [-L, L], L = sqrt(6 / (fan_in + fan_out))."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError("fan_in and fan_out must be at least 1")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def mlp_init(sizes: Sequence[int], rng: np.random.Generator, log_std: np.ndarray | None = None) -> Params:
    params: Params = {}
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"W{k}"] = glorot_init(fan_in, fan_out, rng)
        params[f"b{k}"] = np.zeros(fan_out)
    if log_std is not None:
        params["log_std"] = np.array(log_std, dtype=float)
    return params


def n_layers(params: Params) -> int:
    return sum(1 for key in params if key.startswith("W"))


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def mlp_forward(params: Params, x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Evaluate the network on one input vector or a batch of row vectors.

    Returns the output and the list of layer inputs needed by ``mlp_gradient``.
    """
    h = np.asarray(x, dtype=float)
    L = n_layers(params)
    if h.shape[-1] != params["W0"].shape[0]:
        raise ValueError(f"input dimension {h.shape[-1]} does not match network ({params['W0'].shape[0]})")
    cache = []
    for k in range(L):
        cache.append(h)
        z = h @ params[f"W{k}"] + params[f"b{k}"]
        h = np.tanh(z) if k < L - 1 else z
    return h, cache


def mlp_gradient(params: Params, cache: list[np.ndarray], upstream) -> Params:
    """Reverse-mode gradients of ``sum(upstream * output)`` w.r.t. weights and biases.

    For a batch the per-sample gradients are summed.
    """
    L = n_layers(params)
    delta = np.asarray(upstream, dtype=float)
    grads: Params = {}
    for k in range(L - 1, -1, -1):
        h_in = cache[k]
        if h_in.ndim == 1:
            grads[f"W{k}"] = np.outer(h_in, delta)
            grads[f"b{k}"] = delta.copy()
        else:
            grads[f"W{k}"] = h_in.T @ delta
            grads[f"b{k}"] = delta.sum(axis=0)
        if k > 0:
            # h_in is tanh of the previous pre-activation
            delta = (delta @ params[f"W{k}"].T) * (1.0 - h_in**2)
    return grads
