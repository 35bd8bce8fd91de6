"""Minimal dense-MLP machinery: Fourier features, forward/backward, Adam.

No ML framework involved; everything is plain numpy so the same code runs
the training loop and the renderers. Weights are row-major (out, in) per
layer. Forward accepts a single vector or a (batch, in) matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SOFTPLUS = "softplus"
RELU = "relu"
SIGMOID = "sigmoid"
IDENTITY = "identity"

ACTIVATIONS = (IDENTITY, RELU, SOFTPLUS, SIGMOID)

# stable codes for serialization
ACTIVATION_CODES = {IDENTITY: 0, RELU: 1, SOFTPLUS: 2, SIGMOID: 3}
ACTIVATION_NAMES = {v: k for k, v in ACTIVATION_CODES.items()}


def softplus(x: np.ndarray) -> np.ndarray:
    """ln(1 + e^x) with the overflow-safe split for large |x|."""
    out = np.abs(x)
    np.negative(out, out)
    np.exp(out, out)
    np.log1p(out, out)
    out += np.maximum(x, 0.0)
    return out


def sigmoid(x: np.ndarray) -> np.ndarray:
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def apply_activation(name: str, x: np.ndarray) -> np.ndarray:
    if name == IDENTITY:
        return x
    if name == RELU:
        return np.maximum(x, 0.0)
    if name == SOFTPLUS:
        return softplus(x)
    if name == SIGMOID:
        return sigmoid(x)
    raise ValueError(f"unknown activation {name!r}")


def activation_grad(name: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    """d(activation)/d(pre-activation), from whichever of pre/post is cheaper."""
    if name == IDENTITY:
        return np.ones_like(pre)
    if name == RELU:
        return (pre > 0).astype(pre.dtype)
    if name == SOFTPLUS:
        return sigmoid(pre)
    if name == SIGMOID:
        return post * (1.0 - post)
    raise ValueError(f"unknown activation {name!r}")


def fourier_encode(x: np.ndarray, L: int) -> np.ndarray:
    """Positional encoding (x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{L-1} pi x), cos(2^{L-1} pi x)).

    Layout: the raw input first, then one sin block and one cos block per
    frequency, lowest frequency first. An n-vector maps to n + 2nL values.
    Accepts (n,) or (batch, n) arrays.
    """
    if L < 0:
        raise ValueError("L must be >= 0")
    x = np.asarray(x)
    single = x.ndim == 1
    pts = x[None, :] if single else x
    m, n = pts.shape
    out = np.empty((m, n + 2 * n * L), dtype=pts.dtype)
    out[:, :n] = pts
    if L > 0:
        arg = np.pi * pts
        np.sin(arg, out=out[:, n : 2 * n])
        np.cos(arg, out=out[:, 2 * n : 3 * n])
        # double-angle recurrence: sin(2a) = 2 sin a cos a, cos(2a) = 1 - 2 sin^2 a
        s = np.ascontiguousarray(out[:, n : 2 * n])
        c = np.ascontiguousarray(out[:, 2 * n : 3 * n])
        for k in range(1, L):
            s, c = 2.0 * s * c, 1.0 - 2.0 * s * s
            lo = n + 2 * n * k
            out[:, lo : lo + n] = s
            out[:, lo + n : lo + 2 * n] = c
    return out[0] if single else out


def encoded_dim(n: int, L: int) -> int:
    return n + 2 * n * L


@dataclass
class TinyMlp:
    """A dense feedforward net: one weight matrix (out, in), bias and activation per layer."""

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        n_layers = len(self.layer_dims) - 1
        if n_layers < 1:
            raise ValueError("need at least one layer")
        if not (len(self.weights) == len(self.biases) == len(self.activations) == n_layers):
            raise ValueError("weights/biases/activations must match layer count")
        for k in range(n_layers):
            expect = (self.layer_dims[k + 1], self.layer_dims[k])
            if self.weights[k].shape != expect:
                raise ValueError(f"layer {k}: weight shape {self.weights[k].shape}, expected {expect}")
            if self.biases[k].shape != (self.layer_dims[k + 1],):
                raise ValueError(f"layer {k}: bias shape {self.biases[k].shape}")
            if self.activations[k] not in ACTIVATIONS:
                raise ValueError(f"layer {k}: unknown activation {self.activations[k]!r}")

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


def mlp_init(layer_dims: list[int], activations: list[str], seed: int, dtype=np.float32) -> TinyMlp:
    """Uniform(+-sqrt(6/fan_in)) weights, zero biases; bit-reproducible per seed."""
    if len(layer_dims) < 2:
        raise ValueError("layer_dims needs input and output sizes")
    if any(d <= 0 for d in layer_dims):
        raise ValueError("layer dims must be positive")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return TinyMlp(list(layer_dims), weights, biases, list(activations))


def mlp_forward(mlp: TinyMlp, x: np.ndarray) -> np.ndarray:
    """Sequential affine+activation pass. x is (in,) or (batch, in)."""
    x = np.asarray(x)
    if x.shape[-1] != mlp.in_dim:
        raise ValueError(f"input dim {x.shape[-1]} != {mlp.in_dim}")
    h = x
    for W, b, act in zip(mlp.weights, mlp.biases, mlp.activations):
        h = apply_activation(act, h @ W.T + b)
    return h


def mlp_forward_cached(mlp: TinyMlp, x: np.ndarray):
    """Forward pass keeping per-layer pre/post activations for backward."""
    x = np.asarray(x)
    pre, post = [], [x]
    h = x
    for W, b, act in zip(mlp.weights, mlp.biases, mlp.activations):
        z = h @ W.T + b
        h = apply_activation(act, z)
        pre.append(z)
        post.append(h)
    return h, (pre, post)


def mlp_backward(mlp: TinyMlp, x: np.ndarray, output_grad: np.ndarray):
    """Exact reverse-mode gradients of mlp_forward.

    Returns ((weight_grads, bias_grads), input_grad). For batched input the
    parameter gradients are summed over the batch and input_grad is per-row.
    """
    x = np.asarray(x)
    output_grad = np.asarray(output_grad)
    if output_grad.shape[-1] != mlp.out_dim:
        raise ValueError(f"output_grad dim {output_grad.shape[-1]} != {mlp.out_dim}")
    if output_grad.shape[:-1] != x.shape[:-1]:
        raise ValueError("output_grad batch shape must match input")
    _, (pre, post) = mlp_forward_cached(mlp, x)
    single = x.ndim == 1
    g = output_grad[None, :] if single else output_grad
    w_grads = [None] * len(mlp.weights)
    b_grads = [None] * len(mlp.weights)
    for k in range(len(mlp.weights) - 1, -1, -1):
        zk = pre[k][None, :] if single else pre[k]
        ak = post[k][None, :] if single else post[k]
        hk = post[k + 1][None, :] if single else post[k + 1]
        gz = g * activation_grad(mlp.activations[k], zk, hk)
        w_grads[k] = gz.T @ ak
        b_grads[k] = gz.sum(axis=0)
        g = gz @ mlp.weights[k]
    input_grad = g[0] if single else g
    return (w_grads, b_grads), input_grad


@dataclass
class AdamState:
    """Adam moments for one parameter set (lists mirroring the param arrays)."""

    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: list[np.ndarray], lr: float = 1e-3) -> AdamState:
    return AdamState(
        first_moment=[np.zeros_like(p) for p in params],
        second_moment=[np.zeros_like(p) for p in params],
        lr=lr,
    )


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]):
    """One bias-corrected Adam update, in place; returns (params, state)."""
    if len(params) != len(state.first_moment) or len(params) != len(grads):
        raise ValueError("params/grads/state length mismatch")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for tensor #{i}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
