"""Noise-prediction network: a tanh MLP over ``[x_t, time features, class embedding]``.

Everything works on batches. ``x`` is ``(B, d)``, ``t`` is ``(B,)`` integer
timesteps in ``1..T`` and ``c`` is ``(B,)`` integer labels in ``0..C-1``, or
``NULL_CLASS`` (``-1``) for the unconditional identifier, which maps to the
last row of the class embedding table.

Parameters flatten in the order W0, b0, W1, b1, ..., W_{L-1}, b_{L-1},
class_embed, each array row-major. ``W_l`` has shape ``(fan_in, fan_out)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .mathcore import Rng

NULL_CLASS = -1


class GradientOverflowError(FloatingPointError):
    pass


@dataclass
class DenoiserParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    class_embed: np.ndarray
    num_timesteps: int
    time_dim: int = 16

    @property
    def data_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def num_classes(self) -> int:
        return self.class_embed.shape[0] - 1

    @property
    def class_dim(self) -> int:
        return self.class_embed.shape[1]

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        out.append(self.class_embed)
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "DenoiserParams":
        arrays = list(arrays)
        n = len(self.weights)
        if len(arrays) != 2 * n + 1:
            raise ValueError("array count does not match the parameter structure")
        for new, old in zip(arrays, self.arrays()):
            if new.shape != old.shape:
                raise ValueError(f"shape mismatch: {new.shape} vs {old.shape}")
        return DenoiserParams(
            weights=arrays[0:2 * n:2],
            biases=arrays[1:2 * n:2],
            class_embed=arrays[-1],
            num_timesteps=self.num_timesteps,
            time_dim=self.time_dim,
        )

    def map(self, fn: Callable[..., np.ndarray], *others: "DenoiserParams") -> "DenoiserParams":
        for o in others:
            check_congruent(self, o)
        return self.with_arrays(
            [fn(*arrs) for arrs in zip(self.arrays(), *(o.arrays() for o in others))]
        )

    def size(self) -> int:
        return sum(a.size for a in self.arrays())


# GradientBuffer shares the parameter layout.
GradientBuffer = DenoiserParams


def check_congruent(a: DenoiserParams, b: DenoiserParams) -> None:
    sa = [x.shape for x in a.arrays()]
    sb = [x.shape for x in b.arrays()]
    if sa != sb:
        raise ValueError("parameter structures are not congruent")


def init_params(
    rng: Rng,
    data_dim: int,
    num_classes: int,
    num_timesteps: int,
    hidden: Sequence[int] = (64, 64),
    time_dim: int = 16,
    class_dim: int = 8,
) -> DenoiserParams:
    if time_dim % 2:
        raise ValueError("time_dim must be even")
    sizes = [data_dim + time_dim + class_dim, *hidden, data_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.normal((fan_in, fan_out)) / np.sqrt(fan_in))
        biases.append(np.zeros(fan_out))
    class_embed = rng.normal((num_classes + 1, class_dim))
    return DenoiserParams(weights, biases, class_embed, num_timesteps, time_dim)


def zeros_like(params: DenoiserParams) -> DenoiserParams:
    return params.map(np.zeros_like)


def clone(params: DenoiserParams) -> DenoiserParams:
    return params.map(np.array)


def flatten(params: DenoiserParams) -> np.ndarray:
    return np.concatenate([a.ravel() for a in params.arrays()])


def unflatten(template: DenoiserParams, vector: np.ndarray) -> DenoiserParams:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (template.size(),):
        raise ValueError("vector length does not match the parameter count")
    arrays, pos = [], 0
    for a in template.arrays():
        arrays.append(vector[pos:pos + a.size].reshape(a.shape).copy())
        pos += a.size
    return template.with_arrays(arrays)


def parameter_count(
    layer_sizes: Sequence[int], num_classes: int, class_dim: int
) -> int:
    """Closed-form count for an MLP with the given layer sizes plus the embedding table."""
    dense = sum((i + 1) * o for i, o in zip(layer_sizes[:-1], layer_sizes[1:]))
    return dense + (num_classes + 1) * class_dim


def time_features(t: np.ndarray, num_timesteps: int, time_dim: int) -> np.ndarray:
    """Sinusoidal features of ``t / T`` at frequencies geometric from 1 to ``T``."""
    half = time_dim // 2
    if half == 0:
        return np.zeros((len(t), 0))
    freqs = float(num_timesteps) ** (np.arange(half) / max(half - 1, 1))
    angles = (np.asarray(t, dtype=np.float64) / num_timesteps)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def _class_rows(params: DenoiserParams, c: np.ndarray) -> np.ndarray:
    c = np.asarray(c)
    C = params.num_classes
    if c.size and (c.min() < NULL_CLASS or c.max() >= C):
        raise ValueError("unknown class")
    return np.where(c == NULL_CLASS, C, c)


@dataclass
class ForwardPass:
    output: np.ndarray
    activations: list[np.ndarray]
    inputs: np.ndarray = field(repr=False)
    rows: np.ndarray = field(repr=False)


def forward_pass(params: DenoiserParams, x: np.ndarray, t: np.ndarray, c: np.ndarray) -> ForwardPass:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.asarray(t)
    if t.size and (t.min() < 1 or t.max() > params.num_timesteps):
        raise ValueError("timestep out of range")
    rows = _class_rows(params, c)
    z = np.concatenate(
        [x, time_features(t, params.num_timesteps, params.time_dim), params.class_embed[rows]],
        axis=1,
    )
    inputs = z
    acts = []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = z @ w + b
        if i < last:
            z = np.tanh(z)
            acts.append(z)
    return ForwardPass(z, acts, inputs, rows)


def forward(params: DenoiserParams, x, t, c) -> tuple[np.ndarray, list[np.ndarray]]:
    """Predicted noise and the post-activation output of each hidden layer."""
    fp = forward_pass(params, x, t, c)
    return fp.output, fp.activations


def vjp(
    params: DenoiserParams,
    fp: ForwardPass,
    d_output: np.ndarray,
    d_activations: Sequence[np.ndarray | None] | None = None,
) -> DenoiserParams:
    """Pull cotangents on the output (and optionally on hidden activations) back to parameters."""
    n = len(params.weights)
    d_activations = list(d_activations) if d_activations is not None else [None] * (n - 1)
    gw: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    delta = d_output
    for i in range(n - 1, -1, -1):
        below = fp.activations[i - 1] if i > 0 else fp.inputs
        gw[i] = below.T @ delta
        gb[i] = delta.sum(axis=0)
        if i == 0:
            d_inputs = delta @ params.weights[0].T
            break
        d_act = delta @ params.weights[i].T
        if d_activations[i - 1] is not None:
            d_act = d_act + d_activations[i - 1]
        delta = d_act * (1.0 - below * below)
    ge = np.zeros_like(params.class_embed)
    start = params.data_dim + params.time_dim
    np.add.at(ge, fp.rows, d_inputs[:, start:])
    return DenoiserParams(gw, gb, ge, params.num_timesteps, params.time_dim)


def backward(
    params: DenoiserParams,
    x: np.ndarray,
    t: np.ndarray,
    c: np.ndarray,
    target: np.ndarray,
    weights: np.ndarray | None = None,
) -> tuple[float, DenoiserParams]:
    """Mean squared error to ``target`` and its exact gradient.

    The loss is ``mean_i w_i * ||out_i - target_i||^2 / d`` with ``w_i = 1``
    unless per-sample ``weights`` are given.
    """
    x = np.atleast_2d(x)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    fp = forward_pass(params, x, t, c)
    loss, d_out = mse_and_cotangent(fp.output, target, weights)
    return loss, vjp(params, fp, d_out)


def mse_and_cotangent(
    output: np.ndarray, target: np.ndarray, weights: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    B, d = output.shape
    diff = output - target
    if weights is None:
        loss = float(np.mean(diff * diff))
        return loss, diff * (2.0 / (B * d))
    weights = np.asarray(weights, dtype=np.float64)
    per_sample = np.sum(diff * diff, axis=1) / d
    loss = float(np.mean(weights * per_sample))
    return loss, diff * (weights[:, None] * (2.0 / (B * d)))


def add_scaled(a: DenoiserParams, b: DenoiserParams, scale: float) -> DenoiserParams:
    """``a + scale * b``."""
    return a.map(lambda x, y: x + scale * y, b)


def _check_finite(grads: DenoiserParams) -> None:
    if not all(np.isfinite(g).all() for g in grads.arrays()):
        raise GradientOverflowError("gradient overflow")


def sgd_step(params: DenoiserParams, grads: DenoiserParams, lr: float) -> DenoiserParams:
    _check_finite(grads)
    return params.map(lambda p, g: p - lr * g, grads)


@dataclass
class AdamState:
    m: DenoiserParams
    v: DenoiserParams
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0


def adam_init(params: DenoiserParams, lr: float = 1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    return AdamState(zeros_like(params), zeros_like(params), lr, beta1, beta2, eps, 0)


def adam_step(
    params: DenoiserParams, grads: DenoiserParams, state: AdamState
) -> tuple[DenoiserParams, AdamState]:
    """One bias-corrected Adam update. Returns new parameters and state."""
    _check_finite(grads)
    check_congruent(params, grads)
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m = state.m.map(lambda m_, g: b1 * m_ + (1.0 - b1) * g, grads)
    v = state.v.map(lambda v_, g: b2 * v_ + (1.0 - b2) * (g * g), grads)
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step
    lr, eps = state.lr, state.eps
    new = params.map(
        lambda p, m_, v_: p - lr * (m_ / bc1) / (np.sqrt(v_ / bc2) + eps), m, v
    )
    return new, AdamState(m, v, lr, b1, b2, eps, step)
