"""Central finite-difference gradients for checking analytic backprop.

Float64 differences at ``h = 1e-5`` carry cancellation error near
``eps * |f| / h``, about 1e-11, which swamps tiny gradient entries.
``reference_mse`` is a separate straight-line implementation of the network
loss that accepts ``np.longdouble`` vectors; differencing it in extended
precision leaves only the ``O(h^2)`` truncation term.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import denoiser as dn
from .denoiser import DenoiserParams


def numerical_gradient(loss_fn: Callable[[np.ndarray], float], vector: np.ndarray,
                       h: float = 1e-5) -> np.ndarray:
    """``(f(v + h e_i) - f(v - h e_i)) / 2h`` for every entry; keeps the dtype of ``vector``."""
    v = np.array(vector)
    g = np.zeros_like(v)
    step = v.dtype.type(h)
    for i in range(v.size):
        old = v[i]
        v[i] = old + step
        up = loss_fn(v)
        v[i] = old - step
        down = loss_fn(v)
        v[i] = old
        g[i] = (up - down) / (2 * step)
    return g


def params_gradient(loss_fn: Callable[[DenoiserParams], float], params: DenoiserParams,
                    h: float = 1e-5) -> DenoiserParams:
    """Float64 finite differences of a loss written against ``DenoiserParams``."""
    g = numerical_gradient(lambda v: loss_fn(dn.unflatten(params, v)), dn.flatten(params), h)
    return dn.unflatten(params, g)


def reference_mse(vector: np.ndarray, template: DenoiserParams, x, t, c, target) -> np.floating:
    """Network MSE written out directly, in the dtype of ``vector``."""
    dtype = vector.dtype
    arrays, pos = [], 0
    for a in template.arrays():
        arrays.append(vector[pos:pos + a.size].reshape(a.shape))
        pos += a.size
    n_layers = len(template.weights)
    embed = arrays[-1]
    C = embed.shape[0] - 1
    half = template.time_dim // 2
    T = template.num_timesteps
    total = dtype.type(0)
    B = len(x)
    for i in range(B):
        row = C if c[i] == dn.NULL_CLASS else int(c[i])
        feats = []
        for k in range(half):
            freq = dtype.type(T) ** (dtype.type(k) / dtype.type(max(half - 1, 1)))
            feats.append(dtype.type(t[i]) / dtype.type(T) * freq)
        z = np.concatenate([
            np.asarray(x[i], dtype=dtype),
            np.sin(np.asarray(feats, dtype=dtype)),
            np.cos(np.asarray(feats, dtype=dtype)),
            embed[row],
        ])
        for layer in range(n_layers):
            w, b = arrays[2 * layer], arrays[2 * layer + 1]
            z = z @ w + b
            if layer < n_layers - 1:
                z = np.tanh(z)
        diff = z - np.asarray(target[i], dtype=dtype)
        total += np.sum(diff * diff)
    return total / dtype.type(B * template.data_dim)


def max_relative_error(analytic, numeric) -> float:
    """Largest ``|a - n| / max(|a|, |n|)`` over entries where either side is nonzero."""
    if isinstance(analytic, DenoiserParams):
        analytic = dn.flatten(analytic)
    if isinstance(numeric, DenoiserParams):
        numeric = dn.flatten(numeric)
    a = np.asarray(analytic, dtype=np.longdouble)
    n = np.asarray(numeric, dtype=np.longdouble)
    scale = np.maximum(np.abs(a), np.abs(n))
    mask = scale > 0
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(a - n)[mask] / scale[mask]))
