"""Linear noise schedules, forward noising, epsilon-prediction losses and samplers.

Timesteps are 1-based. ``schedule.alpha_bar_at(0)`` is defined as 1 so that
the terminal DDIM step (``t_prev = 0``) returns the predicted clean sample.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import denoiser as dn
from .denoiser import NULL_CLASS, AdamState, DenoiserParams
from .mathcore import Rng

LOSS_MODES = ("simplified", "weighted-ddpm", "weighted-ddim")


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_1: float
    beta_T: float
    betas: np.ndarray = field(repr=False, compare=False)
    alphas: np.ndarray = field(repr=False, compare=False)
    alpha_bars: np.ndarray = field(repr=False, compare=False)
    mode: str = "linear"

    # index helpers take 1-based t
    def beta(self, t) -> np.ndarray:
        return self.betas[np.asarray(t) - 1]

    def alpha(self, t) -> np.ndarray:
        return self.alphas[np.asarray(t) - 1]

    def alpha_bar_at(self, t) -> np.ndarray:
        """``alpha_bar_t`` with the convention ``alpha_bar_0 = 1``."""
        padded = np.concatenate([[1.0], self.alpha_bars])
        return padded[np.asarray(t)]

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_1": self.beta_1, "beta_T": self.beta_T, "mode": self.mode}

    def digest(self) -> str:
        """SHA-256 over the derived arrays; checkpoints store it to detect drift."""
        h = hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode())
        for arr in (self.betas, self.alphas, self.alpha_bars):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


def linear_schedule(T: int, beta_1: float = 1e-4, beta_T: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ValueError("T must be at least 2")
    if not (0.0 < beta_1 <= beta_T < 1.0):
        raise ValueError("need 0 < beta_1 <= beta_T < 1")
    t = np.arange(T, dtype=np.float64)
    betas = beta_1 + t / (T - 1) * (beta_T - beta_1)
    betas[-1] = beta_T
    alphas = 1.0 - betas
    # sequential product, so alpha_bar[t] == alpha_bar[t-1] * alpha[t] exactly
    alpha_bars = np.empty(T)
    acc = 1.0
    for i in range(T):
        acc = acc * alphas[i]
        alpha_bars[i] = acc
    return NoiseSchedule(T, float(beta_1), float(beta_T), betas, alphas, alpha_bars)


def schedule_from_dict(d: dict) -> NoiseSchedule:
    if d.get("mode", "linear") != "linear":
        raise ValueError(f"unsupported schedule mode {d['mode']!r}")
    return linear_schedule(int(d["T"]), float(d["beta_1"]), float(d["beta_T"]))


def forward_diffuse(s: NoiseSchedule, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """``x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps``; ``t`` scalar or per-row."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError("x_0 and eps shapes differ")
    _check_t(s, t, low=1)
    ab = s.alpha_bar_at(t)
    if x0.ndim == 2 and np.ndim(ab) == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def predict_x0(s: NoiseSchedule, x_t: np.ndarray, t, eps_pred: np.ndarray) -> np.ndarray:
    _check_t(s, t, low=1)
    ab = s.alpha_bar_at(t)
    if np.ndim(x_t) == 2 and np.ndim(ab) == 1:
        ab = ab[:, None]
    return (x_t - np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(ab)


def _check_t(s: NoiseSchedule, t, low: int) -> None:
    t = np.asarray(t)
    if t.size and (t.min() < low or t.max() > s.T):
        raise ValueError(f"timestep out of range [{low}, {s.T}]")


@dataclass
class PosteriorStats:
    mean: np.ndarray
    variance: float


def posterior_coefficients(s: NoiseSchedule, t: int) -> tuple[float, float, float]:
    """Weights on ``x_0`` and ``x_t`` of the true posterior mean, and its variance."""
    if not 2 <= t <= s.T:
        raise ValueError("posterior needs 2 <= t <= T")
    ab, ab_prev = s.alpha_bar_at(t), s.alpha_bar_at(t - 1)
    beta, alpha = s.beta(t), s.alpha(t)
    c0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
    ct = np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)
    var = (1.0 - ab_prev) * beta / (1.0 - ab)
    return float(c0), float(ct), float(var)


def ddpm_posterior(s: NoiseSchedule, x0: np.ndarray, x_t: np.ndarray, t: int) -> PosteriorStats:
    c0, ct, var = posterior_coefficients(s, t)
    return PosteriorStats(c0 * np.asarray(x0) + ct * np.asarray(x_t), var)


@dataclass(frozen=True)
class CfgConfig:
    w: float = 0.1
    p_uncond: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ValueError("p_uncond must lie in [0, 1]")


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ddim"
    eta: float = 0.0
    num_steps: int = 20

    def __post_init__(self):
        if self.kind not in ("ddpm", "ddim"):
            raise ValueError(f"unknown sampler {self.kind!r}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")

    def timesteps(self, T: int) -> list[int]:
        """Reverse traversal, starting at ``T`` and ending at 1."""
        if self.kind == "ddpm":
            return list(range(T, 0, -1))
        return stride_schedule(T, self.num_steps)


def stride_schedule(T: int, num_steps: int) -> list[int]:
    """``num_steps`` roughly uniform timesteps from ``T`` down to 1, strictly decreasing."""
    if num_steps < 2:
        raise ValueError("a stride schedule needs at least two steps")
    steps = np.unique(np.round(np.linspace(1, T, min(num_steps, T))).astype(int))
    return [int(v) for v in steps[::-1]]


def cfg_predict(params: DenoiserParams, x_t: np.ndarray, t, c, w: float) -> np.ndarray:
    """Guided noise estimate ``(1 + w) eps(x, t, c) - w eps(x, t, null)``."""
    x_t = np.atleast_2d(x_t)
    B = x_t.shape[0]
    t = np.broadcast_to(np.asarray(t), (B,))
    c = np.broadcast_to(np.asarray(c), (B,))
    if np.any(c == NULL_CLASS):
        raise ValueError("guidance needs a class")
    if w == 0.0:
        return dn.forward(params, x_t, t, c)[0]
    # one stacked pass for both branches
    out = dn.forward(
        params, np.concatenate([x_t, x_t]), np.concatenate([t, t]),
        np.concatenate([c, np.full(B, NULL_CLASS)]),
    )[0]
    return (1.0 + w) * out[:B] - w * out[B:]


def _predict_eps(params, x_t, t, c, cfg: CfgConfig) -> np.ndarray:
    B = x_t.shape[0]
    cc = np.broadcast_to(np.asarray(c), (B,))
    tt = np.full(B, t) if np.ndim(t) == 0 else np.asarray(t)
    if np.all(cc == NULL_CLASS):
        return dn.forward(params, x_t, tt, cc)[0]
    return cfg_predict(params, x_t, tt, cc, cfg.w)


@dataclass(frozen=True)
class LossWeighting:
    mode: str = "simplified"

    def __post_init__(self):
        if self.mode not in LOSS_MODES:
            raise ValueError(f"unknown loss weighting {self.mode!r}")

    def coefficients(self, s: NoiseSchedule) -> np.ndarray:
        """Per-timestep ``a`` for ``t = 1..T`` (index ``t - 1``)."""
        if self.mode == "simplified":
            return np.ones(s.T)
        t = np.arange(2, s.T + 1)
        beta, alpha = s.beta(t), s.alpha(t)
        ab, ab_prev = s.alpha_bar_at(t), s.alpha_bar_at(t - 1)
        # sigma_t^2 is the posterior variance (eta = 1 for the DDIM form)
        sigma2 = (1.0 - ab_prev) * beta / (1.0 - ab)
        if self.mode == "weighted-ddpm":
            a = beta**2 / (2.0 * sigma2 * alpha * (1.0 - ab))
        else:
            root = np.sqrt(np.maximum(alpha * (1.0 - ab_prev - sigma2), 0.0))
            a = (root - np.sqrt(1.0 - ab)) ** 2 / (2.0 * sigma2 * alpha)
        # t = 1 has zero posterior variance; reuse the t = 2 weight
        return np.concatenate([[a[0]], a])


@dataclass
class NoisingDraw:
    t: np.ndarray
    eps: np.ndarray
    c: np.ndarray


def draw_noising(rng: Rng, c: np.ndarray, T: int, d: int, p_uncond: float) -> NoisingDraw:
    """The per-sample randomness of one training batch, in a fixed draw order."""
    B = len(c)
    t = rng.integers(1, T + 1, B)
    eps = rng.normal((B, d))
    drop = rng.uniform(B) < p_uncond
    return NoisingDraw(t, eps, np.where(drop, NULL_CLASS, c))


def training_loss_and_grads(
    params: DenoiserParams,
    x0: np.ndarray,
    c: np.ndarray,
    s: NoiseSchedule,
    weighting: LossWeighting,
    cfg: CfgConfig,
    rng: Rng,
) -> tuple[float, DenoiserParams]:
    """Noise-prediction loss on one batch with label dropout for guidance."""
    if len(x0) == 0:
        raise ValueError("empty batch")
    draw = draw_noising(rng, c, s.T, x0.shape[1], cfg.p_uncond)
    x_t = forward_diffuse(s, x0, draw.t, draw.eps)
    w = None if weighting.mode == "simplified" else weighting.coefficients(s)[draw.t - 1]
    return dn.backward(params, x_t, draw.t, draw.c, draw.eps, weights=w)


def ddpm_sample_step(
    params: DenoiserParams, x_t: np.ndarray, t: int, c, s: NoiseSchedule, cfg: CfgConfig,
    noise: np.ndarray | None = None, rng: Rng | None = None,
) -> np.ndarray:
    """Ancestral step ``x_t -> x_{t-1}``; at ``t = 1`` returns the clean estimate.

    Gaussian noise comes from ``noise`` if given, otherwise from ``rng``.
    """
    _check_t(s, t, low=1)
    x_t = np.atleast_2d(x_t)
    eps = _predict_eps(params, x_t, t, c, cfg)
    x0_hat = predict_x0(s, x_t, t, eps)
    if t == 1:
        return x0_hat
    post = ddpm_posterior(s, x0_hat, x_t, t)
    if noise is None:
        noise = rng.normal(x_t.shape)
    return post.mean + np.sqrt(post.variance) * noise


def ddim_sigma2(s: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    """Step variance; under stride the step's beta is ``1 - abar_t / abar_prev``."""
    ab, ab_prev = s.alpha_bar_at(t), s.alpha_bar_at(t_prev)
    beta = s.beta(t) if t_prev == t - 1 else 1.0 - ab / ab_prev
    return float(eta * (1.0 - ab_prev) * beta / (1.0 - ab))


def ddim_sample_step(
    params: DenoiserParams, x_t: np.ndarray, t: int, t_prev: int, eta: float, c,
    s: NoiseSchedule, cfg: CfgConfig, noise: np.ndarray | None = None, rng: Rng | None = None,
) -> np.ndarray:
    if not 0 <= t_prev < t:
        raise ValueError("t_prev must satisfy 0 <= t_prev < t")
    x_t = np.atleast_2d(x_t)
    eps = _predict_eps(params, x_t, t, c, cfg)
    x0_hat = predict_x0(s, x_t, t, eps)
    ab, ab_prev = s.alpha_bar_at(t), s.alpha_bar_at(t_prev)
    sigma2 = ddim_sigma2(s, t, t_prev, eta)
    rest = 1.0 - ab_prev - sigma2
    if rest < -1e-12:
        raise ValueError("invalid variance split")
    direction = (x_t - np.sqrt(ab) * x0_hat) / np.sqrt(1.0 - ab)
    mean = np.sqrt(ab_prev) * x0_hat + np.sqrt(max(rest, 0.0)) * direction
    if sigma2 == 0.0:
        return mean
    if noise is None:
        noise = rng.normal(x_t.shape)
    return mean + np.sqrt(sigma2) * noise


def sample(
    params: DenoiserParams, s: NoiseSchedule, sampler: SamplerConfig, cfg: CfgConfig,
    n: int, c, rng: Rng,
) -> np.ndarray:
    """Generate ``n`` samples conditioned on ``c`` (or ``NULL_CLASS``).

    Chain ``i`` takes all of its randomness (start point and step noise) from
    ``rng.spawn(i)``, so chains do not depend on ``n``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    d = params.data_dim
    steps = sampler.timesteps(s.T)
    noise = np.stack([rng.spawn(i).normal((len(steps) + 1, d)) for i in range(n)], axis=0)
    x = noise[:, 0]
    labels = np.full(n, c)
    for k, t in enumerate(steps):
        z = noise[:, k + 1]
        if sampler.kind == "ddpm":
            x = ddpm_sample_step(params, x, t, labels, s, cfg, noise=z)
        else:
            t_prev = steps[k + 1] if k + 1 < len(steps) else 0
            x = ddim_sample_step(params, x, t, t_prev, sampler.eta, labels, s, cfg, noise=z)
    return x


class BatchStream:
    """Endless shuffled minibatches over ``n`` items; reshuffles at each pass."""

    def __init__(self, n: int, batch_size: int, rng: Rng):
        if n <= 0:
            raise ValueError("dataset is empty")
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self._order = np.empty(0, dtype=int)
        self._pos = 0

    @property
    def batches_per_pass(self) -> int:
        return -(-self.n // self.batch_size)

    def next(self) -> np.ndarray:
        if self._pos >= len(self._order):
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx

    def __iter__(self) -> Iterator[np.ndarray]:
        while True:
            yield self.next()


@dataclass
class TrainResult:
    params: DenoiserParams
    losses: list[float]
    adam: AdamState
    grad_steps: int


def train(
    params: DenoiserParams,
    x: np.ndarray,
    y: np.ndarray,
    s: NoiseSchedule,
    weighting: LossWeighting,
    cfg: CfgConfig,
    epochs: int,
    batch_size: int,
    adam: AdamState,
    rng: Rng,
    sign: float = 1.0,
    final_lr: float | None = None,
) -> TrainResult:
    """Minibatch Adam on the noise-prediction loss; returns per-epoch mean loss.

    Shuffling uses ``rng.spawn("batches")`` and noising ``rng.spawn("noise")``.
    ``sign=-1`` ascends the loss instead. With ``final_lr`` the learning rate
    follows a per-epoch cosine from ``adam.lr`` down to ``final_lr``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(x) == 0:
        raise ValueError("dataset is empty")
    stream = BatchStream(len(x), batch_size, rng.spawn("batches"))
    noise_rng = rng.spawn("noise")
    losses = []
    steps = 0
    base_lr = adam.lr
    for epoch in range(epochs):
        if final_lr is not None:
            frac = epoch / max(epochs - 1, 1)
            adam = replace(adam, lr=final_lr + 0.5 * (base_lr - final_lr) * (1.0 + np.cos(np.pi * frac)))
        total = 0.0
        nb = stream.batches_per_pass
        for _ in range(nb):
            idx = stream.next()
            loss, grads = training_loss_and_grads(params, x[idx], y[idx], s, weighting, cfg, noise_rng)
            if sign != 1.0:
                grads = grads.map(lambda g: sign * g)
            params, adam = dn.adam_step(params, grads, adam)
            total += loss
            steps += 1
        losses.append(total / nb)
    return TrainResult(params, losses, adam, steps)
