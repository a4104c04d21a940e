"""Forgetting and utility metrics for low-dimensional diffusion models.

Energy distance stands in for FID: on 2-D points there is no feature
extractor to speak of, and the energy distance is a proper two-sample
statistic read the same way (lower is closer).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

from . import denoiser as dn
from .denoiser import DenoiserParams
from .diffusion import CfgConfig, NoiseSchedule, SamplerConfig, forward_diffuse, sample
from .mathcore import Rng, mean_and_covariance


def energy_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Unbiased (U-statistic) energy distance ``2 E|a-b| - E|a-a'| - E|b-b'|``.

    Within-sample means exclude the diagonal, so the estimate can be slightly
    negative when both samples come from the same distribution.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    n, m = len(a), len(b)
    if n < 2 or m < 2:
        raise ValueError("energy distance needs at least two samples per set")
    ab = cdist(a, b).mean()
    aa = cdist(a, a).sum() / (n * (n - 1))
    bb = cdist(b, b).sum() / (m * (m - 1))
    return float(2.0 * ab - aa - bb)


@dataclass
class ToyClassifier:
    """Softmax regression; ``weights[k] = [w_k, bias_k]``, shape ``C x (d + 1)``."""
    weights: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    def logits(self, x: np.ndarray) -> np.ndarray:
        z = (np.atleast_2d(x) - self.mean) / self.scale
        return z @ self.weights[:, :-1].T + self.weights[:, -1]


def train_toy_classifier(
    x: np.ndarray, y: np.ndarray, steps: int = 500, lr: float = 0.5, l2: float = 1e-4
) -> ToyClassifier:
    """Full-batch gradient descent on the softmax cross-entropy.

    Rows are sorted canonically first, so the result does not depend on the
    order the samples arrive in.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("classifier needs at least two classes")
    C = int(y.max()) + 1
    order = np.lexsort(tuple(x.T[::-1]) + (y,))
    x, y = x[order], y[order]
    mean, scale = x.mean(axis=0), x.std(axis=0) + 1e-12
    z = np.hstack([(x - mean) / scale, np.ones((len(x), 1))])
    onehot = np.eye(C)[y]
    W = np.zeros((C, z.shape[1]))
    for _ in range(steps):
        logits = z @ W.T
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        grad = (p - onehot).T @ z / len(z) + l2 * W
        W -= lr * grad
    return ToyClassifier(W, mean, scale)


def classify(clf: ToyClassifier, x: np.ndarray) -> np.ndarray:
    return np.argmax(clf.logits(x), axis=1)


def conditional_accuracy(
    params: DenoiserParams, clf: ToyClassifier, s: NoiseSchedule, sampler: SamplerConfig,
    cfg: CfgConfig, c: int, n: int, rng: Rng, return_samples: bool = False,
):
    """Fraction of ``n`` samples generated for class ``c`` that the classifier labels ``c``."""
    if n <= 0:
        raise ValueError("empty evaluation")
    xs = sample(params, s, sampler, cfg, n, c, rng)
    acc = float(np.mean(classify(clf, xs) == c))
    return (acc, xs) if return_samples else acc


def per_sample_diffusion_loss(
    params: DenoiserParams, x0: np.ndarray, c, s: NoiseSchedule, n_t: int, rng: Rng,
) -> np.ndarray:
    """Monte-Carlo ``||eps - eps_theta(x_t, t, c)||^2 / d`` per row of ``x0``, averaged over ``n_t`` draws."""
    if n_t < 1:
        raise ValueError("n_t must be at least 1")
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n, d = x0.shape
    labels = np.broadcast_to(np.asarray(c), (n,))
    reps = np.repeat(x0, n_t, axis=0)
    t = rng.integers(1, s.T + 1, n * n_t)
    eps = rng.normal((n * n_t, d))
    out = dn.forward(params, forward_diffuse(s, reps, t, eps), t, np.repeat(labels, n_t))[0]
    err = np.sum((eps - out) ** 2, axis=1) / d
    return err.reshape(n, n_t).mean(axis=1)


def mia_auc(losses_forget: Sequence[float], losses_unseen: Sequence[float]) -> float:
    """Probability that an unseen sample's loss exceeds a forget sample's (ties count 1/2).

    0.5 means the two loss populations are indistinguishable.
    """
    f = np.asarray(losses_forget, dtype=np.float64)
    u = np.asarray(losses_unseen, dtype=np.float64)
    if f.size == 0 or u.size == 0:
        raise ValueError("both loss lists must be nonempty")
    ranks = rankdata(np.concatenate([u, f]))
    nu, nf = u.size, f.size
    return float((ranks[:nu].sum() - nu * (nu + 1) / 2.0) / (nu * nf))


def gaussian_kl_to_standard(mean: np.ndarray, cov: np.ndarray) -> float:
    d = len(mean)
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise ValueError("covariance is not positive definite")
    return float(0.5 * (np.trace(cov) + mean @ mean - d - logdet))


def kl_to_standard_gaussian(eps_outputs: np.ndarray, reg: float = 1e-6) -> float:
    """KL of a moment-matched Gaussian fit to the outputs from ``N(0, I)``."""
    eps_outputs = np.atleast_2d(np.asarray(eps_outputs, dtype=np.float64))
    n, d = eps_outputs.shape
    if n < d + 2:
        raise ValueError(f"need at least d + 2 = {d + 2} outputs")
    mean, cov = mean_and_covariance(eps_outputs)
    return gaussian_kl_to_standard(mean, cov + reg * np.eye(d))


def noised_outputs(
    params: DenoiserParams, x0: np.ndarray, c, s: NoiseSchedule, t: int, rng: Rng
) -> np.ndarray:
    """Model noise predictions on ``x0`` noised to timestep ``t``."""
    x0 = np.atleast_2d(x0)
    eps = rng.normal(x0.shape)
    tt = np.full(len(x0), t)
    return dn.forward(params, forward_diffuse(s, x0, tt, eps), tt, np.broadcast_to(np.asarray(c), (len(x0),)))[0]


def batch_kl_values(
    params: DenoiserParams, x0: np.ndarray, c, s: NoiseSchedule, rng: Rng, batch_size: int = 256,
) -> np.ndarray:
    """One KL-to-Gaussian value per batch of outputs at ``t = T``."""
    x0 = np.atleast_2d(x0)
    c = np.broadcast_to(np.asarray(c), (len(x0),))
    out = noised_outputs(params, x0, c, s, s.T, rng)
    d = out.shape[1]
    edges = list(range(0, len(out), batch_size))
    vals = [kl_to_standard_gaussian(out[i:i + batch_size]) for i in edges if len(out[i:i + batch_size]) >= d + 2]
    return np.asarray(vals)


def weight_distance(a: DenoiserParams, b: DenoiserParams) -> float:
    dn.check_congruent(a, b)
    return float(np.linalg.norm(dn.flatten(a) - dn.flatten(b)))


def histogram(values: Sequence[float], bins: int = 30, range_=None) -> tuple[np.ndarray, np.ndarray]:
    """Bin counts and left edges."""
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64), bins=bins, range=range_)
    return counts, edges[:-1]


@dataclass
class MetricsReport:
    energy_distance: dict[str, float]
    forget_accuracy: float
    remain_accuracy: float
    mia_auc: float
    kl_forget: float
    kl_remain: float
    weight_distance: float | None
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return build_report(**json.loads(text))


def build_report(
    energy_distance: dict, forget_accuracy: float, remain_accuracy: float, mia_auc: float,
    kl_forget: float, kl_remain: float, weight_distance: float | None = None,
    metadata: dict | None = None,
) -> MetricsReport:
    """Assemble a report, rejecting out-of-range values."""
    def _unit(name, v):
        if not (math.isfinite(v) and 0.0 <= v <= 1.0):
            raise ValueError(f"{name}={v} outside [0, 1]")
        return float(v)

    for k, v in energy_distance.items():
        if not math.isfinite(v):
            raise ValueError(f"energy distance for class {k} is not finite")
    for name, v in (("kl_forget", kl_forget), ("kl_remain", kl_remain)):
        if not (math.isfinite(v) and v >= -1e-8):
            raise ValueError(f"{name}={v} is negative or not finite")
    if weight_distance is not None and not (math.isfinite(weight_distance) and weight_distance >= 0):
        raise ValueError(f"weight_distance={weight_distance} is invalid")
    return MetricsReport(
        energy_distance={str(k): float(v) for k, v in energy_distance.items()},
        forget_accuracy=_unit("forget_accuracy", forget_accuracy),
        remain_accuracy=_unit("remain_accuracy", remain_accuracy),
        mia_auc=_unit("mia_auc", mia_auc),
        kl_forget=float(kl_forget),
        kl_remain=float(kl_remain),
        weight_distance=None if weight_distance is None else float(weight_distance),
        metadata=dict(metadata or {}),
    )
