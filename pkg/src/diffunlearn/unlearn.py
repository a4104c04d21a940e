"""EraseDiff and the comparison unlearning procedures.

Random-stream protocol. Every method takes one ``Rng`` and derives named
substreams from it:

* ``rng.spawn("batches")`` / ``rng.spawn("noise")``: minibatch order and
  noising draws on the remaining data (the same two streams ``train`` uses);
* ``rng.spawn("forget", "batches")`` / ``rng.spawn("forget", "noise")``:
  the same for forgetting-data terms.

Because the remaining-data streams never see forgetting-data draws,
EraseDiff with ``lam=0`` and SO with ``alpha=0`` reproduce fine-tuning
bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import denoiser as dn
from .datasets import Dataset, draw_remain_subset
from .denoiser import NULL_CLASS, DenoiserParams
from .diffusion import (
    BatchStream, CfgConfig, LossWeighting, NoiseSchedule, draw_noising, forward_diffuse,
    train, training_loss_and_grads,
)
from .mathcore import Rng

SIMPLIFIED = LossWeighting("simplified")


@dataclass(frozen=True)
class UnlearnConfig:
    S: int = 200
    K: int = 2
    lr: float = 1e-3
    lam: float = 0.1
    # None: the whole set each step
    batch_size_rs: int | None = None
    batch_size_f: int | None = None
    rs_fraction: float = 0.16

    def validate(self) -> None:
        if self.S < 1 or self.K < 0 or self.lr <= 0 or self.lam < 0:
            raise ValueError("need S >= 1, K >= 0, lr > 0, lam >= 0")
        for b in (self.batch_size_rs, self.batch_size_f):
            if b is not None and b < 1:
                raise ValueError("batch sizes must be positive")


@dataclass(frozen=True)
class BaselineConfig:
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 128
    neggrad_epochs: int = 5
    neggrad_lr: float = 3e-4
    so_alpha: float = 0.3
    ts_epochs_1: int = 5
    ts_epochs_2: int = 20
    bs_lam: float = 0.1
    bs_epochs_r: int = 20
    bs_epochs_u: int = 20

    def validate(self) -> None:
        counts = (self.epochs, self.neggrad_epochs, self.ts_epochs_1, self.ts_epochs_2,
                  self.bs_epochs_r, self.bs_epochs_u)
        if min(counts) < 0 or self.so_alpha < 0 or self.bs_lam < 0:
            raise ValueError("epoch counts and weights must be non-negative")


@dataclass
class MethodResult:
    params: DenoiserParams
    trace: dict[str, list[float]] = field(default_factory=dict)
    grad_steps: int = 0


@dataclass
class InnerLoopResult:
    params: DenoiserParams
    constant_loss: float
    steps: int


class _Streams:
    """Minibatch stream plus noising stream for one data source."""

    def __init__(self, data: Dataset, batch_size: int | None, rng: Rng):
        self.data = data
        self.batches = BatchStream(len(data), batch_size or len(data), rng.spawn("batches"))
        self.noise = rng.spawn("noise")

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        idx = self.batches.next()
        return self.data.x[idx], self.data.y[idx]


def forget_draw(x0, c, s: NoiseSchedule, rng: Rng, conditional: bool = True):
    """Noised inputs and uniform targets for the forgetting objective.

    Draw order is ``t``, ``eps ~ N(0, I)``, ``eps_hat ~ U[0, 1)``. Returns
    ``(x_t, t, labels, eps_hat)``.
    """
    B, d = np.shape(x0)
    t = rng.integers(1, s.T + 1, B)
    eps = rng.normal((B, d))
    target = rng.uniform((B, d))
    labels = np.asarray(c) if conditional else np.full(B, NULL_CLASS)
    return forward_diffuse(s, x0, t, eps), t, labels, target


def forget_loss_and_grads(
    params: DenoiserParams, x0, c, s: NoiseSchedule, rng: Rng,
    conditional: bool = True, weighting: LossWeighting = SIMPLIFIED,
) -> tuple[float, DenoiserParams]:
    """Squared error between the model's noise estimate and uniform noise targets."""
    if len(x0) == 0:
        raise ValueError("empty batch")
    loss, grads, _ = _forget_terms(params, x0, c, s, rng, conditional, weighting)
    return loss, grads


def _forget_terms(params, x0, c, s, rng, conditional, weighting):
    """Loss, gradient and per-sample losses of the forgetting objective on one draw."""
    x_t, t, labels, target = forget_draw(x0, c, s, rng, conditional)
    w = None if weighting.mode == "simplified" else weighting.coefficients(s)[t - 1]
    fp = dn.forward_pass(params, x_t, t, labels)
    loss, d_out = dn.mse_and_cotangent(fp.output, target, w)
    per_sample = np.mean((fp.output - target) ** 2, axis=1) * (1.0 if w is None else w)
    return loss, dn.vjp(params, fp, d_out), per_sample


def forget_loss(params, x0, c, s, rng, conditional=True, weighting=SIMPLIFIED) -> float:
    x_t, t, labels, target = forget_draw(x0, c, s, rng, conditional)
    out = dn.forward(params, x_t, t, labels)[0]
    w = None if weighting.mode == "simplified" else weighting.coefficients(s)[t - 1]
    return dn.mse_and_cotangent(out, target, w)[0]


def constant_term(value: float, like: DenoiserParams) -> tuple[float, DenoiserParams]:
    """A loss term held fixed with respect to the parameters: its gradient is zero."""
    return float(value), dn.zeros_like(like)


def descend(theta: DenoiserParams, grad_fn, K: int, lr: float) -> DenoiserParams:
    """``K`` plain gradient steps ``phi <- phi - lr * grad_fn(phi)`` from a copy of ``theta``."""
    if K < 0:
        raise ValueError("K must be non-negative")
    phi = dn.clone(theta)
    for _ in range(K):
        phi = dn.sgd_step(phi, grad_fn(phi), lr)
    return phi


def inner_descent(
    theta: DenoiserParams, forget: "_Streams", K: int, lr: float, s: NoiseSchedule,
    conditional: bool = True, weighting: LossWeighting = SIMPLIFIED,
) -> InnerLoopResult:
    """``K`` plain gradient steps on the forgetting loss from a copy of ``theta``.

    A fresh minibatch and fresh draws are used at every step; the constant
    loss is then evaluated at the final iterate on one more fresh draw.
    """
    def grad(phi):
        x0, c = forget.next()
        return forget_loss_and_grads(phi, x0, c, s, forget.noise, conditional, weighting)[1]

    phi = descend(theta, grad, K, lr)
    x0, c = forget.next()
    l_cs = forget_loss(phi, x0, c, s, forget.noise, conditional, weighting)
    return InnerLoopResult(phi, l_cs, K)


@dataclass
class EraseDiffState:
    params: DenoiserParams
    adam: dn.AdamState
    remain: "_Streams"
    forget: "_Streams"


def erasediff_step(
    state: EraseDiffState, s: NoiseSchedule, ucfg: UnlearnConfig, cfg: CfgConfig,
    weighting: LossWeighting = SIMPLIFIED, conditional: bool = True,
) -> dict[str, float]:
    """One outer iteration; updates ``state`` in place and returns the loss terms."""
    theta = state.params
    inner = inner_descent(theta, state.forget, ucfg.K, ucfg.lr, s, conditional, weighting)

    x0, c = state.forget.next()
    f_theta, g_f, per_sample = _forget_terms(theta, x0, c, s, state.forget.noise, conditional, weighting)
    l_cs, g_cs = constant_term(inner.constant_loss, theta)
    f_hat = f_theta - l_cs
    g_fhat = dn.add_scaled(g_f, g_cs, -1.0)

    xr, cr = state.remain.next()
    l_r, g_r = training_loss_and_grads(theta, xr, cr, s, weighting, cfg, state.remain.noise)

    grads = dn.add_scaled(g_r, g_fhat, ucfg.lam)
    state.params, state.adam = dn.adam_step(theta, grads, state.adam)
    se = float(per_sample.std(ddof=1) / np.sqrt(len(per_sample))) if len(per_sample) > 1 else 0.0
    return {"remaining_loss": l_r, "forget_loss": f_theta, "f_hat": f_hat,
            "total_loss": l_r + ucfg.lam * f_hat, "forget_loss_se": se}


def erasediff(
    theta0: DenoiserParams, remain: Dataset, forget: Dataset, ucfg: UnlearnConfig,
    s: NoiseSchedule, cfg: CfgConfig, rng: Rng, remain_subset: Dataset | None = None,
    weighting: LossWeighting = SIMPLIFIED, conditional: bool = True,
    lam_schedule: Callable[[int, dict], float] | None = None,
) -> MethodResult:
    """Scrub ``forget`` from ``theta0`` while fitting a fixed subset of ``remain``.

    The subset is drawn once from ``remain`` (``ucfg.rs_fraction``) unless
    given explicitly. ``lam_schedule(iteration, previous_terms)`` may return
    a different balance weight per iteration (``previous_terms`` is empty on
    the first one); by default ``ucfg.lam`` is used throughout.
    """
    ucfg.validate()
    if len(remain) == 0 or len(forget) == 0:
        raise ValueError("remain and forget sets must be nonempty")
    if _overlap(remain, forget):
        raise ValueError("remain and forget sets overlap")
    if remain_subset is None:
        remain_subset = remain.subset(draw_remain_subset(len(remain), ucfg.rs_fraction, rng.spawn("rs")))
    state = EraseDiffState(
        params=theta0,
        adam=dn.adam_init(theta0, lr=ucfg.lr),
        remain=_Streams(remain_subset, ucfg.batch_size_rs, rng),
        forget=_Streams(forget, ucfg.batch_size_f, rng.spawn("forget")),
    )
    trace: dict[str, list[float]] = {
        "remaining_loss": [], "forget_loss": [], "f_hat": [], "total_loss": [], "forget_loss_se": []}
    terms: dict[str, float] = {}
    for it in range(ucfg.S):
        step_cfg = ucfg
        if lam_schedule is not None:
            step_cfg = replace(ucfg, lam=float(lam_schedule(it, terms)))
            step_cfg.validate()
        terms = erasediff_step(state, s, step_cfg, cfg, weighting, conditional)
        for k, v in terms.items():
            trace[k].append(v)
    return MethodResult(state.params, trace, grad_steps=ucfg.S * (ucfg.K + 2))


def _overlap(a: Dataset, b: Dataset) -> bool:
    if a.dim != b.dim:
        return False
    rows_a = {r.tobytes() + bytes([0]) + int(y).to_bytes(8, "little", signed=True) for r, y in zip(a.x, a.y)}
    return any(r.tobytes() + bytes([0]) + int(y).to_bytes(8, "little", signed=True) in rows_a
               for r, y in zip(b.x, b.y))


def _train(theta, data: Dataset, epochs, lr, batch_size, s, cfg, rng, weighting, sign=1.0) -> MethodResult:
    res = train(theta, data.x, data.y, s, weighting, cfg, epochs, batch_size,
                dn.adam_init(theta, lr=lr), rng, sign=sign)
    return MethodResult(res.params, {"loss": res.losses}, res.grad_steps)


def finetune(
    theta0: DenoiserParams, remain: Dataset, epochs: int, lr: float, batch_size: int,
    s: NoiseSchedule, cfg: CfgConfig, rng: Rng, weighting: LossWeighting = SIMPLIFIED,
) -> MethodResult:
    """Continue training on the remaining data only."""
    return _train(theta0, remain, epochs, lr, batch_size, s, cfg, rng, weighting)


def neggrad(
    theta0: DenoiserParams, forget: Dataset, epochs: int, lr: float, batch_size: int,
    s: NoiseSchedule, cfg: CfgConfig, rng: Rng, weighting: LossWeighting = SIMPLIFIED,
) -> MethodResult:
    """Gradient ascent on the noise-prediction loss of the forgetting data."""
    return _train(theta0, forget, epochs, lr, batch_size, s, cfg, rng, weighting, sign=-1.0)


def retrain(
    init: DenoiserParams, remain: Dataset, epochs: int, lr: float, batch_size: int,
    s: NoiseSchedule, cfg: CfgConfig, rng: Rng, weighting: LossWeighting = SIMPLIFIED,
) -> MethodResult:
    """Train a fresh initialisation on the remaining data."""
    return _train(init, remain, epochs, lr, batch_size, s, cfg, rng, weighting)


def simultaneous(
    theta0: DenoiserParams, remain: Dataset, forget: Dataset, alpha: float, epochs: int,
    lr: float, batch_size: int, s: NoiseSchedule, cfg: CfgConfig, rng: Rng,
    weighting: LossWeighting = SIMPLIFIED,
) -> MethodResult:
    """Descend ``L(theta; D_r) - alpha * L(theta; D_f)`` on paired minibatches."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    r = _Streams(remain, batch_size, rng)
    f = _Streams(forget, batch_size, rng.spawn("forget"))
    params, adam = theta0, dn.adam_init(theta0, lr=lr)
    trace: dict[str, list[float]] = {"loss": [], "forget_loss": []}
    steps = 0
    for _ in range(epochs):
        tot_r = tot_f = 0.0
        nb = r.batches.batches_per_pass
        for _ in range(nb):
            xr, cr = r.next()
            l_r, g_r = training_loss_and_grads(params, xr, cr, s, weighting, cfg, r.noise)
            xf, cf = f.next()
            l_f, g_f = training_loss_and_grads(params, xf, cf, s, weighting, cfg, f.noise)
            params, adam = dn.adam_step(params, dn.add_scaled(g_r, g_f, -alpha), adam)
            tot_r += l_r
            tot_f += l_f
            steps += 2
        trace["loss"].append(tot_r / nb)
        trace["forget_loss"].append(tot_f / nb)
    return MethodResult(params, trace, steps)


def two_step(
    theta0: DenoiserParams, forget: Dataset, remain: Dataset, epochs_1: int, epochs_2: int,
    lr_1: float, lr_2: float, batch_size: int, s: NoiseSchedule, cfg: CfgConfig, rng: Rng,
    weighting: LossWeighting = SIMPLIFIED,
) -> MethodResult:
    """NegGrad on the forgetting data, then relearning on the remaining data."""
    first = neggrad(theta0, forget, epochs_1, lr_1, batch_size, s, cfg, rng, weighting)
    second = finetune(first.params, remain, epochs_2, lr_2, batch_size, s, cfg, rng.spawn("relearn"), weighting)
    return MethodResult(
        second.params,
        {"phase1_loss": first.trace["loss"], "phase2_loss": second.trace["loss"]},
        first.grad_steps + second.grad_steps,
    )


def blindspot_loss_and_grads(
    params: DenoiserParams, psi: DenoiserParams, x_t, t, c, eps, lf, a, lam: float,
) -> tuple[dict[str, float], DenoiserParams]:
    """BlindSpot objective on one noised batch.

    Rows with ``lf = 0`` regress onto the true noise; rows with ``lf = 1``
    regress onto the teacher ``psi``'s output and pay ``lam`` times the L2
    distance between student and teacher activations, layer by layer.
    ``a`` holds per-row loss weights.
    """
    lf = np.asarray(lf, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    B = len(lf)
    fp = dn.forward_pass(params, x_t, t, c)
    loss_r, d_r = dn.mse_and_cotangent(fp.output, eps, (1.0 - lf) * a)
    terms = {"remain": loss_r, "forget": 0.0, "activation": 0.0}
    if not lf.any():
        return terms, dn.vjp(params, fp, d_r)
    teacher = dn.forward_pass(psi, x_t, t, c)
    terms["forget"], d_f = dn.mse_and_cotangent(fp.output, teacher.output, lf * a)
    d_acts = []
    for act, act_psi in zip(fp.activations, teacher.activations):
        diff = act - act_psi
        norm = np.linalg.norm(diff, axis=1)
        terms["activation"] += lam * float(np.mean(lf * norm))
        # the norm is not differentiable at 0; use the zero subgradient there
        safe = np.where(norm > 0, norm, 1.0)
        d_acts.append(diff * (lam * lf / (B * safe))[:, None])
    return terms, dn.vjp(params, fp, d_r + d_f, d_acts)


def blindspot(
    theta0: DenoiserParams, data: Dataset, forget_mask: np.ndarray, blind_init: DenoiserParams,
    epochs_r: int, epochs_u: int, lam: float, lr: float, batch_size: int,
    s: NoiseSchedule, cfg: CfgConfig, rng: Rng, weighting: LossWeighting = SIMPLIFIED,
) -> MethodResult:
    """Blind-teacher unlearning.

    A blind model trained briefly on the remaining rows serves as the target
    for forgetting rows, both in its noise estimate and in every hidden
    layer's activations (summed per-layer L2 norms, weighted by ``lam``).
    Remaining rows keep the ordinary loss. Phase two draws its randomness
    exactly like ``train`` on ``data``.
    """
    forget_mask = np.asarray(forget_mask, dtype=bool)
    if forget_mask.shape != (len(data),):
        raise ValueError("mask must have one entry per row")
    blind = _train(blind_init, data.subset(~forget_mask), epochs_r, lr, batch_size, s, cfg,
                   rng.spawn("blind"), weighting) if (~forget_mask).any() else MethodResult(blind_init)
    psi = blind.params

    stream = BatchStream(len(data), batch_size, rng.spawn("batches"))
    noise = rng.spawn("noise")
    coeff = None if weighting.mode == "simplified" else weighting.coefficients(s)
    params, adam = theta0, dn.adam_init(theta0, lr=lr)
    trace: dict[str, list[float]] = {"loss": []}
    steps = blind.grad_steps
    for _ in range(epochs_u):
        total = 0.0
        nb = stream.batches_per_pass
        for _ in range(nb):
            idx = stream.next()
            x0, c, lf = data.x[idx], data.y[idx], forget_mask[idx].astype(np.float64)
            draw = draw_noising(noise, c, s.T, data.dim, cfg.p_uncond)
            x_t = forward_diffuse(s, x0, draw.t, draw.eps)
            a = np.ones(len(idx)) if coeff is None else coeff[draw.t - 1]
            terms, grads = blindspot_loss_and_grads(params, psi, x_t, draw.t, draw.c, draw.eps, lf, a, lam)
            loss = terms["remain"] + terms["forget"] + terms["activation"]
            params, adam = dn.adam_step(params, grads, adam)
            total += loss
            steps += 1
        trace["loss"].append(total / nb)
    trace["blind_loss"] = blind.trace.get("loss", [])
    return MethodResult(params, trace, steps)
