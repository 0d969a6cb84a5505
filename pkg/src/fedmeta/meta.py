"""Meta-SGD, its differentially private variant, and a MAML baseline.

The model is anything exposing ``grad(params, batch)``, ``hvp(params, batch, v)``
and ``forward(params, batch)``; :class:`fedmeta.nn.MLP` is the production one.

For one inner step ``theta' = theta - alpha * g_tr(theta)`` the exact
meta-gradient of ``L_query(theta')`` is::

    d_theta = (I - H_tr diag(alpha)) g_query(theta')
    d_alpha = -g_tr(theta) * g_query(theta')

Several inner steps are handled by running the same recursion backwards over
the stored iterates.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .episodes import Episode
from .nn import Batch
from .privacy import gaussian_noise


class NoiseConvention(str, enum.Enum):
    # noise added to the clipped sum, then divided by the task count
    STANDARD_DPSGD = "standard"
    # clipped sum divided by the task count, then noise added
    PAPER_LITERAL = "literal"


@dataclass(frozen=True)
class MetaParams:
    theta: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        if self.theta.shape != self.alpha.shape:
            raise ValueError("theta and alpha must have equal length")

    def flat(self) -> np.ndarray:
        return np.concatenate([self.theta, self.alpha])

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.theta).all() and np.isfinite(self.alpha).all())


@dataclass(frozen=True)
class MetaConfig:
    beta: float = 0.05
    inner_steps: int = 1
    clip_bound: float = math.inf
    sigma: float = 0.0
    tasks_per_batch: int = 32
    noise_convention: NoiseConvention = NoiseConvention.STANDARD_DPSGD
    maml_inner_rate: float = 0.05

    def __post_init__(self):
        if not self.beta >= 0:
            raise ValueError("beta must be non-negative")
        if self.inner_steps < 1 or self.tasks_per_batch < 1:
            raise ValueError("inner_steps and tasks_per_batch must be positive")
        if not self.clip_bound > 0:
            raise ValueError("clip bound must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.sigma > 0 and math.isinf(self.clip_bound):
            raise ValueError("noise needs a finite clip bound")
        object.__setattr__(self, "noise_convention", NoiseConvention(self.noise_convention))


@dataclass(frozen=True)
class MetaGradient:
    d_theta: np.ndarray
    d_alpha: np.ndarray

    def norm(self) -> float:
        return math.sqrt(float(self.d_theta @ self.d_theta) + float(self.d_alpha @ self.d_alpha))


def init_meta(model, rng, alpha_range=(0.005, 0.1)) -> MetaParams:
    """Fresh theta from the model's initializer; alpha uniform in ``alpha_range``."""
    rng = np.random.default_rng(rng)
    lo, hi = alpha_range
    if not 0 < lo <= hi:
        raise ValueError("alpha range must be positive and ordered")
    theta = model.init(rng)
    return MetaParams(theta, rng.uniform(lo, hi, size=theta.shape))


def inner_adapt(model, meta: MetaParams, support: Batch, config: MetaConfig) -> np.ndarray:
    theta = meta.theta
    for _ in range(config.inner_steps):
        theta = theta - meta.alpha * model.grad(theta, support)
    return theta


def meta_gradient(model, meta: MetaParams, episode: Episode, config: MetaConfig,
                  with_loss: bool = False):
    """Exact gradient of the query loss after adaptation, w.r.t. (theta, alpha)."""
    iterates, inner_grads = [], []
    theta = meta.theta
    for _ in range(config.inner_steps):
        g = model.grad(theta, episode.support)
        iterates.append(theta)
        inner_grads.append(g)
        theta = theta - meta.alpha * g
    lam = model.grad(theta, episode.query)
    d_alpha = np.zeros_like(meta.alpha)
    for theta_k, g_k in zip(reversed(iterates), reversed(inner_grads)):
        d_alpha -= g_k * lam
        lam = lam - model.hvp(theta_k, episode.support, meta.alpha * lam)
    result = MetaGradient(lam, d_alpha)
    if with_loss:
        return result, model.loss(theta, episode.query)
    return result


def clip_gradient(g: MetaGradient, clip_bound: float) -> MetaGradient:
    """Rescale the joint (theta, alpha) gradient to l2 norm at most ``clip_bound``."""
    if not clip_bound > 0:
        raise ValueError("clip bound must be positive")
    scale = max(1.0, g.norm() / clip_bound)
    if scale == 1.0:
        return g
    out = MetaGradient(g.d_theta / scale, g.d_alpha / scale)
    # rounding can leave the norm an ulp above the bound; nudge the divisor up
    while out.norm() > clip_bound:
        scale = math.nextafter(scale, math.inf)
        out = MetaGradient(g.d_theta / scale, g.d_alpha / scale)
    return out


def _sum(grads: list[MetaGradient]) -> MetaGradient:
    d_theta = grads[0].d_theta.copy()
    d_alpha = grads[0].d_alpha.copy()
    for g in grads[1:]:
        d_theta += g.d_theta
        d_alpha += g.d_alpha
    return MetaGradient(d_theta, d_alpha)


def _descend(meta: MetaParams, direction: MetaGradient, beta: float, update_alpha=True) -> MetaParams:
    theta = meta.theta - beta * direction.d_theta
    alpha = meta.alpha - beta * direction.d_alpha if update_alpha else meta.alpha
    return MetaParams(theta, alpha)


def _task_gradients(model, meta, episodes, config, trace):
    if not episodes:
        raise ValueError("need at least one episode")
    grads, losses = [], []
    for ep in episodes:
        g, loss = meta_gradient(model, meta, ep, config, with_loss=True)
        grads.append(g)
        losses.append(loss)
    if trace is not None:
        trace.append(float(np.mean(losses)))
    return grads


def metasgd_step(model, meta: MetaParams, episodes: list[Episode], config: MetaConfig,
                 trace: list | None = None) -> MetaParams:
    grads = _task_gradients(model, meta, episodes, config, trace)
    total = _sum(grads)
    b = len(grads)
    return _descend(meta, MetaGradient(total.d_theta / b, total.d_alpha / b), config.beta)


def metadpsgd_step(model, meta: MetaParams, episodes: list[Episode], config: MetaConfig, rng,
                   trace: list | None = None) -> MetaParams:
    """Clip each task's meta-gradient, add N(0, (sigma C)^2) noise, descend."""
    if config.sigma > 0 and math.isinf(config.clip_bound):
        raise ValueError("noise needs a finite clip bound")
    grads = _task_gradients(model, meta, episodes, config, trace)
    total = _sum([clip_gradient(g, config.clip_bound) for g in grads])
    b = len(grads)
    n = meta.theta.size
    noise = None
    if config.sigma > 0:
        noise = gaussian_noise(2 * n, config.sigma * config.clip_bound, rng)
    if noise is None:
        direction = MetaGradient(total.d_theta / b, total.d_alpha / b)
    elif config.noise_convention is NoiseConvention.STANDARD_DPSGD:
        direction = MetaGradient((total.d_theta + noise[:n]) / b, (total.d_alpha + noise[n:]) / b)
    else:
        direction = MetaGradient(total.d_theta / b + noise[:n], total.d_alpha / b + noise[n:])
    return _descend(meta, direction, config.beta)


def maml_step(model, meta: MetaParams, episodes: list[Episode], config: MetaConfig,
              trace: list | None = None) -> MetaParams:
    """Second-order MAML: a fixed scalar inner rate, only theta is learned."""
    frozen = MetaParams(meta.theta, np.full_like(meta.theta, config.maml_inner_rate))
    grads = _task_gradients(model, frozen, episodes, config, trace)
    total = _sum(grads)
    b = len(grads)
    return _descend(frozen, MetaGradient(total.d_theta / b, total.d_alpha), config.beta, update_alpha=False)


def evaluate(model, meta: MetaParams, episodes: list[Episode], config: MetaConfig):
    """Adapt on each support set, predict the query set (ties -> lowest class)."""
    out = []
    for ep in episodes:
        adapted = inner_adapt(model, meta, ep.support, config)
        probs = model.forward(adapted, ep.query)
        out.append((np.argmax(probs, axis=1), ep.query.labels.copy()))
    return out
