"""Gaussian-mechanism bookkeeping for differentially private meta-updates."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import as_generator


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float = 1.0
    delta: float = 1e-3

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class CalibrationInputs:
    """``sampling_probability`` is batch size over dataset size (one task = one record)."""

    sampling_probability: float
    steps: int
    c2: float = 1.0

    def __post_init__(self):
        if not 0 < self.sampling_probability <= 1:
            raise ValueError("sampling probability must lie in (0, 1]")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if not self.c2 > 0:
            raise ValueError("c2 must be positive")


def calibrate_sigma(budget: PrivacyBudget, inputs: CalibrationInputs, log_base: float = math.e) -> float:
    """Smallest noise multiplier allowed by the moments-accountant bound.

    sigma = c2 * s * sqrt(T * log(1 / delta)) / epsilon, natural log unless
    ``log_base`` says otherwise.
    """
    budget = PrivacyBudget(budget.epsilon, budget.delta)
    log_term = math.log(1.0 / budget.delta, log_base)
    return inputs.c2 * inputs.sampling_probability * math.sqrt(inputs.steps * log_term) / budget.epsilon


def min_delta_for(sigma: float, epsilon: float) -> float:
    """Smallest delta for which N(0, sigma^2) noise is (epsilon, delta)-DP.

    Only meaningful for epsilon < 1.
    """
    if not 0 < epsilon < 1:
        raise ValueError(f"the Gaussian bound requires 0 < epsilon < 1, got {epsilon}")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    return 0.8 * math.exp(-(sigma**2) * epsilon**2 / 2.0)


def gaussian_noise(dim: int, stddev: float, rng) -> np.ndarray:
    if dim < 1:
        raise ValueError("dim must be positive")
    if stddev < 0:
        raise ValueError("stddev must be non-negative")
    if stddev == 0:
        return np.zeros(dim)
    return as_generator(rng).normal(0.0, stddev, size=dim)


def global_sensitivity(clip_bound: float) -> float:
    """l2 sensitivity of a sum of per-task gradients each clipped to ``clip_bound``.

    Adding or removing one task moves the sum by that task's clipped gradient,
    whose norm is at most the bound.
    """
    if not clip_bound > 0:
        raise ValueError("clip bound must be positive")
    return float(clip_bound)
