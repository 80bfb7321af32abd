"""Diagonal Gaussian and Bernoulli-image distributions over ``diffcore`` tensors.

Parameters carry a leading batch axis; log-probabilities and KL values reduce
over the last axis, so an (N, d) Gaussian yields N values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError, DomainError, Tensor

LOG_2PI = math.log(2 * math.pi)
PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class DiagGaussian:
    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise ContractError(f"mean {self.mean.shape} and log_var {self.log_var.shape} differ in shape")
        if not np.all(np.isfinite(self.log_var.data)):
            raise DomainError("log_var must be finite")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.log_var.data)

    @classmethod
    def standard(cls, shape) -> "DiagGaussian":
        return cls(dc.Tensor(np.zeros(shape)), dc.Tensor(np.zeros(shape)))

    @classmethod
    def isotropic(cls, mean: Tensor, sigma: float) -> "DiagGaussian":
        """N(mean, sigma² I) with constant variance."""
        if not sigma > 0:
            raise DomainError(f"sigma must be positive, got {sigma}")
        return cls(mean, dc.Tensor(np.full(mean.shape, 2.0 * math.log(sigma))))


@dataclass(frozen=True)
class BernoulliImage:
    logits: Tensor

    def __post_init__(self):
        if not np.all(np.isfinite(self.logits.data)):
            raise DomainError("logits must be finite")

    @property
    def probs(self) -> np.ndarray:
        return 0.5 * (1.0 + np.tanh(0.5 * self.logits.data))


def kl_diag_gaussian(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q ‖ p), summed over the last axis."""
    if q.mean.shape != p.mean.shape:
        raise ContractError(f"KL between shapes {q.mean.shape} and {p.mean.shape}")
    var_q = dc.exp(q.log_var)
    var_p = dc.exp(p.log_var)
    # (var_q + diff²)/var_p − 1 is exactly 0 when q is p.
    ratio = dc.div(dc.add(var_q, dc.square(dc.sub(q.mean, p.mean))), var_p)
    per_dim = dc.mul(0.5, dc.add(dc.sub(p.log_var, q.log_var), dc.sub(ratio, 1.0)))
    return dc.sum(per_dim, axis=-1)


def reparam_sample(q: DiagGaussian, eps) -> Tensor:
    """z = mean + exp(log_var / 2) · eps"""
    eps = dc.as_tensor(eps)
    if eps.shape != q.mean.shape:
        raise ContractError(f"eps shape {eps.shape} != mean shape {q.mean.shape}")
    return dc.add(q.mean, dc.mul(dc.exp(dc.mul(0.5, q.log_var)), eps))


def _check_unit_interval(x: np.ndarray) -> None:
    if x.size and (x.min() < 0 or x.max() > 1 or not np.all(np.isfinite(x))):
        raise DomainError(f"Bernoulli targets must lie in [0, 1], got range [{x.min()}, {x.max()}]")


def bernoulli_log_prob(dist: BernoulliImage, x) -> Tensor:
    """Σ x·log p + (1−x)·log(1−p) from logits: x·l − softplus(l)."""
    x = dc.as_tensor(x)
    if x.shape != dist.logits.shape:
        raise ContractError(f"target shape {x.shape} != logits shape {dist.logits.shape}")
    _check_unit_interval(x.data)
    return dc.sum(dc.sub(dc.mul(x, dist.logits), dc.softplus(dist.logits)), axis=-1)


def bernoulli_log_prob_from_probs(probs: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Diagnostic path on raw probabilities, clamped away from 0 and 1."""
    x = np.asarray(x, dtype=np.float64)
    _check_unit_interval(x)
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    return (x * np.log(p) + (1 - x) * np.log1p(-p)).sum(axis=-1)


def gaussian_log_prob(q: DiagGaussian, z) -> Tensor:
    z = dc.as_tensor(z)
    if z.shape != q.mean.shape:
        raise ContractError(f"z shape {z.shape} != mean shape {q.mean.shape}")
    mahal = dc.div(dc.square(dc.sub(z, q.mean)), dc.exp(q.log_var))
    return dc.mul(-0.5, dc.sum(dc.add(dc.add(q.log_var, mahal), LOG_2PI), axis=-1))
