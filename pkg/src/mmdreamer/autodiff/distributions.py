"""Diagonal Gaussians and the likelihood / divergence terms built on them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionError, DomainError
from .core import Tensor, _maybe_record, _sigmoid, add, as_tensor, mul

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class DiagGaussian:
    """Diagonal Gaussian given by mean and standard deviation tensors."""

    mean: Tensor
    std: Tensor

    def __post_init__(self):
        object.__setattr__(self, "mean", as_tensor(self.mean))
        object.__setattr__(self, "std", as_tensor(self.std))
        if self.mean.shape != self.std.shape:
            raise DimensionError(f"mean {self.mean.shape} and std {self.std.shape} differ")
        if np.any(~(self.std.data > 0)):
            raise DomainError("standard deviation must be strictly positive")

    @property
    def shape(self):
        return self.mean.shape

    @property
    def var(self) -> np.ndarray:
        return self.std.data ** 2

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.std.detach())

    def log_density(self, x: np.ndarray) -> np.ndarray:
        """Elementwise log-density (numpy, no tape)."""
        m, s = self.mean.data, self.std.data
        return -0.5 * ((x - m) / s) ** 2 - np.log(s) - 0.5 * LOG_2PI


def reparameterize(dist: DiagGaussian, noise) -> Tensor:
    """``mean + std * noise``; the noise is an injected constant."""
    noise = np.asarray(noise.data if isinstance(noise, Tensor) else noise, dtype=np.float64)
    if noise.shape != dist.shape:
        raise DimensionError(f"noise {noise.shape} does not match distribution {dist.shape}")
    if np.any(~(dist.std.data > 0)):
        raise DomainError("standard deviation must be strictly positive")
    return add(dist.mean, mul(dist.std, Tensor(noise)))


def gaussian_kl(posterior: DiagGaussian, prior: DiagGaussian) -> Tensor:
    """Closed-form KL(posterior || prior), summed over every element."""
    if posterior.shape != prior.shape:
        raise DimensionError(f"KL between shapes {posterior.shape} and {prior.shape}")
    mp, sp = posterior.mean.data, posterior.std.data
    mq, sq = prior.mean.data, prior.std.data
    if np.any(sp <= 0) or np.any(sq <= 0):
        raise DomainError("standard deviation must be strictly positive")
    d = mp - mq
    vq = sq * sq
    num = sp * sp + d * d
    kl = np.sum(np.log(sq) - np.log(sp) + num / (2.0 * vq) - 0.5)

    def back(g):
        g = float(g)
        return (g * d / vq, g * (sp / vq - 1.0 / sp), -g * d / vq, g * (1.0 / sq - num / (vq * sq)))

    return _maybe_record((posterior.mean, posterior.std, prior.mean, prior.std), np.asarray(kl), back)


def gaussian_nll(target, mean, std: float = 1.0) -> Tensor:
    """Summed negative log-likelihood under N(mean, std^2) with a fixed std.

    Includes the normalizing constant ``log(std) + 0.5 * log(2 pi)`` per
    element, so a perfect 1-D prediction with unit std scores 0.9189.
    """
    target, mean = as_tensor(target), as_tensor(mean)
    if target.shape != mean.shape:
        raise DimensionError(f"gaussian_nll: target {target.shape} vs mean {mean.shape}")
    if not std > 0:
        raise DomainError("standard deviation must be strictly positive")
    r = (mean.data - target.data) / std
    val = np.sum(0.5 * r * r) + r.size * (np.log(std) + 0.5 * LOG_2PI)

    def back(g):
        gm = float(g) * r / std
        return (-gm, gm)

    return _maybe_record((target, mean), np.asarray(val), back)


def bernoulli_nll(target, logits) -> Tensor:
    """Summed binary cross-entropy from logits, stable for large |logit|."""
    target, logits = as_tensor(target), as_tensor(logits)
    if target.shape != logits.shape:
        raise DimensionError(f"bernoulli_nll: target {target.shape} vs logits {logits.shape}")
    t = target.data
    if np.any((t != 0) & (t != 1)):
        raise DomainError("bernoulli targets must be 0 or 1")
    z = logits.data
    val = np.sum(np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z))))

    def back(g):
        return (None, float(g) * (_sigmoid(z) - t))

    return _maybe_record((target, logits), np.asarray(val), back)
