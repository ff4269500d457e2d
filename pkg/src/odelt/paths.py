"""Conditional probability paths and their target vector fields.

Both supported paths are written as ``x_t = a(t) * x1 + b(t) * x0`` with ``x0``
the standard-normal prior draw and ``x1`` the data point. The target field is
evaluated in the Gaussian-path form ``u = (x_t - mu_t) * sigma_t' / sigma_t + mu_t'``
where that form is defined (``sigma_t > 0``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch
from torch import Tensor


class DomainError(ValueError):
    """Raised for non-finite or out-of-domain path inputs."""


@dataclass(frozen=True)
class PathSpec:
    kind: Literal["rectified", "variance_preserving"] = "rectified"
    vp_epsilon: float = 1e-3

    def __post_init__(self):
        if self.kind not in ("rectified", "variance_preserving"):
            raise ValueError(f"unknown path kind {self.kind!r}")
        if self.kind == "variance_preserving" and not 0.0 < self.vp_epsilon < 0.5:
            raise ValueError(f"vp_epsilon must lie in (0, 0.5), got {self.vp_epsilon}")


@dataclass(frozen=True)
class TimeDist:
    kind: Literal["uniform", "lognormal"] = "uniform"
    lognormal_mu: float = 0.0
    lognormal_sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform", "lognormal"):
            raise ValueError(f"unknown time distribution {self.kind!r}")
        if self.lognormal_sigma <= 0:
            raise ValueError("lognormal_sigma must be positive")


def sample_time(rng: np.random.Generator, dist: TimeDist, size=None):
    """Draw training times. Log-normal draws are ``sigmoid(N(mu, sigma^2))``."""
    if dist.kind == "uniform":
        return rng.random(size)
    z = rng.normal(dist.lognormal_mu, dist.lognormal_sigma, size)
    return 1.0 / (1.0 + np.exp(-z))


def vp_alpha(s):
    """Cosine schedule ``alpha_s = cos(pi s / 2)``."""
    return torch.cos(0.5 * math.pi * s) if isinstance(s, Tensor) else math.cos(0.5 * math.pi * s)


def clamp_time(spec: PathSpec, t):
    if spec.kind != "variance_preserving":
        return t
    lo, hi = spec.vp_epsilon, 1.0 - spec.vp_epsilon
    if isinstance(t, Tensor):
        return t.clamp(lo, hi)
    return min(max(t, lo), hi)


def coefficients(spec: PathSpec, t):
    """Return ``(a, b, da/dt, db/dt)`` with ``x_t = a x1 + b x0``.

    For the VP path ``a = alpha_{1-t} = sin(pi t/2)`` and ``b = sigma_t = cos(pi t/2)``.
    ``t`` is clamped first; callers wanting the raw schedule clamp nothing.
    """
    t = clamp_time(spec, t)
    if spec.kind == "rectified":
        one = torch.ones_like(t) if isinstance(t, Tensor) else 1.0
        return t, 1.0 - t, one, -one
    half_pi = 0.5 * math.pi
    sin, cos = (torch.sin, torch.cos) if isinstance(t, Tensor) else (math.sin, math.cos)
    a, b = sin(half_pi * t), cos(half_pi * t)
    return a, b, half_pi * b, -half_pi * a


def _check_finite(*xs):
    for x in xs:
        ok = torch.isfinite(x).all() if isinstance(x, Tensor) else math.isfinite(x)
        if not ok:
            raise DomainError("path inputs must be finite")


def interpolate(spec: PathSpec, t, x0: Tensor, x1: Tensor) -> tuple[Tensor, Tensor]:
    """Return ``(x_t, u_target)`` for prior draw ``x0`` and data point ``x1``.

    ``t`` is a float or a tensor broadcastable against the leading dims of ``x0``
    (a per-row time vector of shape ``(B,)`` is expanded automatically).
    """
    x0 = torch.as_tensor(x0)
    x1 = torch.as_tensor(x1, dtype=x0.dtype)
    if isinstance(t, Tensor):
        t = t.to(x0.dtype)
        if t.ndim == 1 and x0.ndim == 2:
            t = t[:, None]
    _check_finite(t, x0, x1)
    a, b, da, db = coefficients(spec, t)
    x_t = a * x1 + b * x0
    if spec.kind == "rectified":
        return x_t, x1 - x0
    mu = a * x1
    return x_t, (x_t - mu) * db / b + da * x1
