"""Outer time integrators and nested sampling.

Solvers see the field only as an opaque callable ``field(t, x) -> v``; the depth
integration happens inside every call. A field object may advertise
``evals_per_call`` (2 under classifier-free guidance) so that NFE counts network
evaluations rather than solver calls.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np
import torch
from torch import Tensor

from .netcore import LengthField
from .rng import STREAM_SAMPLE, make_rng

Field = Callable[[float, Tensor], Tensor]

# classifier-free guidance scale used for class-conditional sampling by default
DEFAULT_GUIDANCE = 1.5


class SolverError(RuntimeError):
    pass


class NonFiniteState(SolverError):
    def __init__(self, msg: str, step: int):
        super().__init__(msg)
        self.step = step


class MaxStepsExceeded(SolverError):
    def __init__(self, msg: str, t: float, x: Tensor, stats: "SolveStats"):
        super().__init__(msg)
        self.t, self.x, self.stats = t, x, stats


@dataclass(frozen=True)
class SolverSpec:
    kind: Literal["euler", "dopri5"] = "euler"
    T: int = 128
    rtol: float = 1e-3
    atol: float | None = None  # defaults to rtol
    max_steps: int = 100_000
    safety: float = 0.9
    initial_dt: float = 0.1

    def __post_init__(self):
        if self.kind not in ("euler", "dopri5"):
            raise ValueError(f"unknown solver {self.kind!r}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.rtol <= 0 or (self.atol is not None and self.atol <= 0):
            raise ValueError("rtol and atol must be positive")
        if not 0 < self.initial_dt <= 1:
            raise ValueError("initial_dt must lie in (0, 1]")

    @property
    def abs_tol(self) -> float:
        return self.rtol if self.atol is None else self.atol

    def describe(self) -> str:
        if self.kind == "euler":
            return f"euler(T={self.T})"
        return f"dopri5(rtol={self.rtol:g})"


@dataclass
class SolveStats:
    nfe: int = 0
    accepted_steps: int = 0
    rejected_steps: int = 0
    wall_ms: float = 0.0


def _cost(field) -> int:
    return int(getattr(field, "evals_per_call", 1))


def euler_solve(field: Field, x0: Tensor, T: int) -> tuple[Tensor, SolveStats]:
    """Fixed-step Euler from t=0 to t=1 with ``T`` steps of size ``1/T``."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    start = time.perf_counter()
    dt = 1.0 / T
    x = x0
    for k in range(T):
        x = x + dt * field(k / T, x)
        if not torch.isfinite(x).all():
            raise NonFiniteState(f"non-finite state after Euler step {k + 1}", step=k + 1)
    stats = SolveStats(nfe=T * _cost(field), accepted_steps=T, wall_ms=(time.perf_counter() - start) * 1e3)
    return x, stats


# Dormand-Prince 5(4) tableau
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_E = tuple(b5 - b4 for b5, b4 in zip(_B5, _B4))


def _combine(x: Tensor, h: float, coeffs, ks) -> Tensor:
    out = x
    for a, k in zip(coeffs, ks):
        if a != 0.0:
            out = out + (h * a) * k
    return out


def dopri5_solve(field: Field, x0: Tensor, spec: SolverSpec) -> tuple[Tensor, SolveStats]:
    """Adaptive Dormand-Prince 5(4) with FSAL from t=0 to exactly t=1.

    The error norm is the RMS over all components of
    ``err / (atol + rtol * max(|x|, |x_new|))``; a step is accepted when it is at
    most 1. Step factors are ``safety * err^(-1/5)`` clipped to [0.2, 5].
    NFE = 1 + 6 * (accepted + rejected) network evaluations times
    ``evals_per_call``.
    """
    start = time.perf_counter()
    rtol, atol = spec.rtol, spec.abs_tol
    stats = SolveStats()
    calls = 0

    def f(t, x):
        nonlocal calls
        calls += 1
        return field(t, x)

    def finish():
        stats.nfe = calls * _cost(field)
        stats.wall_ms = (time.perf_counter() - start) * 1e3
        return stats

    t, x = 0.0, x0
    h = spec.initial_dt
    k1 = f(t, x)
    while t < 1.0:
        if stats.accepted_steps + stats.rejected_steps >= spec.max_steps:
            raise MaxStepsExceeded(f"dopri5 exceeded max_steps={spec.max_steps} at t={t:.6g}", t, x, finish())
        last = t + h >= 1.0
        if last:
            h = 1.0 - t
        ks = [k1]
        for i in range(1, 7):
            ks.append(f(t + _C[i] * h, _combine(x, h, _A[i], ks)))
        x_new = _combine(x, h, _B5, ks)
        err = _combine(torch.zeros_like(x), h, _E, ks)
        scale = atol + rtol * torch.maximum(x.abs(), x_new.abs())
        err_norm = float(torch.sqrt(torch.mean((err / scale) ** 2)))
        if not math.isfinite(err_norm):
            raise NonFiniteState(f"non-finite error estimate at t={t:.6g}", step=stats.accepted_steps + 1)

        if err_norm <= 1.0:
            t = 1.0 if last else t + h
            x = x_new
            k1 = ks[6]  # FSAL
            stats.accepted_steps += 1
        else:
            stats.rejected_steps += 1
        factor = 5.0 if err_norm == 0.0 else min(5.0, max(0.2, spec.safety * err_norm ** -0.2))
        h = h * factor
    return x, finish()


def solve(field: Field, x0: Tensor, spec: SolverSpec) -> tuple[Tensor, SolveStats]:
    if spec.kind == "euler":
        return euler_solve(field, x0, spec.T)
    return dopri5_solve(field, x0, spec)


class GuidedField:
    """``v = (1 + w) v(label) - w v(null)``; ``w = 0`` is the plain conditional field."""

    def __init__(self, model: LengthField, l: int, d=None, label=None, w: float = 0.0):
        cfg = model.config
        cfg.check_length(l)
        if w != 0.0 and cfg.num_classes == 0:
            raise ValueError("guidance needs a class-conditional model (num_classes > 0)")
        if label is not None:
            lab = torch.as_tensor(label)
            if cfg.num_classes == 0 or ((lab < 0) | (lab >= cfg.num_classes)).any():
                raise ValueError(f"label out of range for num_classes={cfg.num_classes}")
        self.model, self.l, self.d, self.label, self.w = model, l, d, label, float(w)
        self.evals_per_call = 1 if self.w == 0.0 else 2

    def __call__(self, t: float, x: Tensor) -> Tensor:
        v = self.model(x, t, self.l, self.d, self.label)
        if self.w == 0.0:
            return v
        v_null = self.model(x, t, self.l, self.d, None)
        return (1.0 + self.w) * v - self.w * v_null


def guided_field(model: LengthField, l: int, d, t: float, x: Tensor, label=None, w: float = 0.0) -> Tensor:
    return GuidedField(model, l, d, label, w)(t, x)


@torch.no_grad()
def sample_model(
    model: LengthField,
    solver: SolverSpec,
    l: int,
    n: int,
    seed: int = 0,
    w: float = 0.0,
    label=None,
    d=None,
) -> tuple[np.ndarray, SolveStats]:
    """Integrate ``n`` standard-normal prior draws through the field at length ``l``."""
    model.config.check_length(l)
    dtype = next(model.parameters()).dtype
    rng = make_rng(seed, STREAM_SAMPLE)
    x0 = torch.as_tensor(rng.standard_normal((n, model.config.data_dim)), dtype=dtype)
    x1, stats = solve(GuidedField(model, l, d, label, w), x0, solver)
    return x1.numpy().astype(np.float64), stats


def sample(checkpoint, solver: SolverSpec, l: int, w: float = 0.0, n: int = 1024, seed: int = 0, use_ema: bool = True, label=None, d=None):
    """Nested sampling from a checkpoint (EMA weights by default)."""
    return sample_model(checkpoint.build_model(use_ema), solver, l, n, seed, w, label, d)
