"""Length-conditioned residual field.

The field is a stack of ``L`` conditioned feed-forward blocks acting on the data
space. Blocks are fused into groups of ``G``; each group is one explicit Euler
step of a depth ODE. With ``s = l / G`` active groups and step ``1 / s``::

    r^0 = x_t
    r^i = r^{i-1} + g^i(r^{i-1}) / s
    v   = sum_i g^i(r^{i-1})

Inside a group the blocks run as a plain residual stack, and ``g^i`` is the sum
of their outputs. Groups beyond ``l / G`` are never evaluated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .rng import STREAM_INIT, make_rng

# dyadic shortcut sizes d = 2^-k for k in 0..D_KMAX; row 0 of the d table is d = 0
D_KMAX = 7
TIME_SCALE = 1000.0
MAX_PERIOD = 10000.0


class NetConfigError(ValueError):
    pass


class InadmissibleLength(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, msg: str, step: int):
        super().__init__(msg)
        self.step = step


@dataclass(frozen=True)
class NetConfig:
    data_dim: int = 2
    hidden_dim: int = 128
    L: int = 6
    G: int = 2
    L_min: int = 2
    embed_dim: int = 64
    num_classes: int = 0
    use_d_embedding: bool = False

    def __post_init__(self):
        if self.data_dim < 1 or self.hidden_dim < 1 or self.embed_dim < 2:
            raise NetConfigError("data_dim, hidden_dim must be >= 1 and embed_dim >= 2")
        if self.embed_dim % 2:
            raise NetConfigError(f"embed_dim must be even, got {self.embed_dim}")
        if self.G < 1 or self.L < 1 or self.L % self.G:
            raise NetConfigError(f"L={self.L} must be a positive multiple of G={self.G}")
        if not 1 <= self.L_min <= self.L or self.L_min % self.G:
            raise NetConfigError(f"L_min={self.L_min} must be a multiple of G={self.G} in [1, {self.L}]")
        if self.num_classes < 0:
            raise NetConfigError("num_classes must be >= 0")

    @property
    def admissible_lengths(self) -> tuple[int, ...]:
        return tuple(range(self.L_min, self.L + 1, self.G))

    @property
    def num_length_rows(self) -> int:
        return self.L // self.G - self.L_min // self.G + 1

    def check_length(self, l: int) -> int:
        if l not in self.admissible_lengths:
            allowed = ", ".join(str(v) for v in self.admissible_lengths)
            raise InadmissibleLength(f"length {l} is not admissible; choose one of {{{allowed}}}")
        return int(l)


def timestep_features(t: Tensor, dim: int) -> Tensor:
    """Sinusoidal features ``[cos(w t), sin(w t)]`` of width ``dim``."""
    half = dim // 2
    freqs = torch.exp(-math.log(MAX_PERIOD) * torch.arange(half, dtype=t.dtype) / half)
    args = (TIME_SCALE * t)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def d_index(d: Tensor) -> Tensor:
    """Map shortcut sizes (0 or 2^-k) to rows of the d-embedding table."""
    k = torch.round(-torch.log2(d.clamp_min(2.0 ** -(D_KMAX + 1)))).long()
    return torch.where(d > 0, k + 1, torch.zeros_like(k))


class Block(nn.Module):
    """Feed-forward unit with scale/shift/gate modulation from the condition."""

    def __init__(self, data_dim: int, hidden_dim: int, embed_dim: int):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.fc1 = nn.Linear(data_dim, hidden_dim)
        self.modulation = nn.Linear(embed_dim, 2 * hidden_dim + data_dim)
        self.fc2 = nn.Linear(hidden_dim, data_dim)

    def forward(self, r: Tensor, c_act: Tensor) -> Tensor:
        h = self.hidden_dim
        mod = self.modulation(c_act)
        scale, shift, gate = mod[:, :h], mod[:, h : 2 * h], mod[:, 2 * h :]
        z = F.silu(self.fc1(r) * (1.0 + scale) + shift)
        return (1.0 + gate) * self.fc2(z)


class LengthField(nn.Module):
    """The field ``v(l, d, t, x)``; parameters are the module's own."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        E = config.embed_dim
        self.time_fc1 = nn.Linear(E, E)
        self.time_fc2 = nn.Linear(E, E)
        self.length_embed = nn.Parameter(torch.zeros(config.num_length_rows, E))
        self.d_embed = nn.Parameter(torch.zeros(D_KMAX + 2, E)) if config.use_d_embedding else None
        # last row is the null class used for unconditional / guidance evaluations
        self.class_embed = nn.Parameter(torch.zeros(config.num_classes + 1, E)) if config.num_classes > 0 else None
        self.blocks = nn.ModuleList(Block(config.data_dim, config.hidden_dim, E) for _ in range(config.L))

    @property
    def null_label(self) -> int:
        return self.config.num_classes

    def _as_batch(self, value, n: int, dtype) -> Tensor:
        v = torch.as_tensor(value, dtype=dtype)
        return v.expand(n) if v.ndim == 0 else v

    def embed_condition(self, t, l: int, n: int, d=None, label=None) -> Tensor:
        """Condition vector for a batch of ``n`` rows.

        Sums the projected time features, the length row for ``l / G`` groups,
        and, when enabled, the shortcut-size and class rows. ``label=None``
        selects the null class.
        """
        cfg = self.config
        l = cfg.check_length(l)
        dtype = self.time_fc1.weight.dtype
        t = self._as_batch(t, n, dtype)
        c = self.time_fc2(F.silu(self.time_fc1(timestep_features(t, cfg.embed_dim))))
        c = c + self.length_embed[l // cfg.G - cfg.L_min // cfg.G]
        if self.d_embed is not None:
            d = self._as_batch(0.0 if d is None else d, n, dtype)
            c = c + self.d_embed[d_index(d)]
        if self.class_embed is not None:
            if label is None:
                label = self.null_label
            label = self._as_batch(label, n, torch.long)
            if ((label < 0) | (label > cfg.num_classes)).any():
                raise ValueError(f"label out of range [0, {cfg.num_classes}]")
            c = c + self.class_embed[label]
        return c

    def group(self, i: int, r: Tensor, c_act: Tensor) -> Tensor:
        """``g^i``: the summed outputs of the i-th group (0-based) on input ``r``."""
        G = self.config.G
        z, g = r, None
        for j in range(G):
            o = self.blocks[i * G + j](z, c_act)
            g = o if g is None else g + o
            if j + 1 < G:
                z = z + o
        return g

    def forward(self, x: Tensor, t, l: int | None = None, d=None, label=None) -> Tensor:
        cfg = self.config
        l = cfg.L if l is None else l
        c_act = F.silu(self.embed_condition(t, l, x.shape[0], d, label))
        steps = l // cfg.G
        dl = 1.0 / steps
        r, v = x, None
        for i in range(steps):
            g = self.group(i, r, c_act)
            v = g if v is None else v + g
            if i + 1 < steps:
                r = r + dl * g
        if not torch.isfinite(v).all():
            self._raise_nonfinite(x, c_act, steps)
        return v

    def residuals(self, x: Tensor, t, l: int | None = None, d=None, label=None) -> list[Tensor]:
        """The depth trajectory ``[r^0, ..., r^s]`` including the final residual."""
        cfg = self.config
        l = cfg.L if l is None else l
        c_act = F.silu(self.embed_condition(t, l, x.shape[0], d, label))
        steps = l // cfg.G
        out = [x]
        for i in range(steps):
            out.append(out[-1] + self.group(i, out[-1], c_act) / steps)
        return out

    def _raise_nonfinite(self, x, c_act, steps):
        r = x
        for i in range(steps):
            g = self.group(i, r, c_act)
            r = r + g / steps
            if not (torch.isfinite(g).all() and torch.isfinite(r).all()):
                raise NonFiniteError(f"non-finite value in depth step {i + 1}", step=i + 1)
        raise NonFiniteError("non-finite accumulated field output", step=steps)


def _fill(rng: np.random.Generator, p: Tensor, std: float) -> None:
    with torch.no_grad():
        p.copy_(torch.from_numpy(rng.standard_normal(tuple(p.shape)) * std))


def init_params(config: NetConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> LengthField:
    """Build a field with deterministic Philox-driven initialization.

    Hidden weights are N(0, 1/fan_in); every block's output projection and the
    length table start at exactly zero, so the fresh field is identically zero.
    """
    rng = make_rng(seed, STREAM_INIT)
    model = LengthField(config).to(dtype)
    for name, p in model.named_parameters():
        if name.startswith("blocks.") and ".fc2." in name or name == "length_embed":
            with torch.no_grad():
                p.zero_()
        elif name.endswith("weight"):
            _fill(rng, p, 1.0 / math.sqrt(p.shape[1]))
        elif name.endswith("fc1.bias"):
            with torch.no_grad():
                p.copy_(torch.from_numpy(rng.uniform(-1.0, 1.0, tuple(p.shape))))
        elif name.endswith("bias"):
            with torch.no_grad():
                p.zero_()
        else:  # d / class tables
            _fill(rng, p, 0.02)
    return model


def count_active_cost(config: NetConfig, l: int) -> tuple[int, int]:
    """Parameters and per-sample multiply-adds touched by a forward at length ``l``.

    Shared cost (time MLP plus one row from each embedding table) is constant in
    ``l``; block cost scales with the ``l`` executed blocks.
    """
    l = config.check_length(l)
    D, H, E = config.data_dim, config.hidden_dim, config.embed_dim
    rows = 1 + int(config.use_d_embedding) + int(config.num_classes > 0)
    shared_params = 2 * (E * E + E) + rows * E
    shared_macs = 2 * E * E
    block_params = (D * H + H) + (E * (2 * H + D) + 2 * H + D) + (H * D + D)
    block_macs = D * H + E * (2 * H + D) + H * D
    return shared_params + l * block_params, shared_macs + l * block_macs
