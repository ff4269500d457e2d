"""Flow matching with length consistency.

Each mini-batch regresses the field at a uniformly drawn length onto the
conditional target. A fixed-count prefix of the batch additionally regresses
onto the full-length output of the current parameters under stop-gradient.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Literal

import numpy as np
import torch
from torch import Tensor

from .checkpoint import Checkpoint
from .data import Dataset, DatasetSpec
from .netcore import D_KMAX, LengthField, NetConfig, init_params
from .paths import PathSpec, TimeDist, interpolate, sample_time
from .rng import STREAM_TRAIN, make_rng

log = logging.getLogger(__name__)

TELEMETRY_HEADER = ["iter", "loss_cfm", "loss_lc", "lr", "wall_ms"]


class NonFiniteLoss(FloatingPointError):
    def __init__(self, msg: str, index: int):
        super().__init__(msg)
        self.index = index


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, state: dict):
        super().__init__(msg)
        self.state = state


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 256
    lc_fraction: float = 0.125
    learning_rate: float = 1e-3
    warmup_iters: int = 100
    decay: Literal["none", "cosine_tail"] = "cosine_tail"
    final_lr_ratio: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 0.1
    ema_ratio: float = 0.999
    shortcut_mode: bool = False
    label_dropout: float = 0.1
    time_dist: TimeDist = field(default_factory=TimeDist)
    path: PathSpec = field(default_factory=PathSpec)
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.lc_fraction < 1.0:
            raise ValueError(f"lc_fraction must lie in [0, 1), got {self.lc_fraction}")
        if not 0.0 <= self.ema_ratio < 1.0:
            raise ValueError(f"ema_ratio must lie in [0, 1), got {self.ema_ratio}")
        if self.decay not in ("none", "cosine_tail"):
            raise ValueError(f"unknown decay {self.decay!r}")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")

    @property
    def num_lc(self) -> int:
        return int(math.floor(self.lc_fraction * self.batch_size + 0.5))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["time_dist"] = TimeDist(**d.get("time_dist", {}))
        d["path"] = PathSpec(**d.get("path", {}))
        return cls(**d)


@dataclass
class TrainBatch:
    t: Tensor  # (B,)
    x_t: Tensor  # (B, D)
    x0: Tensor
    x1: Tensor
    l: np.ndarray  # (B,) int lengths
    is_lc: np.ndarray  # (B,) bool, a prefix of the batch
    target: Tensor  # (B, D)
    d: Tensor | None = None  # (B,) shortcut sizes, 0 = plain flow
    label: Tensor | None = None  # (B,) class ids, null class = num_classes

    def __len__(self):
        return self.t.shape[0]


def make_batch(
    rng: np.random.Generator,
    dataset: Dataset,
    config: TrainConfig,
    net_config: NetConfig,
    dtype: torch.dtype = torch.float32,
) -> TrainBatch:
    """Draw one mini-batch; the first ``round(K * B)`` items carry the LC term."""
    B = config.batch_size
    n = dataset.points.shape[0]
    if n == 0:
        raise ValueError("dataset is empty")
    idx = rng.integers(0, n, B)
    x1 = dataset.points[idx]
    x0 = rng.standard_normal((B, net_config.data_dim))
    t = sample_time(rng, config.time_dist, B)
    l = rng.choice(np.asarray(net_config.admissible_lengths), B)
    is_lc = np.arange(B) < config.num_lc

    d = None
    if config.shortcut_mode:
        k = rng.integers(0, D_KMAX + 1, B)
        d = torch.as_tensor(np.where(is_lc, 2.0 ** -k.astype(np.float64), 0.0), dtype=dtype)
    label = None
    if net_config.num_classes > 0:
        drop = rng.random(B) < config.label_dropout
        label = torch.as_tensor(np.where(drop, net_config.num_classes, dataset.labels[idx]))

    t_ = torch.as_tensor(t, dtype=dtype)
    x0_ = torch.as_tensor(x0, dtype=dtype)
    x1_ = torch.as_tensor(x1, dtype=dtype)
    x_t, u = interpolate(config.path, t_, x0_, x1_)
    return TrainBatch(t=t_, x_t=x_t, x0=x0_, x1=x1_, l=l, is_lc=is_lc, target=u, d=d, label=label)


def _rows(x, idx):
    return None if x is None else x[idx]


def field_at_lengths(model: LengthField, x: Tensor, t: Tensor, l: np.ndarray, d=None, label=None) -> Tensor:
    """Evaluate rows at their own lengths, one forward per distinct length."""
    out = torch.empty_like(x) if not torch.is_grad_enabled() else None
    pieces, order = [], []
    for lv in np.unique(l):
        idx = torch.as_tensor(np.flatnonzero(l == lv))
        v = model(x[idx], t[idx], int(lv), _rows(d, idx), _rows(label, idx))
        if out is not None:
            out[idx] = v
        else:
            pieces.append(v)
            order.append(idx)
    if out is not None:
        return out
    inv = torch.argsort(torch.cat(order))
    return torch.cat(pieces)[inv]


def shortcut_target(model: LengthField, t: Tensor, x_t: Tensor, d: Tensor, l: np.ndarray, label, u: Tensor) -> Tensor:
    """Bootstrap target from two half-size steps, detached.

    Rows at the smallest shortcut size keep the flow-matching target ``u``. The
    second half step is evaluated at ``min(t + d/2, 1)``.
    """
    smallest = 2.0**-D_KMAX
    base = d <= smallest
    with torch.no_grad():
        half = torch.where(base, d, 0.5 * d)
        va = field_at_lengths(model, x_t, t, l, half, label)
        x_mid = x_t + half[:, None] * va
        vb = field_at_lengths(model, x_mid, (t + half).clamp(max=1.0), l, half, label)
        return torch.where(base[:, None], u, 0.5 * (va + vb))


@dataclass
class LossParts:
    total: Tensor  # differentiable scalar
    cfm_sum: float
    lc_sum: float
    per_item: Tensor  # (B,) detached per-item contribution


def compute_loss(model: LengthField, batch: TrainBatch, shortcut: bool = False) -> LossParts:
    """Mean over the batch of the per-item squared errors (summed over coords).

    Every item regresses onto its target; LC items add the distance to the
    full-length output, which is computed without gradient. LC items that drew
    ``l = L`` reuse their own (detached) output as the teacher.
    """
    L = model.config.L
    B = len(batch)
    target = batch.target
    if shortcut and batch.d is not None:
        target = shortcut_target(model, batch.t, batch.x_t, batch.d, batch.l, batch.label, batch.target)
    v = field_at_lengths(model, batch.x_t, batch.t, batch.l, batch.d, batch.label)
    cfm = ((v - target) ** 2).sum(-1)

    lc = torch.zeros_like(cfm)
    lc_idx = np.flatnonzero(batch.is_lc)
    if lc_idx.size:
        idx = torch.as_tensor(lc_idx)
        teacher = v[idx].detach().clone()
        short = np.flatnonzero(batch.l[lc_idx] < L)
        if short.size:
            sidx = idx[torch.as_tensor(short)]
            with torch.no_grad():
                teacher[torch.as_tensor(short)] = model(
                    batch.x_t[sidx], batch.t[sidx], L, _rows(batch.d, sidx), _rows(batch.label, sidx)
                )
        lc = lc.index_add(0, idx, ((v[idx] - teacher) ** 2).sum(-1))

    per_item = cfm + lc
    finite = torch.isfinite(per_item.detach())
    if not finite.all():
        bad = int(torch.nonzero(~finite)[0])
        raise NonFiniteLoss(f"non-finite loss at batch item {bad}", index=bad)
    return LossParts(
        total=per_item.sum() / B,
        cfm_sum=float(cfm.detach().sum()),
        lc_sum=float(lc.detach().sum()),
        per_item=per_item.detach(),
    )


@dataclass
class OptimizerState:
    opt: torch.optim.AdamW
    ema: dict[str, Tensor]
    step: int = 0


def make_optimizer(model: LengthField, config: TrainConfig) -> OptimizerState:
    opt = torch.optim.AdamW(
        model.parameters(),
        lr=config.learning_rate,
        betas=(config.adam_beta1, config.adam_beta2),
        weight_decay=config.weight_decay,
    )
    ema = {k: p.detach().clone() for k, p in model.named_parameters()}
    return OptimizerState(opt=opt, ema=ema)


def lr_at(it: int, config: TrainConfig) -> float:
    """Learning rate at 1-based step ``it``.

    Linear warmup, constant through 90% of training, then (``cosine_tail``) a
    cosine decay to ``final_lr_ratio * lr`` over the last 10%.
    """
    lr = config.learning_rate
    if config.warmup_iters > 0 and it < config.warmup_iters:
        return lr * it / config.warmup_iters
    if config.decay == "cosine_tail":
        tail_start = int(math.ceil(0.9 * config.iterations))
        tail = config.iterations - tail_start
        if tail > 0 and it > tail_start:
            progress = min(1.0, (it - tail_start) / tail)
            low = config.final_lr_ratio * lr
            return low + (lr - low) * 0.5 * (1.0 + math.cos(math.pi * progress))
    return lr


@torch.no_grad()
def ema_update(shadow: dict[str, Tensor], params, ratio: float) -> None:
    """``shadow <- ratio * shadow + (1 - ratio) * params`` in place."""
    items = params.items() if isinstance(params, dict) else params
    for k, p in items:
        shadow[k].mul_(ratio).add_(p.detach(), alpha=1.0 - ratio)


def optimizer_step(state: OptimizerState, model: LengthField, config: TrainConfig) -> float:
    """One AdamW update using the gradients already stored on ``model``; returns the lr used."""
    state.step += 1
    lr = lr_at(state.step, config)
    for group in state.opt.param_groups:
        group["lr"] = lr
    state.opt.step()
    ema_update(state.ema, model.named_parameters(), config.ema_ratio)
    return lr


def train_loop(
    config: TrainConfig,
    net_config: NetConfig,
    dataset: Dataset,
    *,
    data_spec: DatasetSpec | None = None,
    telemetry_path: str | Path | None = None,
    callback: Callable[[int, LengthField], None] | None = None,
    dtype: torch.dtype = torch.float32,
) -> Checkpoint:
    """Run ``config.iterations`` updates and return the final checkpoint.

    ``callback(it, model)`` fires after every update. Telemetry rows hold window
    means of the CFM and LC loss contributions every ``log_every`` iterations.
    """
    model = init_params(net_config, seed=config.seed, dtype=dtype)
    state = make_optimizer(model, config)
    rng = make_rng(config.seed, STREAM_TRAIN)

    telemetry = []
    fh = writer = None
    if telemetry_path is not None:
        fh = open(telemetry_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TELEMETRY_HEADER)

    cfm_hist = np.zeros(config.iterations)
    lc_hist = np.zeros(config.iterations)
    start = time.perf_counter()
    try:
        for it in range(1, config.iterations + 1):
            batch = make_batch(rng, dataset, config, net_config, dtype)
            try:
                parts = compute_loss(model, batch, shortcut=config.shortcut_mode)
            except NonFiniteLoss as err:
                dump = {"iter": it, "lr": lr_at(it, config), "item": err.index, "telemetry": telemetry[-5:]}
                if telemetry_path is not None:
                    Path(telemetry_path).with_name("diverged.json").write_text(json.dumps(dump, indent=2))
                raise TrainingDiverged(f"training diverged at iteration {it}: {err}", dump) from err
            state.opt.zero_grad(set_to_none=True)
            parts.total.backward()
            lr = optimizer_step(state, model, config)
            cfm_hist[it - 1] = parts.cfm_sum / config.batch_size
            lc_hist[it - 1] = parts.lc_sum / config.batch_size

            if it % config.log_every == 0 or it == config.iterations:
                lo = max(0, it - config.log_every)
                row = [
                    it,
                    float(cfm_hist[lo:it].mean()),
                    float(lc_hist[lo:it].mean()),
                    lr,
                    (time.perf_counter() - start) * 1e3,
                ]
                telemetry.append(row)
                log.info("iter %d loss_cfm %.4f loss_lc %.5f lr %.2e", *row[:4])
                if writer is not None:
                    writer.writerow([row[0]] + [f"{v:.9e}" for v in row[1:4]] + [f"{row[4]:.1f}"])
                    fh.flush()
            if callback is not None:
                callback(it, model)
    finally:
        if fh is not None:
            fh.close()

    return Checkpoint(
        net_config=net_config,
        train_config=config,
        data_spec=data_spec,
        iterations=config.iterations,
        params={k: v.detach().clone() for k, v in model.state_dict().items()},
        ema={k: v.clone() for k, v in state.ema.items()},
        history={"loss_cfm": cfm_hist, "loss_lc": lc_hist, "telemetry": telemetry},
    )
