"""The desk-scale eight-Gaussians protocol shared by scripts and acceptance tests."""

from __future__ import annotations

import dataclasses

import numpy as np

from .checkpoint import Checkpoint
from .data import DatasetSpec, generate
from .evaluation import length_gap, wasserstein2
from .netcore import NetConfig
from .rng import STREAM_HELDOUT
from .solvers import SolverSpec, sample_model
from .train import TrainConfig, train_loop

TOY_NET = NetConfig(data_dim=2, hidden_dim=128, L=6, G=2, L_min=2)
TOY_TRAIN = TrainConfig(iterations=5000, batch_size=256, lc_fraction=0.125)
TOY_DATA = DatasetSpec(kind="eight_gaussians", n=8192, noise_std=0.1, seed=0)
HELDOUT_N = 1024
GAP_PROBE_ITER = 100


def heldout(n: int = HELDOUT_N, spec: DatasetSpec = TOY_DATA) -> np.ndarray:
    return generate(dataclasses.replace(spec, n=n), stream=STREAM_HELDOUT).points


def train_toy(seed: int = 0, lc_fraction: float = 0.125, iterations: int | None = None, probe_gap: bool = True) -> Checkpoint:
    """Train the toy model; records the raw-weight length gap after ``GAP_PROBE_ITER`` updates."""
    cfg = dataclasses.replace(TOY_TRAIN, seed=seed, lc_fraction=lc_fraction)
    if iterations is not None:
        cfg = dataclasses.replace(cfg, iterations=iterations)
    dataset = generate(TOY_DATA)
    early = {}

    def probe(it, model):
        if probe_gap and it == GAP_PROBE_ITER:
            early.update(length_gap(model, cfg.path, dataset.points, seed=seed))

    ckpt = train_loop(cfg, TOY_NET, dataset, data_spec=TOY_DATA, callback=probe)
    ckpt.history["gap_early"] = early
    return ckpt


def w2_by_length(ckpt: Checkpoint, T: int = 128, seed: int = 0, use_ema: bool = True) -> dict[int, float]:
    """W2 between ``HELDOUT_N`` Euler samples and the held-out set, per admissible length."""
    ref = heldout()
    model = ckpt.build_model(use_ema)
    out = {}
    for l in ckpt.net_config.admissible_lengths:
        pts, _ = sample_model(model, SolverSpec("euler", T=T), l, HELDOUT_N, seed=seed)
        out[l] = wasserstein2(pts, ref)
    return out
