"""Synthetic 2-D datasets with per-mode class labels."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .rng import STREAM_DATA, make_rng

KINDS = ("eight_gaussians", "two_moons", "checkerboard", "two_spirals")

NUM_MODES = {"eight_gaussians": 8, "two_moons": 2, "checkerboard": 2, "two_spirals": 2}


@dataclass(frozen=True)
class DatasetSpec:
    kind: Literal["eight_gaussians", "two_moons", "checkerboard", "two_spirals"] = "eight_gaussians"
    n: int = 8192
    noise_std: float = 0.1
    seed: int = 0
    normalize: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}; expected one of {KINDS}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")

    @property
    def num_modes(self) -> int:
        return NUM_MODES[self.kind]


@dataclass(frozen=True)
class Normalizer:
    """Affine map to zero mean and unit per-coordinate std."""

    mean: np.ndarray
    std: np.ndarray

    def forward(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean


@dataclass
class Dataset:
    points: np.ndarray  # (n, 2) float64
    labels: np.ndarray  # (n,) int64
    normalizer: Normalizer | None = None


def _eight_gaussians(rng, n, noise):
    labels = np.arange(n) % 8
    angle = 2.0 * math.pi * labels / 8.0
    centers = 2.0 * np.stack([np.cos(angle), np.sin(angle)], axis=1)
    return centers + noise * rng.standard_normal((n, 2)), labels


def _two_moons(rng, n, noise):
    labels = np.arange(n) % 2
    u = rng.uniform(0.0, math.pi, n)
    upper = np.stack([np.cos(u), np.sin(u)], axis=1)
    lower = np.stack([1.0 - np.cos(u), 0.5 - np.sin(u)], axis=1)
    pts = np.where(labels[:, None] == 0, upper, lower) - np.array([0.5, 0.25])
    return pts + noise * rng.standard_normal((n, 2)), labels


def _checkerboard(rng, n, noise):
    # the 8 occupied cells of a 4x4 board on [-2, 2]^2; label is the row parity
    cell = rng.integers(0, 8, n)
    row = cell // 2
    col = 2 * (cell % 2) + (row % 2)
    xy = np.stack([col, row], axis=1) + rng.random((n, 2)) - 2.0
    return xy + noise * rng.standard_normal((n, 2)), row % 2


def _two_spirals(rng, n, noise):
    labels = np.arange(n) % 2
    theta = np.sqrt(rng.random(n)) * 3.0 * math.pi
    r = theta / (1.5 * math.pi)
    pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    pts = np.where(labels[:, None] == 0, pts, -pts)
    return pts + noise * rng.standard_normal((n, 2)), labels


_GENERATORS = {
    "eight_gaussians": _eight_gaussians,
    "two_moons": _two_moons,
    "checkerboard": _checkerboard,
    "two_spirals": _two_spirals,
}


def generate(spec: DatasetSpec, stream: int = STREAM_DATA) -> Dataset:
    """Draw ``spec.n`` points and their mode labels.

    ``stream`` selects an independent Philox stream for the same seed; held-out
    sets use a different stream than the training set.
    """
    rng = make_rng(spec.seed, stream)
    points, labels = _GENERATORS[spec.kind](rng, spec.n, spec.noise_std)
    points = points.astype(np.float64)
    labels = labels.astype(np.int64)
    normalizer = None
    if spec.normalize:
        std = points.std(axis=0)
        normalizer = Normalizer(points.mean(axis=0), np.where(std > 0, std, 1.0))
        points = normalizer.forward(points)
    return Dataset(points, labels, normalizer)


def write_csv(path, points: np.ndarray, labels: np.ndarray | None = None) -> None:
    """Write ``x,y[,label]`` rows with LF line endings and '.' decimals."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "label"] if labels is not None else ["x", "y"])
        for i, p in enumerate(points):
            row = [f"{float(v):.9e}" for v in p]
            if labels is not None:
                row.append(str(int(labels[i])))
            w.writerow(row)


def read_csv(path) -> tuple[np.ndarray, np.ndarray | None]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    has_label = header[-1] == "label"
    ncols = len(header) - int(has_label)
    pts = np.array([[float(v) for v in r[:ncols]] for r in body], dtype=np.float64).reshape(-1, ncols)
    labels = np.array([int(r[-1]) for r in body], dtype=np.int64) if has_label else None
    return pts, labels
