"""Sample-quality metrics and latency benchmarks over the (length, solver) grid."""

from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .netcore import LengthField, count_active_cost
from .rng import STREAM_EVAL, make_rng
from .solvers import SolverSpec, sample_model


def wasserstein2(a: np.ndarray, b: np.ndarray) -> float:
    """Exact W2 between two equal-size empirical measures.

    Solves the one-to-one assignment under squared Euclidean cost and returns
    the square root of the mean matched cost.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"point sets must have equal shapes, got {a.shape} and {b.shape}")
    if a.shape[0] == 0:
        raise ValueError("point sets must be nonempty")
    cost = cdist(a, b, "sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    return math.sqrt(max(0.0, float(cost[rows, cols].mean())))


def energy_distance(a: np.ndarray, b: np.ndarray) -> float:
    """``2 E|a-b| - E|a-a'| - E|b-b'|`` over all pairs (V-statistic)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("point sets must be nonempty")
    ab = cdist(a, b).mean()
    aa = cdist(a, a).mean()
    bb = cdist(b, b).mean()
    return max(0.0, float(2.0 * ab - aa - bb))


def linear_r2(x, y) -> float:
    """Coefficient of determination of the least-squares line through (x, y)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = ((y - y.mean()) ** 2).sum()
    return 1.0 - float((resid**2).sum() / ss_tot) if ss_tot > 0 else 1.0


@dataclass
class EvalRow:
    l: int
    solver: str
    setting: float  # T for euler, rtol for dopri5
    w2: float
    energy_distance: float
    nfe: int
    wall_ms: float
    active_params: int


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        names = [f.name for f in fields(EvalRow)]
        with open(path, "w", newline="") as fh:
            for k in sorted(self.metadata):
                fh.write(f"# {k}={self.metadata[k]}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names)
            for r in self.rows:
                d = asdict(r)
                w.writerow([_fmt(d[k]) for k in names])

    @classmethod
    def read_csv(cls, path) -> "EvalReport":
        meta, body = {}, []
        with open(path, newline="") as fh:
            for line in fh:
                if line.startswith("# "):
                    k, _, v = line[2:].rstrip("\n").partition("=")
                    meta[k] = v
                else:
                    body.append(line)
        reader = csv.DictReader(body)
        rows = [
            EvalRow(
                l=int(r["l"]),
                solver=r["solver"],
                setting=float(r["setting"]),
                w2=float(r["w2"]),
                energy_distance=float(r["energy_distance"]),
                nfe=int(r["nfe"]),
                wall_ms=float(r["wall_ms"]),
                active_params=int(r["active_params"]),
            )
            for r in reader
        ]
        return cls(rows, meta)


def _fmt(v):
    if isinstance(v, float):
        return repr(float(v))  # shortest string that round-trips exactly
    return str(v)


def _setting(spec: SolverSpec) -> float:
    return float(spec.T) if spec.kind == "euler" else spec.rtol


def evaluate(
    model: LengthField,
    reference: np.ndarray,
    lengths,
    solvers: list[SolverSpec],
    n: int = 1024,
    seed: int = 0,
    w: float = 0.0,
    metadata: dict | None = None,
) -> EvalReport:
    """Sample at every (l, solver) cell and score against ``reference`` points.

    W2 uses the first ``n`` reference points so both sets have equal size.
    ``wall_ms`` covers the solve only.
    """
    if reference.shape[0] < n:
        raise ValueError(f"need at least {n} reference points, got {reference.shape[0]}")
    ref = reference[:n]
    report = EvalReport(metadata=dict(metadata or {}, n=n, seed=seed))
    for l in lengths:
        model.config.check_length(l)
        params, _ = count_active_cost(model.config, l)
        for spec in solvers:
            pts, stats = sample_model(model, spec, l, n, seed=seed, w=w)
            report.rows.append(
                EvalRow(
                    l=l,
                    solver=spec.describe(),
                    setting=_setting(spec),
                    w2=wasserstein2(pts, ref),
                    energy_distance=energy_distance(pts, ref),
                    nfe=stats.nfe,
                    wall_ms=stats.wall_ms,
                    active_params=params,
                )
            )
    expected = len(list(lengths)) * len(solvers)
    if len(report.rows) != expected:
        raise RuntimeError(f"incomplete report: {len(report.rows)} of {expected} cells")
    return report


@torch.inference_mode()
def time_forwards(cases: list[tuple[LengthField, int]], n: int = 1024, repeats: int = 30, warmup: int = 3, seed: int = 0) -> list[float]:
    """Median forward wall time in seconds for each ``(model, l)`` case.

    Cases are timed in interleaved rounds so slow drifts of the machine hit all
    of them equally.
    """
    rng = make_rng(seed, STREAM_EVAL)
    inputs = []
    for model, l in cases:
        model.config.check_length(l)
        dtype = next(model.parameters()).dtype
        x = torch.as_tensor(rng.standard_normal((n, model.config.data_dim)), dtype=dtype)
        t = torch.as_tensor(rng.random(n), dtype=dtype)
        inputs.append((x, t))
    for _ in range(warmup):
        for (model, l), (x, t) in zip(cases, inputs):
            model(x, t, l)
    times = [[] for _ in cases]
    for _ in range(repeats):
        for i, ((model, l), (x, t)) in enumerate(zip(cases, inputs)):
            t0 = time.perf_counter()
            model(x, t, l)
            times[i].append(time.perf_counter() - t0)
    return [statistics.median(ts) for ts in times]


def latency_bench(
    model: LengthField,
    lengths,
    solvers: list[SolverSpec],
    n: int = 1024,
    repeats: int = 5,
    warmup: int = 1,
    seed: int = 0,
) -> EvalReport:
    """Median sampling wall time per (l, solver) cell; quality columns are NaN."""
    report = EvalReport(metadata={"n": n, "seed": seed, "repeats": repeats})
    for l in lengths:
        params, _ = count_active_cost(model.config, l)
        for spec in solvers:
            for _ in range(warmup):
                sample_model(model, spec, l, n, seed=seed)
            walls, nfe = [], 0
            for _ in range(repeats):
                _, stats = sample_model(model, spec, l, n, seed=seed)
                walls.append(stats.wall_ms)
                nfe = stats.nfe
            report.rows.append(
                EvalRow(l, spec.describe(), _setting(spec), math.nan, math.nan, nfe, statistics.median(walls), params)
            )
    return report


def plot_scaling(report: EvalReport, path) -> None:
    """Quality (W2) against wall time, one curve per solver setting across lengths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for solver in dict.fromkeys(r.solver for r in report.rows):
        rows = sorted((r for r in report.rows if r.solver == solver), key=lambda r: r.l)
        ax.plot([r.wall_ms for r in rows], [r.w2 for r in rows], marker="o", label=solver)
        for r in rows:
            ax.annotate(f"l={r.l}", (r.wall_ms, r.w2), fontsize=7, textcoords="offset points", xytext=(3, 3))
    ax.set_xscale("log")
    ax.set_xlabel("sampling wall time [ms]")
    ax.set_ylabel("W2 to held-out data")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


@torch.no_grad()
def length_gap(model: LengthField, path, data: np.ndarray, n: int = 1024, seed: int = 0) -> dict[int, float]:
    """Mean ``|v(l, t, x_t) - v(L, t, x_t)|^2`` per shorter length ``l``.

    ``(t, x_t)`` are fresh draws from the training path with data points taken
    from ``data``; the same draws are used for every length.
    """
    from .paths import interpolate

    cfg = model.config
    rng = make_rng(seed, STREAM_EVAL)
    dtype = next(model.parameters()).dtype
    x1 = torch.as_tensor(data[rng.integers(0, data.shape[0], n)], dtype=dtype)
    x0 = torch.as_tensor(rng.standard_normal((n, cfg.data_dim)), dtype=dtype)
    t = torch.as_tensor(rng.random(n), dtype=dtype)
    x_t, _ = interpolate(path, t, x0, x1)
    full = model(x_t, t, cfg.L)
    return {l: float(((model(x_t, t, l) - full) ** 2).sum(-1).mean()) for l in cfg.admissible_lengths if l < cfg.L}
