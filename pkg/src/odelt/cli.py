"""Command-line entry point: ``odelt {train,sample,eval,bench}``.

Every output lands in a run directory ``<root>/<config-hash>-s<seed>`` where
``root`` comes from ``--runs-root``, the ``ODELT_RUNS`` environment variable, or
``./runs``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, dump_config, load_config
from .data import DatasetSpec, generate, write_csv
from .evaluation import evaluate, latency_bench, plot_scaling
from .netcore import InadmissibleLength, NetConfigError
from .rng import STREAM_HELDOUT
from .solvers import DEFAULT_GUIDANCE, SolverError, SolverSpec, sample_model
from .train import TrainingDiverged, train_loop

log = logging.getLogger("odelt")

RUNS_ENV = "ODELT_RUNS"


def _runs_root(args) -> Path:
    return Path(args.runs_root or os.environ.get(RUNS_ENV, "runs"))


def _run_config(ckpt) -> RunConfig:
    return RunConfig(ckpt.net_config, ckpt.train_config, ckpt.data_spec or DatasetSpec())


def _run_dir(args, cfg: RunConfig) -> Path:
    d = _runs_root(args) / cfg.run_name()
    d.mkdir(parents=True, exist_ok=True)
    return d


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _solvers(steps: list[int], rtols: list[float]) -> list[SolverSpec]:
    return [SolverSpec("euler", T=T) for T in steps] + [SolverSpec("dopri5", rtol=r) for r in rtols]


def _solver_tag(spec: SolverSpec) -> str:
    return f"euler-T{spec.T}" if spec.kind == "euler" else f"dopri5-rtol{spec.rtol:g}"


def _heldout(cfg: RunConfig, n: int) -> np.ndarray:
    """Held-out points in the training coordinates (training-set normalizer applied)."""
    raw = dataclasses.replace(cfg.data, n=max(n, cfg.data.n), normalize=False)
    pts = generate(raw, stream=STREAM_HELDOUT).points
    if cfg.data.normalize:
        pts = generate(cfg.data).normalizer.forward(pts)
    return pts


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = RunConfig(cfg.net, dataclasses.replace(cfg.train, seed=args.seed), cfg.data)
    out = _run_dir(args, cfg)
    (out / "config.ini").write_text(dump_config(cfg))
    dataset = generate(cfg.data)
    ckpt = train_loop(cfg.train, cfg.net, dataset, data_spec=cfg.data, telemetry_path=out / "telemetry.csv")
    ckpt_io.save(ckpt, out / "checkpoint.odlt")
    print(out / "checkpoint.odlt")
    return 0


def cmd_sample(args) -> int:
    ckpt = ckpt_io.load(args.checkpoint)
    cfg = _run_config(ckpt)
    w = args.guidance if args.guidance is not None else (DEFAULT_GUIDANCE if args.label is not None else 0.0)
    spec = SolverSpec(args.solver, T=args.steps, rtol=args.rtol, atol=args.atol)
    model = ckpt.build_model(use_ema=args.ema)
    pts, stats = sample_model(model, spec, args.length, args.n, seed=args.seed, w=w, label=args.label)
    if args.out:
        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
    else:
        tag = "ema" if args.ema else "raw"
        lab = "" if args.label is None else f"_c{args.label}_w{w:g}"
        path = _run_dir(args, cfg) / "samples" / f"l{args.length}_{_solver_tag(spec)}{lab}_n{args.n}_seed{args.seed}_{tag}.csv"
        path.parent.mkdir(exist_ok=True)
    write_csv(path, pts)
    info = {"nfe": stats.nfe, "accepted_steps": stats.accepted_steps, "rejected_steps": stats.rejected_steps, "wall_ms": stats.wall_ms}
    path.with_suffix(".json").write_text(json.dumps(info, indent=2) + "\n")
    print(path)
    return 0


def cmd_eval(args) -> int:
    ckpt = ckpt_io.load(args.checkpoint)
    cfg = _run_config(ckpt)
    lengths = args.lengths or list(cfg.net.admissible_lengths)
    for l in lengths:
        cfg.net.check_length(l)
    model = ckpt.build_model(use_ema=args.ema)
    meta = {"checkpoint": ckpt.digest(), "ema": args.ema, "data": cfg.data.kind}
    report = evaluate(model, _heldout(cfg, args.n), lengths, _solvers(args.steps, args.rtols), n=args.n, seed=args.seed, metadata=meta)
    out = Path(args.out_dir) if args.out_dir else _run_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "eval.csv")
    plot_scaling(report, out / "scaling.svg")
    for r in report.rows:
        print(f"l={r.l:<3d} {r.solver:<20s} W2={r.w2:.4f} energy={r.energy_distance:.4f} nfe={r.nfe} ms={r.wall_ms:.1f}")
    print(out / "eval.csv")
    return 0


def cmd_bench(args) -> int:
    ckpt = ckpt_io.load(args.checkpoint)
    cfg = _run_config(ckpt)
    lengths = args.lengths or list(cfg.net.admissible_lengths)
    for l in lengths:
        cfg.net.check_length(l)
    report = latency_bench(ckpt.build_model(), lengths, _solvers(args.steps, args.rtols), n=args.n, repeats=args.repeats, warmup=args.warmup, seed=args.seed)
    out = Path(args.out_dir) if args.out_dir else _run_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "bench.csv")
    print(out / "bench.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="odelt", description="Length-conditioned flow matching on 2-D toy data.")
    p.add_argument("--runs-root", help=f"run directory root (default ${RUNS_ENV} or ./runs)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from an INI config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, help="override [train] seed")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--length", type=int, required=True)
    s.add_argument("--solver", choices=("euler", "dopri5"), default="euler")
    s.add_argument("--steps", type=int, default=128, help="Euler steps T")
    s.add_argument("--rtol", type=float, default=1e-3)
    s.add_argument("--atol", type=float, help="defaults to --rtol")
    s.add_argument("--guidance", type=float, help=f"guidance scale w (default {DEFAULT_GUIDANCE} with --label, else 0)")
    s.add_argument("--label", type=int)
    s.add_argument("--n", type=int, default=1024)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ema", action=argparse.BooleanOptionalAction, default=True)
    s.add_argument("--out", help="output CSV path (default: inside the run directory)")
    s.set_defaults(func=cmd_sample)

    for name, func, help_ in (("eval", cmd_eval, "quality grid over lengths and solvers"), ("bench", cmd_bench, "latency grid")):
        e = sub.add_parser(name, help=help_)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--lengths", type=_int_list, help="default: all admissible lengths")
        e.add_argument("--steps", type=_int_list, default=[1, 4, 128], help="Euler step counts")
        e.add_argument("--rtols", type=_float_list, default=[], help="Dopri5 tolerances")
        e.add_argument("--n", type=int, default=1024)
        e.add_argument("--seed", type=int, default=0)
        e.add_argument("--out-dir")
        if name == "eval":
            e.add_argument("--ema", action=argparse.BooleanOptionalAction, default=True)
        else:
            e.add_argument("--repeats", type=int, default=5)
            e.add_argument("--warmup", type=int, default=1)
        e.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (InadmissibleLength, ConfigError, CheckpointError, NetConfigError, SolverError, TrainingDiverged, OSError, ValueError) as err:
        print(f"odelt {args.command}: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
