"""Quality against sampling cost over the (length, solver) grid for one checkpoint.

Writes ``eval.csv`` and ``scaling.svg`` (one curve per solver setting across
lengths) into ``--out-dir``. Trains the toy model first when no checkpoint is
given.

    python3 scripts/scaling.py [--checkpoint run/checkpoint.odlt] --out-dir scaling
"""

import argparse
from pathlib import Path

from odelt import checkpoint as ckpt_io
from odelt.evaluation import evaluate, plot_scaling
from odelt.experiments import HELDOUT_N, heldout, train_toy
from odelt.solvers import SolverSpec


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint")
    ap.add_argument("--out-dir", default="scaling")
    ap.add_argument("--steps", default="1,2,4,8,16,128")
    ap.add_argument("--rtols", default="1e-2,1e-3")
    args = ap.parse_args()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.checkpoint:
        ckpt = ckpt_io.load(args.checkpoint)
    else:
        ckpt = train_toy()
        ckpt_io.save(ckpt, out / "checkpoint.odlt")
    solvers = [SolverSpec("euler", T=int(T)) for T in args.steps.split(",")]
    solvers += [SolverSpec("dopri5", rtol=float(r)) for r in args.rtols.split(",") if r]
    report = evaluate(ckpt.build_model(), heldout(), ckpt.net_config.admissible_lengths, solvers, n=HELDOUT_N, metadata={"checkpoint": ckpt.digest()})
    report.write_csv(out / "eval.csv")
    plot_scaling(report, out / "scaling.svg")
    for r in report.rows:
        print(f"l={r.l} {r.solver:<18s} W2={r.w2:.4f} nfe={r.nfe:<5d} {r.wall_ms:8.1f} ms")


if __name__ == "__main__":
    main()
