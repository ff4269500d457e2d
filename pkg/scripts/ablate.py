"""Ablations on eight Gaussians: length-consistency fraction K and group size G.

For each setting, trains the toy model and reports W2 per length (Euler T=128)
and the mean length gap |v(l) - v(L)|^2. Results go to a CSV.

    python3 scripts/ablate.py --out ablation.csv [--iterations 5000]
"""

import argparse
import csv
import dataclasses

import numpy as np

from odelt.data import generate
from odelt.evaluation import length_gap
from odelt.experiments import TOY_DATA, TOY_NET, TOY_TRAIN, w2_by_length
from odelt.train import train_loop

K_GRID = (0.0, 0.0625, 0.125, 0.25)
G_GRID = (1, 2, 3)


def run(net, cfg, data):
    ckpt = train_loop(cfg, net, data, data_spec=TOY_DATA)
    w2 = w2_by_length(ckpt)
    gap = length_gap(ckpt.build_model(), cfg.path, data.points, seed=11)
    return w2, float(np.mean(list(gap.values()))) if gap else 0.0


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="ablation.csv")
    ap.add_argument("--iterations", type=int, default=TOY_TRAIN.iterations)
    args = ap.parse_args()
    data = generate(TOY_DATA)
    base = dataclasses.replace(TOY_TRAIN, iterations=args.iterations)
    rows = []
    for K in K_GRID:
        w2, gap = run(TOY_NET, dataclasses.replace(base, lc_fraction=K), data)
        rows += [("K", K, TOY_NET.G, l, v, gap) for l, v in w2.items()]
        print(f"K={K:<7g} gap={gap:.5f} " + " ".join(f"W2[{l}]={v:.4f}" for l, v in w2.items()), flush=True)
    for G in G_GRID:
        net = dataclasses.replace(TOY_NET, G=G, L_min=G)
        w2, gap = run(net, base, data)
        rows += [("G", base.lc_fraction, G, l, v, gap) for l, v in w2.items()]
        print(f"G={G} gap={gap:.5f} " + " ".join(f"W2[{l}]={v:.4f}" for l, v in w2.items()), flush=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ablation", "lc_fraction", "G", "l", "w2", "mean_gap"])
        w.writerows(rows)


if __name__ == "__main__":
    main()
