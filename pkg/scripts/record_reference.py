"""Record the W2 acceptance threshold from reference training runs.

The threshold is ``MARGIN`` times the worst full-length W2 over reference runs
with training seeds different from the one the acceptance test uses.

    python3 scripts/record_reference.py [--seeds 1,2] [--out tests/reference/w2_threshold.json]
"""

import argparse
import json
import platform
import time
from pathlib import Path

import torch

from odelt.experiments import TOY_NET, train_toy, w2_by_length

MARGIN = 1.25


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", default="1,2")
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "tests" / "reference" / "w2_threshold.json"))
    args = ap.parse_args()
    runs = {}
    for seed in (int(s) for s in args.seeds.split(",")):
        t0 = time.perf_counter()
        ckpt = train_toy(seed=seed, probe_gap=False)
        w2 = w2_by_length(ckpt)
        runs[str(seed)] = {"w2": {str(l): v for l, v in w2.items()}, "train_s": round(time.perf_counter() - t0, 1)}
        print(f"seed {seed}: " + " ".join(f"l={l} W2={v:.4f}" for l, v in w2.items()), flush=True)
    worst = max(r["w2"][str(TOY_NET.L)] for r in runs.values())
    record = {
        "theta": MARGIN * worst,
        "margin": MARGIN,
        "length": TOY_NET.L,
        "solver": "euler(T=128)",
        "runs": runs,
        "torch": torch.__version__,
        "platform": platform.platform(),
    }
    Path(args.out).write_text(json.dumps(record, indent=2) + "\n")
    print(f"theta = {record['theta']:.4f} -> {args.out}")


if __name__ == "__main__":
    main()
