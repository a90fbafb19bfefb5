"""Overfit the desk config on synthetic scenes and report loss and AP_40.

    python3 scripts/overfit_toy.py --epochs 300 --out runs/toy
"""

import argparse
import time
from pathlib import Path

from hvnet.config import desk_config
from hvnet.model import HVNet
from hvnet.pipeline import evaluate, format_ap_csv, train_toy
from hvnet.train import make_toy_scenes


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--iou", type=float, default=0.5, help="RIoU threshold for every class")
    args = ap.parse_args()

    cfg = desk_config()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    store, tlog = train_toy(cfg, out / "weights.hvw", args.seed, args.epochs,
                            log_csv=out / "train_log.csv")
    elapsed = time.perf_counter() - t0
    first, last = tlog.totals[0], tlog.totals[-1]
    print(f"{args.epochs} epochs in {elapsed:.0f} s: loss {first:.4f} -> {last:.6f} "
          f"(ratio {last / first:.2e})")
    table = evaluate(HVNet(cfg), store, make_toy_scenes(cfg, args.seed), thresholds=(args.iou,) * 3)
    text = format_ap_csv(table)
    (out / "ap.csv").write_text(text)
    print(text, end="")


if __name__ == "__main__":
    main()
