"""Compare analytic rotated IoU with a Monte-Carlo estimate on random box pairs.

    python3 scripts/riou_montecarlo.py --pairs 200 --samples 1000000
"""

import argparse
import math

import numpy as np

from hvnet.rotbox import riou


def inside(px, py, box):
    x, y, l, w, yaw = box
    c, s = math.cos(yaw), math.sin(yaw)
    dx, dy = px - x, py - y
    return (np.abs(c * dx + s * dy) <= l / 2) & (np.abs(-s * dx + c * dy) <= w / 2)


def monte_carlo_iou(a, b, n, rng):
    """Sample the smaller box uniformly; the hit rate on the other box gives the intersection."""
    small, other = (a, b) if a[2] * a[3] <= b[2] * b[3] else (b, a)
    x, y, l, w, yaw = small
    u, v = rng.uniform(-l / 2, l / 2, n), rng.uniform(-w / 2, w / 2, n)
    c, s = math.cos(yaw), math.sin(yaw)
    hits = np.count_nonzero(inside(x + c * u - s * v, y + s * u + c * v, other))
    inter = small[2] * small[3] * hits / n
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def random_box(rng):
    return np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 4), rng.uniform(0.5, 2),
                     rng.uniform(-np.pi, np.pi)])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pairs", type=int, default=200)
    ap.add_argument("--samples", type=int, default=1_000_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    diffs = []
    for _ in range(args.pairs):
        a, b = random_box(rng), random_box(rng)
        diffs.append(abs(riou(a, b) - monte_carlo_iou(a, b, args.samples, rng)))
    diffs = np.array(diffs)
    print(f"pairs {args.pairs}  samples {args.samples}")
    print(f"|analytic - MC|: mean {diffs.mean():.2e}  p95 {np.quantile(diffs, 0.95):.2e}  max {diffs.max():.2e}")


if __name__ == "__main__":
    main()
