"""``hvnet`` command line: infer, train-toy, eval, synth."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ModelConfig, desk_config, load_config
from .pipeline import (evaluate, format_ap_csv, load_model_weights, run_inference,
                       train_toy)
from .pointcloud_io import FormatError, list_scenes, load_scene, save_scene, synth_toy_scene
from .train import DivergenceError
from .weights import ArchiveError

log = logging.getLogger("hvnet")


def _config(path) -> ModelConfig:
    return load_config(path) if path else desk_config()


def _inputs(args) -> list[Path]:
    paths = [Path(p) for p in (args.input or [])]
    if args.input_dir:
        paths += sorted(Path(args.input_dir).glob("*.bin"))
    if not paths:
        raise SystemExit("no inputs: pass --input FILE or --input-dir DIR")
    return paths


def cmd_infer(args) -> int:
    cfg = _config(args.config)
    model, store = load_model_weights(cfg, args.weights)
    report = run_inference(model, store, _inputs(args), args.out, plot=args.plot,
                           labels_dir=args.labels)
    for p in report.written:
        print(p)
    return 1 if report.failed else 0


def cmd_train_toy(args) -> int:
    cfg = _config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        _, tlog = train_toy(cfg, out / "weights.hvw", args.seed, args.epochs,
                            log_csv=out / "train_log.csv")
    except DivergenceError as exc:
        log.error("%s; last finite weights written to %s", exc, out / "weights.hvw")
        return 2
    first, last = tlog.totals[0], tlog.totals[-1]
    print(f"initial loss {first:.6f} final loss {last:.6f} ratio {last / first:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args.config)
    model, store = load_model_weights(cfg, args.weights)
    root = Path(args.input_dir)
    scenes = [load_scene(root, stem) for stem in list_scenes(root)]
    if not scenes:
        raise SystemExit(f"no scenes under {root}/velodyne")
    text = format_ap_csv(evaluate(model, store, scenes))
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_synth(args) -> int:
    cfg = _config(args.config)
    rng = np.random.default_rng(args.seed)
    for i in range(args.count):
        save_scene(args.out, f"{i:06d}", synth_toy_scene(rng, cfg.scene, cfg.toy.scene))
    print(f"wrote {args.count} scenes to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hvnet", description="BEV LiDAR detector (numpy)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON model config (default: built-in desk config)")

    sp = sub.add_parser("infer", help="detect objects in KITTI .bin scans")
    common(sp)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--input", action="append", help="a .bin file (repeatable)")
    sp.add_argument("--input-dir", help="directory of .bin files")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--plot", action="store_true", help="also write BEV SVG plots")
    sp.add_argument("--labels", help="directory of ground-truth label files for plots")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("train-toy", help="overfit on synthetic scenes")
    common(sp)
    sp.add_argument("--out", required=True, help="output directory for weights and log")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--epochs", type=int, default=300)
    sp.set_defaults(func=cmd_train_toy)

    sp = sub.add_parser("eval", help="AP_40 per class on labeled scenes")
    common(sp)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--input-dir", required=True, help="dir with velodyne/ and label/")
    sp.add_argument("--out", help="CSV output path (also printed)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("synth", help="write synthetic labeled scenes")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--count", type=int, default=3)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ArchiveError, FormatError, ValueError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
