"""unet train / unet predict over the shared bundle format."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .bundles import BundleError, read_subject_dirs
from .train import TrainConfig, export_masks, load_checkpoint, save_checkpoint, train

logger = logging.getLogger("unet_baseline")


def cmd_train(args) -> int:
    pool = read_subject_dirs(args.pool)
    train_size, val_size = (int(v) for v in args.split.split(","))
    config = TrainConfig(
        train_size=train_size,
        val_size=val_size,
        iterations=args.iters,
        seed=args.seed,
        base_channels=args.base_channels,
        depth=args.depth,
    )
    checkpoint, history = train(pool, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(checkpoint, out / "checkpoint.pt")
    (out / "history.json").write_text(json.dumps(history, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(
        "trained %d iterations; best validation loss %.6f at iteration %d",
        history[-1]["iteration"], checkpoint["best_val_loss"], checkpoint["best_iteration"],
    )
    return 0


def cmd_predict(args) -> int:
    model, _ = load_checkpoint(args.weights)
    subjects = read_subject_dirs(args.subjects)
    failed = export_masks(model, subjects, args.out, keep_going=args.keep_going)
    logger.info("exported %d mask(s), %d failure(s)", len(subjects) - len(failed), len(failed))
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a pool of labeled bundles")
    p.add_argument("--pool", required=True, help="directory of labeled subject bundles")
    p.add_argument("--split", default="41,10", help="train,validation sizes (default 41,10)")
    p.add_argument("--iters", type=int, default=400, help="optimizer iterations (default 400)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-channels", dest="base_channels", type=int, default=16)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="export masks for a directory of bundles")
    p.add_argument("--weights", required=True, help="checkpoint file")
    p.add_argument("--subjects", required=True, help="directory of subject bundles")
    p.add_argument("--keep-going", dest="keep_going", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (BundleError, FileNotFoundError, ValueError) as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
