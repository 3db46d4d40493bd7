"""Command-line interface.

Subcommands: synth, train, eval, infer, scan-dump, flops. Exit codes:
0 success, 2 usage/config error, 3 data error, 4 numeric failure (NaN in
checked mode). Every subcommand is reproducible: the same flags and seed
produce byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import tensor as T
from .checkpoint import load_checkpoint
from .config import RunConfig, load_run_config, write_run_config
from .errors import ConfigError, DataError, NumericError, RsmError
from .models import TASK_CHANGE_DETECTION, build_model
from .profiler import MODEL_IDS, scaling_table
from .training import (
    evaluate_samples,
    metrics,
    predict_logits_tiled,
    size_ratio_sweep,
    train,
)
from .traversal import dump_orderings


def _int_list(raw):
    return [int(v) for v in raw.split(",") if v.strip()]


def build_parser():
    p = argparse.ArgumentParser(prog="rsm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--task", choices=("seg", "cd"), required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--size", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--angles", default="0,45,90,135",
                    help="strip angles to draw from (degrees)")
    sp.add_argument("--dash-keep", type=float, default=1.0,
                    help="fraction of strip pixels actually painted")

    tp = sub.add_parser("train", help="train a model on a dataset directory")
    tp.add_argument("--config", help="key = value config file")
    tp.add_argument("--data")
    tp.add_argument("--out")
    tp.add_argument("--task", choices=("seg", "cd"))
    tp.add_argument("--seed", type=int)
    tp.add_argument("--epochs", type=int)
    tp.add_argument("--batch-size", type=int)
    tp.add_argument("--lr", type=float)
    tp.add_argument("--weight-decay", type=float)
    tp.add_argument("--patch", type=int)
    tp.add_argument("--base-channels", type=int)
    tp.add_argument("--blocks", help="five comma-separated block counts")
    tp.add_argument("--state-dim", type=int)
    tp.add_argument("--mode", choices=("ss1d", "ss2d", "ossm"))
    tp.add_argument("--scan-impl", choices=("parallel", "sequential"))
    tp.add_argument("--checked", action="store_true", default=None)
    tp.add_argument("--quiet", action="store_true")

    ep = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--config", help="defaults to config.cfg beside the checkpoint")
    ep.add_argument("--data", required=True)
    ep.add_argument("--split", default="test")
    ep.add_argument("--out", help="directory for metrics/sweep CSVs")
    ep.add_argument("--patch", type=int, help="tile large rasters to this size")
    ep.add_argument("--overlap", type=int, default=0)
    ep.add_argument("--size-sweep", help="comma list of crop sizes")
    ep.add_argument("--ratio-sweep", help="comma list of downsampling ratios")

    ip = sub.add_parser("infer", help="predict a mask for one raster")
    ip.add_argument("--checkpoint", required=True)
    ip.add_argument("--config")
    ip.add_argument("--image", required=True)
    ip.add_argument("--image-t2")
    ip.add_argument("--out", required=True)
    ip.add_argument("--patch", type=int, default=64)
    ip.add_argument("--overlap", type=int, default=16)
    ip.add_argument("--threshold", type=float, default=0.5)

    dp = sub.add_parser("scan-dump", help="print grid scan orderings")
    dp.add_argument("--h", type=int, required=True)
    dp.add_argument("--w", type=int, required=True)
    dp.add_argument("--mode", choices=("ss1d", "ss2d", "ossm"), default="ossm")

    fp = sub.add_parser("flops", help="analytic parameter/flop scaling table")
    fp.add_argument("--model", choices=MODEL_IDS, required=True)
    fp.add_argument("--sizes", required=True, help="comma list of image sizes")
    fp.add_argument("--out", help="write the CSV here instead of stdout")
    return p


def _cmd_synth(args):
    angles = tuple(_int_list(args.angles))
    if args.task == "seg":
        samples = D.synth_segmentation(args.n, args.size, args.size, args.seed,
                                       angles=angles, dash_keep=args.dash_keep)
    else:
        samples = D.synth_change(args.n, args.size, args.size, args.seed,
                                 angles=angles, dash_keep=args.dash_keep)
    D.write_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _train_overrides(args):
    keys = ("data", "out", "task", "seed", "epochs", "batch_size", "lr",
            "weight_decay", "patch", "base_channels", "state_dim", "mode",
            "scan_impl", "checked")
    ov = {k: getattr(args, k) for k in keys}
    if args.blocks is not None:
        ov["blocks_per_stage"] = args.blocks
    return ov


def _cmd_train(args):
    cfg = load_run_config(args.config, _train_overrides(args))
    if not cfg.data:
        raise ConfigError("train: no dataset directory (set --data or the 'data' key)")
    if not cfg.out:
        raise ConfigError("train: no output directory (set --out or the 'out' key)")
    train_samples = D.load_split(cfg.data, "train", cfg.task)
    val_samples = D.load_split(cfg.data, "val", cfg.task)
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_run_config(cfg, out_dir / "config.cfg")
    T.set_checked(cfg.checked)
    log = None if args.quiet else (lambda msg: print(msg, flush=True))
    result = train(
        cfg.model_config(), train_samples, val_samples, cfg.seed, out_dir,
        epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
        weight_decay=cfg.weight_decay, log=log,
    )
    print(f"best val F1 {result.best_f1:.4f}; checkpoint {result.checkpoint_path}")
    return 0


def _load_model(checkpoint, config_path):
    if config_path is None:
        sibling = Path(checkpoint).parent / "config.cfg"
        if not sibling.exists():
            raise ConfigError(
                f"eval/infer: pass --config (no config.cfg beside {checkpoint})"
            )
        config_path = sibling
    cfg = load_run_config(config_path)
    model = build_model(cfg.model_config(), seed=cfg.seed)
    load_checkpoint(model, checkpoint)
    return cfg, model


def _cmd_eval(args):
    cfg, model = _load_model(args.checkpoint, args.config)
    samples = D.load_split(args.data, args.split, cfg.task)
    out_dir = Path(args.out) if args.out else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    if args.size_sweep or args.ratio_sweep:
        if not (args.size_sweep and args.ratio_sweep):
            raise ConfigError("eval: --size-sweep and --ratio-sweep go together")
        rows = size_ratio_sweep(model, samples, _int_list(args.size_sweep),
                                _int_list(args.ratio_sweep))
        csv = "size,ratio,F1\n" + "".join(f"{s},{r},{f1:.6f}\n" for s, r, f1 in rows)
        if out_dir:
            (out_dir / "size_ratio_f1.csv").write_text(csv, encoding="utf-8")
        print(csv, end="")
        return 0

    counts = evaluate_samples(model, samples, patch=args.patch, overlap=args.overlap)
    p, r, f1, iou = metrics(counts)
    csv = f"split,P,R,F1,IoU\n{args.split},{p:.6f},{r:.6f},{f1:.6f},{iou:.6f}\n"
    if out_dir:
        (out_dir / f"eval_{args.split}.csv").write_text(csv, encoding="utf-8")
    print(csv, end="")
    return 0


def _cmd_infer(args):
    cfg, model = _load_model(args.checkpoint, args.config)
    image = D.read_raster(args.image)
    if image.ndim != 3:
        raise DataError(f"{args.image}: expected an RGB P6 raster")
    image_t2 = None
    if cfg.task == TASK_CHANGE_DETECTION:
        if not args.image_t2:
            raise ConfigError("infer: change detection needs --image-t2")
        image_t2 = D.read_raster(args.image_t2)
    h, w = image.shape[:2]
    patch = min(args.patch, h, w)
    logits = predict_logits_tiled(model, image, patch, min(args.overlap, patch - 1),
                                  image_t2)
    prob = 1.0 / (1.0 + np.exp(-logits))
    mask = np.where(prob >= args.threshold, D.MASK_FG, 0).astype(np.uint8)
    D.write_raster(mask, args.out)
    print(f"wrote {args.out} ({h}x{w})")
    return 0


def _cmd_scan_dump(args):
    for line in dump_orderings(args.h, args.w, args.mode):
        print(line)
    return 0


def _cmd_flops(args):
    csv = scaling_table(args.model, _int_list(args.sizes))
    if args.out:
        Path(args.out).write_text(csv, encoding="utf-8")
    print(csv, end="")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "scan-dump": _cmd_scan_dump,
    "flops": _cmd_flops,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"rsm {args.command}: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"rsm {args.command}: numeric failure: {e}", file=sys.stderr)
        return 4
    except (DataError, RsmError, ValueError) as e:
        print(f"rsm {args.command}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
