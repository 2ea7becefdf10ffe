"""Command-line surface: synth | patchify | train | eval | ablate | predict.

Every invocation prints its fully resolved configuration (defaults included)
before doing anything, then exits 0 on success, 1 on a runtime failure, 2 on
a usage error. All randomness flows from the single --seed flag.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .combined import is_combined_checkpoint, load_combined_checkpoint
from .data import (MaskImage, load_band_stats, load_manifest, load_raster_f32, patchify,
                   read_raster, save_manifest, write_pgm, write_raster)
from .errors import AquasegError
from .losses import METRICS_TABLE_HEADER, binarize
from .nn import load_checkpoint, unet_forward
from .synth import SHIFT_KINDS, SynthConfig, synth_generate, write_dataset
from .tensor import Tensor4, no_grad, sigmoid
from .trainer import (TrainConfig, ablate_training_size, ensure_band_stats,
                      evaluate_checkpoint, evaluate_model, train_combined, train_unet)


def _print_config(args: argparse.Namespace) -> None:
    for key in sorted(vars(args)):
        if key == "func":
            continue
        print(f"config {key}={getattr(args, key)}")


def _split_scene_counts(total: int) -> tuple[int, int, int]:
    """Split a total scene budget by the default 60:12:4 role ratio."""
    n_unl = max(1, round(total * 4 / 76))
    n_vhr = max(3, round(total * 12 / 76))
    n_hr = max(3, total - n_vhr - n_unl)
    return n_hr, n_vhr, n_unl


def cmd_synth(args) -> int:
    n_hr, n_vhr, n_unl = _split_scene_counts(args.scenes)
    config = SynthConfig(
        n_hr=n_hr, n_vhr_labelled=n_vhr, n_vhr_unlabelled=n_unl,
        vhr_size=args.vhr_size, factor=args.factor, shift=args.shift,
        shift_gain=args.shift_gain, shift_offset=args.shift_offset, seed=args.seed,
    )
    print(f"generating {n_hr} coarse + {n_vhr} fine labelled + {n_unl} fine unlabelled scenes")
    manifest_path = write_dataset(synth_generate(config), args.out)
    print(f"wrote {manifest_path}")
    return 0


def cmd_patchify(args) -> int:
    manifest = load_manifest(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    count = 0
    for entry in manifest.entries:
        image = read_raster(manifest.resolve(entry.image_path))
        mask = None
        if entry.mask_path:
            mask = MaskImage.from_raster(read_raster(manifest.resolve(entry.mask_path)))
        stem = Path(entry.image_path).stem
        for patch in patchify(image, mask, args.size, args.stride):
            name = f"{stem}_y{patch.oy:05d}_x{patch.ox:05d}"
            write_raster(patch.image, out_dir / f"{name}.aqr")
            mask_name = None
            if patch.mask is not None:
                mask_name = f"{name}_mask.aqr"
                write_raster(patch.mask.to_raster(), out_dir / mask_name)
            entries.append(type(entry)(image_path=f"{name}.aqr", mask_path=mask_name,
                                       role=entry.role, split=entry.split))
            count += 1
    save_manifest(out_dir / "manifest.csv", entries)
    ensure_band_stats(load_manifest(out_dir / "manifest.csv"))
    print(f"wrote {count} patches to {out_dir}")
    return 0


def _train_config(args) -> TrainConfig:
    mode = args.mode if args.mode == "combined" else f"unet_{args.role}"
    return TrainConfig(
        mode=mode, preset=args.preset, epochs=args.epochs,
        batch_size=args.batch, batch_hr=args.batch_hr, batch_vhr=args.batch_vhr,
        batch_unlabelled=args.batch_unlabelled, learning_rate=args.lr,
        loss_weights=(args.w1, args.w2, args.w3), bridge_factor=args.factor,
        seed=args.seed, checkpoint_path=args.ckpt,
        eval_every_epoch=args.eval_every_epoch, threshold=args.threshold,
    )


def cmd_train(args) -> int:
    config = _train_config(args)
    manifest = load_manifest(args.manifest)
    if config.mode == "combined":
        model, log = train_combined(config, manifest)
        val_net, val_role = model.unet1, "vhr_labelled"
    else:
        model, log = train_unet(config, manifest)
        val_net, val_role = model, {"unet_vhr": "vhr_labelled", "unet_hr": "hr_labelled"}[config.mode]
    if args.log:
        log.write_csv(args.log)
        print(f"wrote train log {args.log}")
    print(f"wrote checkpoint {args.ckpt}")
    if manifest.select(val_role, "val"):
        report = evaluate_model(val_net, manifest, val_role, "val", config.threshold)
        print(f"final val IoU={report.mean_iou:.4f} Dice={report.mean_dice:.4f} "
              f"({report.count} samples)")
    else:
        print("final val: no val split available")
    return 0


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    report, meta = evaluate_checkpoint(args.ckpt, manifest, args.split, args.threshold)
    label = "combined" if meta.get("mode") == "combined" else "unet"
    samples = meta.get("train_samples", "-")
    print(METRICS_TABLE_HEADER)
    print(report.table_row(samples, label))
    return 0


def cmd_ablate(args) -> int:
    config = TrainConfig(
        mode="unet_vhr", preset=args.preset, epochs=args.epochs,
        batch_size=args.batch, batch_hr=args.batch_hr, batch_vhr=args.batch_vhr,
        batch_unlabelled=args.batch_unlabelled, learning_rate=args.lr,
        loss_weights=(args.w1, args.w2, args.w3), bridge_factor=args.factor,
        seed=args.seed, threshold=args.threshold,
    )
    manifest = load_manifest(args.manifest)
    sizes = [int(s) for s in args.sizes.split(",") if s]
    table = ablate_training_size(sizes, config, manifest)
    print(table.to_text())
    if args.out:
        Path(args.out).write_text(table.to_csv())
        print(f"wrote {args.out}")
    return 0


def cmd_predict(args) -> int:
    if is_combined_checkpoint(args.ckpt):
        model = load_combined_checkpoint(args.ckpt)[0].unet1
    else:
        model = load_checkpoint(args.ckpt)[0]
    image_path = Path(args.image)
    stats_path = Path(args.stats) if args.stats else image_path.parent / "band_stats.txt"
    stats = load_band_stats(stats_path)
    arr = load_raster_f32(image_path)
    mean = stats.mean.astype(np.float32).reshape(-1, 1, 1)
    std = stats.std.astype(np.float32).reshape(-1, 1, 1)
    batch = Tensor4(((arr - mean) / std)[None])
    with no_grad():
        probs = sigmoid(unet_forward(model, batch)).data[0, 0]
    mask = binarize(probs, args.threshold)
    out = Path(args.out)
    write_raster(MaskImage(data=mask).to_raster(), out.with_suffix(".aqr"))
    write_pgm(out.with_suffix(".pgm"), mask * np.uint8(255))
    print(f"wrote {out.with_suffix('.aqr')} and {out.with_suffix('.pgm')} "
          f"(water fraction {mask.mean():.4f})")
    return 0


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", default="ternaus11-lite", help="network preset")
    p.add_argument("--batch", type=int, default=4, help="single-network batch size")
    p.add_argument("--batch-hr", type=int, default=4, help="combined: coarse stream batch")
    p.add_argument("--batch-vhr", type=int, default=2, help="combined: labelled fine stream batch")
    p.add_argument("--batch-unlabelled", type=int, default=1,
                   help="combined: unlabelled fine stream batch")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    p.add_argument("--w1", type=float, default=1.0, help="labelled fine loss weight")
    p.add_argument("--w2", type=float, default=1.0, help="coarse loss weight")
    p.add_argument("--w3", type=float, default=0.1, help="consistency loss weight")
    p.add_argument("--factor", type=int, default=4, help="fine-to-coarse bridge factor")
    p.add_argument("--threshold", type=float, default=0.5, help="mask binarization threshold")
    p.add_argument("--seed", type=int, default=0, help="master random seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aquaseg",
        description="Water segmentation experiments: single U-Net baseline vs a "
                    "two-resolution combined model, on synthetic multiband scenes.")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth", help="generate a synthetic two-resolution dataset",
                       formatter_class=fmt)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--scenes", type=int, default=76,
                   help="total scene count, split 60:12:4 across roles")
    p.add_argument("--vhr-size", type=int, default=512, help="fine scene edge in pixels")
    p.add_argument("--factor", type=int, default=4, help="fine-to-coarse derivation factor")
    p.add_argument("--shift", choices=SHIFT_KINDS, default="none",
                   help="distribution shift applied to coarse radiometry")
    p.add_argument("--shift-gain", type=float, default=1.15, help="radiometric shift gain")
    p.add_argument("--shift-offset", type=float, default=0.05, help="radiometric shift offset")
    p.add_argument("--seed", type=int, default=0, help="master random seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("patchify", help="tile every manifest raster into fixed-size patches",
                       formatter_class=fmt)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--size", type=int, default=512, help="patch edge in pixels")
    p.add_argument("--stride", type=int, default=None,
                   help="window stride (default: equal to size, non-overlapping)")
    p.set_defaults(func=cmd_patchify)

    p = sub.add_parser("train", help="train the baseline or the combined model",
                       formatter_class=fmt)
    p.add_argument("--mode", choices=("unet", "combined"), required=True)
    p.add_argument("--role", choices=("vhr", "hr"), default="vhr",
                   help="which labelled stream a plain unet trains on")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True, help="checkpoint output path")
    p.add_argument("--log", default=None, help="train log CSV output path")
    p.add_argument("--epochs", type=int, default=None,
                   help="epoch count (default: 25 for unet, 40 for combined)")
    p.add_argument("--eval-every-epoch", action="store_true",
                   help="score the val split each epoch and keep a .best checkpoint")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on one split", formatter_class=fmt)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="training-set-size sweep for both models",
                       formatter_class=fmt)
    p.add_argument("--manifest", required=True)
    p.add_argument("--sizes", required=True,
                   help="comma-separated labelled-fine training set sizes, e.g. 733,560,400,240,100")
    p.add_argument("--epochs", type=int, default=None,
                   help="epoch count per training (default: 25 unet / 40 combined)")
    p.add_argument("--out", default=None, help="CSV output path")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("predict", help="segment one raster and export the mask",
                       formatter_class=fmt)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="input AQR raster")
    p.add_argument("--out", required=True, help="output path prefix (.aqr and .pgm)")
    p.add_argument("--stats", default=None,
                   help="band stats file (default: band_stats.txt next to the image)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "train" and args.epochs is None:
        args.epochs = 40 if args.mode == "combined" else 25
    _print_config(args)
    try:
        return args.func(args)
    except (AquasegError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
