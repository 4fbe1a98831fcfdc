"""Command-line entry points: gen-data, train, eval, infer, offsets.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import config as config_mod
from .aggregation import offset_norm_stats
from .config import Config, apply_overrides, load_config
from .data import (
    SyntheticSceneSpec,
    TEXTURE_KINDS,
    generate_synthetic,
    load_manifest,
    load_sample,
    read_image,
)
from .errors import ConfigError, DataError, NumericError
from .evaluation import evaluate_samples, predict_depth, write_report
from .geometry import CameraRig
from .network import BackboneSpec, DepthNet, load_checkpoint
from .geometry import quantize_disparities
from .trainer import Trainer

DEPTH_PNG_SCALE_MM = 1000.0  # 1 png unit = 1 mm; 16-bit cap = 65.535 m


def _add_common(p: argparse.ArgumentParser, config_required: bool = True):
    p.add_argument("--config", required=config_required, help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable, dotted keys)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--device", default=None, help="torch device (default from config)")


def _load_cfg(args) -> Config:
    cfg = load_config(args.config)
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg = apply_overrides(cfg, [f"train.seed={args.seed}"])
    if getattr(args, "device", None):
        cfg = apply_overrides(cfg, [f"run.device={args.device}"])
    return cfg


def _build_model_from_checkpoint(path) -> tuple[DepthNet, dict]:
    payload = load_checkpoint(path)
    flat = payload["config"]
    levels = quantize_disparities(flat["train.levels.d_min"], flat["train.levels.d_max"],
                                  flat["train.levels.n"])
    model = DepthNet(
        backbone=BackboneSpec(name=flat["model.backbone"],
                              stage_channels=tuple(flat["model.stage_channels"])),
        levels=levels,
        decoder_widths=tuple(flat["model.decoder_widths"]),
        restore_channels=tuple(flat["model.restore_channels"]),
        offset_hidden=flat["model.offset_hidden"],
    )
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, flat


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    g = cfg.gen
    out = Path(args.out)
    rig = CameraRig(baseline_m=g.baseline_m, focal_fx_px=g.focal_fx_px)
    from .data import write_dataset

    for split, count, seed0 in (("train", g.num_train, g.seed),
                                ("test", g.num_test, g.seed + 10_000_000)):
        samples = []
        for i in range(count):
            spec = SyntheticSceneSpec(
                image_hw=(g.height, g.width),
                num_layers=g.num_layers,
                disparity_ranges=((g.disp_min, g.disp_max),),
                texture=TEXTURE_KINDS[i % len(TEXTURE_KINDS)],
                seed=seed0 + i,
                rig=rig,
            )
            samples.append(generate_synthetic(spec))
        write_dataset(out, samples, split)
        print(f"wrote {count} {split} pairs under {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    if not cfg.data.root:
        raise ConfigError("data.root must point at a dataset (see gen-data)")
    manifest = load_manifest(cfg.data.root, cfg.data.train_split)
    samples = [load_sample(manifest, i) for i in range(len(manifest))]
    trainer = Trainer(cfg, samples, out_dir=args.out)
    if args.resume:
        trainer.resume(args.resume)
    final = trainer.train()
    print(f"final checkpoint: {final}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    model, _ = _build_model_from_checkpoint(args.checkpoint)
    manifest = load_manifest(cfg.data.root, cfg.data.test_split)
    samples = [load_sample(manifest, i) for i in range(len(manifest))]
    mean, per_image = evaluate_samples(
        model, samples, depth_cap=args.depth_cap,
        use_garg_crop=not args.no_crop, use_post_process=args.post_process)
    write_report(args.out, mean, per_image)
    print(json.dumps({"mean": mean.__dict__, "num_images": len(per_image)}, indent=2))
    return 0


def _save_depth_png16(path, depth: torch.Tensor) -> None:
    mm = (depth.squeeze(0).numpy() * DEPTH_PNG_SCALE_MM).round()
    arr = np.clip(mm, 0, 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)


def _save_colormap(path, depth: torch.Tensor) -> None:
    import matplotlib

    inv = 1.0 / depth.squeeze(0).numpy()
    lo, hi = inv.min(), inv.max()
    norm = (inv - lo) / (hi - lo) if hi > lo else np.zeros_like(inv)
    rgba = matplotlib.colormaps["magma"](norm)
    Image.fromarray((rgba[..., :3] * 255).astype(np.uint8)).save(path)


def cmd_infer(args) -> int:
    model, flat = _build_model_from_checkpoint(args.checkpoint)
    rig = CameraRig(
        baseline_m=args.baseline if args.baseline else flat["gen.baseline_m"],
        focal_fx_px=args.fx if args.fx else flat["gen.focal_fx_px"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    wrote = 0
    for img_path in args.images:
        try:
            image = read_image(img_path)
        except DataError as exc:
            print(f"error: {exc}", file=sys.stderr)
            failures += 1
            continue
        depth = predict_depth(model, image, rig, use_post_process=args.post_process)
        stem = Path(img_path).stem
        if args.png16:
            _save_depth_png16(out / f"{stem}_depth16.png", depth)
            (out / f"{stem}_depth16.json").write_text(json.dumps({
                "units_per_meter": DEPTH_PNG_SCALE_MM,
                "max_representable_m": 65535 / DEPTH_PNG_SCALE_MM,
            }, indent=2))
        if args.colormap:
            _save_colormap(out / f"{stem}_depth_vis.png", depth)
        wrote += 1
    if wrote == 0 and failures > 0:
        raise DataError(f"all {failures} input images were unreadable")
    print(f"wrote depth for {wrote} image(s) to {out}" +
          (f" ({failures} unreadable, skipped)" if failures else ""))
    return 0


def cmd_offsets(args) -> int:
    model, _ = _build_model_from_checkpoint(args.checkpoint)
    image = read_image(args.image)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        features = model.encoder_forward(image.unsqueeze(0))
        _, collected = model.decoder.forward(features, "distilled", collect_offsets=True)

    import matplotlib.colors as mcolors

    report = {}
    for stage_idx, offsets in enumerate(collected, start=1):
        stage = {}
        for name, delta in offsets.items():
            norm = offset_norm_stats([delta])[0]
            stage[name] = norm
            d = delta.squeeze(0).numpy()
            mag = np.sqrt(d[0] ** 2 + d[1] ** 2)
            angle = (np.arctan2(d[1], d[0]) + np.pi) / (2 * np.pi)
            sat = mag / mag.max() if mag.max() > 0 else np.zeros_like(mag)
            hsv = np.stack([angle, sat, np.ones_like(mag)], axis=-1)
            rgb = (mcolors.hsv_to_rgb(hsv) * 255).astype(np.uint8)
            Image.fromarray(rgb).save(out / f"offsets_stage{stage_idx}_{name}.png")
        report[f"stage{stage_idx}"] = stage
    (out / "offset_norms.json").write_text(json.dumps(report, indent=2) + "\n")
    print(json.dumps(report, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stereodistill",
        description="Stereo-trained self-supervised monocular depth estimation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic stereo dataset")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--post-process", action="store_true", help="flip-blend predictions")
    p.add_argument("--no-crop", action="store_true", help="disable the evaluation crop")
    p.add_argument("--depth-cap", type=float, default=80.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict depth maps for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("images", nargs="+", help="input image paths")
    p.add_argument("--post-process", action="store_true")
    p.add_argument("--png16", action=argparse.BooleanOptionalAction, default=True,
                   help="write 16-bit millimeter depth PNGs")
    p.add_argument("--colormap", action="store_true", help="write color visualizations")
    p.add_argument("--baseline", type=float, default=None, help="rig baseline override (m)")
    p.add_argument("--fx", type=float, default=None, help="rig focal length override (px)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("offsets", help="report offset-map norms and visualizations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("image", help="input image path")
    p.set_defaults(func=cmd_offsets)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
