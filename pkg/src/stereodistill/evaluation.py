"""Depth evaluation: standard error/accuracy metrics with crop and depth-cap
protocol, the flip-blend post-processing step, and disparity-space
diagnostics for the synthetic harness.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import torch

from .data import StereoSample
from .geometry import disparity_to_depth

GARG_ROW_LO = 0.40810811
GARG_ROW_HI = 0.99189189
GARG_COL_LO = 0.03594771
GARG_COL_HI = 0.96405229


@dataclass
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    log_rmse: float
    a1: float
    a2: float
    a3: float
    n_valid: int


def compute_metrics(pred_depth: torch.Tensor, gt_depth: torch.Tensor,
                    valid_mask: torch.Tensor | None = None,
                    depth_cap: float = 80.0) -> DepthMetrics:
    """Mean error/accuracy metrics over valid pixels, both depths capped.

    pred and gt must be positive on valid pixels; an empty valid set is an
    error rather than a silent zero row.
    """
    if pred_depth.shape != gt_depth.shape:
        raise ValueError(
            f"shape mismatch: {tuple(pred_depth.shape)} vs {tuple(gt_depth.shape)}")
    if valid_mask is None:
        valid_mask = torch.ones_like(gt_depth, dtype=torch.bool)
    if valid_mask.shape != gt_depth.shape:
        raise ValueError("valid mask must match depth shape")
    mask = valid_mask.bool()
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise ValueError("no valid pixels to evaluate")
    pred = pred_depth[mask].double()
    gt = gt_depth[mask].double()
    if not bool((gt > 0).all()) or not bool((pred > 0).all()):
        raise ValueError("depths must be positive on valid pixels")
    pred = pred.clamp(max=depth_cap)
    gt = gt.clamp(max=depth_cap)

    err = pred - gt
    ratio = torch.maximum(pred / gt, gt / pred)
    return DepthMetrics(
        abs_rel=float((err.abs() / gt).mean()),
        sq_rel=float((err ** 2 / gt).mean()),
        rmse=float((err ** 2).mean().sqrt()),
        log_rmse=float(((pred.log() - gt.log()) ** 2).mean().sqrt()),
        a1=float((ratio < 1.25).double().mean()),
        a2=float((ratio < 1.25 ** 2).double().mean()),
        a3=float((ratio < 1.25 ** 3).double().mean()),
        n_valid=n_valid,
    )


def garg_crop_mask(h: int, w: int) -> torch.Tensor:
    """Conventional center evaluation crop as a bool (H, W) mask."""
    if h < 2 or w < 2:
        raise ValueError("image too small for a crop")
    mask = torch.zeros(h, w, dtype=torch.bool)
    r0, r1 = int(GARG_ROW_LO * h), int(GARG_ROW_HI * h)
    c0, c1 = int(GARG_COL_LO * w), int(GARG_COL_HI * w)
    mask[r0:r1, c0:c1] = True
    return mask


def post_process(depth_normal: torch.Tensor, depth_from_flipped: torch.Tensor) -> torch.Tensor:
    """Blend a prediction with the flipped-input prediction (already flipped
    back): per-pixel mean, except 5%-wide border ramps that keep the normal
    prediction at the left edge and the flipped-input one at the right edge."""
    if depth_normal.shape != depth_from_flipped.shape:
        raise ValueError("post-process inputs must share shape")
    w = depth_normal.shape[-1]
    if w < 2:
        raise ValueError("width must be >= 2")
    xs = torch.linspace(0, 1, w, dtype=depth_normal.dtype, device=depth_normal.device)
    left_w = (1.0 - 20.0 * (xs - 0.05)).clamp(0.0, 1.0)
    right_w = left_w.flip(0)
    mean_w = 1.0 - left_w - right_w
    return left_w * depth_normal + right_w * depth_from_flipped \
        + mean_w * 0.5 * (depth_normal + depth_from_flipped)


def predict_depth(model, image: torch.Tensor, rig, use_post_process: bool = False,
                  path: str = "distilled") -> torch.Tensor:
    """Model depth for one (3, H, W) image, optionally flip-blended."""
    depth = model.infer_depth(image, rig, path=path)
    if use_post_process:
        depth_flip = model.infer_depth(image.flip(-1), rig, path=path).flip(-1)
        depth = post_process(depth, depth_flip)
    return depth


def evaluate_samples(model, samples: list[StereoSample], depth_cap: float = 80.0,
                     use_garg_crop: bool = True, use_post_process: bool = False,
                     path: str = "distilled") -> tuple[DepthMetrics, list[DepthMetrics]]:
    """Protocol composition over ground-truthed samples: infer, optional
    flip blend, crop, cap, and a mean over per-image metrics."""
    per_image = []
    for s in samples:
        if s.gt_disparity is None:
            raise ValueError("evaluation samples need ground-truth disparity")
        pred = predict_depth(model, s.left, s.rig, use_post_process, path)
        gt = disparity_to_depth(s.gt_disparity, s.rig)
        valid = gt > 0
        if use_garg_crop:
            valid = valid & garg_crop_mask(*gt.shape[-2:])
        per_image.append(compute_metrics(pred, gt, valid, depth_cap))
    n = len(per_image)
    if n == 0:
        raise ValueError("no samples to evaluate")
    mean = DepthMetrics(
        **{k: (sum(getattr(m, k) for m in per_image) / n if k != "n_valid"
               else sum(m.n_valid for m in per_image))
           for k in DepthMetrics.__dataclass_fields__},
    )
    mean.n_valid = int(mean.n_valid)
    return mean, per_image


def evaluate_manifest(model, manifest, depth_cap: float = 80.0,
                      use_garg_crop: bool = True, use_post_process: bool = False,
                      path: str = "distilled") -> tuple[DepthMetrics, list[DepthMetrics]]:
    """evaluate_samples over a DatasetManifest loaded from disk."""
    from .data import load_sample

    samples = [load_sample(manifest, i) for i in range(len(manifest))]
    return evaluate_samples(model, samples, depth_cap, use_garg_crop,
                            use_post_process, path)


def disparity_error_stats(model, samples: list[StereoSample],
                          path: str = "distilled") -> dict:
    """Median absolute disparity error (pixels) and delta<1.25 ratio accuracy
    over all ground-truth pixels of the sample set."""
    abs_errors = []
    ratios = []
    for s in samples:
        pred = model.infer_disparity(s.left, path=path)
        gt = s.gt_disparity
        abs_errors.append((pred - gt).abs().flatten())
        ratios.append(torch.maximum(pred / gt, gt / pred).flatten())
    abs_errors = torch.cat(abs_errors)
    ratios = torch.cat(ratios)
    return {
        "median_abs_disparity_error": float(abs_errors.median()),
        "disparity_ratio_a1": float((ratios < 1.25).float().mean()),
    }


def write_report(out_dir, mean: DepthMetrics, per_image: list[DepthMetrics]) -> None:
    """CSV per-image table plus a JSON summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fields = list(DepthMetrics.__dataclass_fields__)
    with open(out_dir / "per_image_metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index"] + fields)
        for i, m in enumerate(per_image):
            writer.writerow([i] + [getattr(m, k) for k in fields])
    (out_dir / "metrics_summary.json").write_text(
        json.dumps({"mean": asdict(mean), "num_images": len(per_image)}, indent=2) + "\n")
