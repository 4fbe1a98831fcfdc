"""Synthetic stereo-pair generation with exact ground truth, plus dataset
manifests covering a flat on-disk layout and the KITTI-style directory tree.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DataError
from .geometry import CameraRig

TEXTURE_KINDS = ("noise", "gradient", "checker")

DEFAULT_RIG = CameraRig(baseline_m=0.1, focal_fx_px=960.0)
# Conventional rig of the KITTI stereo setup, used when a directory tree in
# that layout carries no rig.json.
KITTI_RIG = CameraRig(baseline_m=0.54, focal_fx_px=721.5377)


@dataclass
class StereoSample:
    """Rectified pair in [0, 1] with rig; ground truth is optional.

    gt_disparity / gt_occlusion are left-view maps (occlusion: 1 = also
    visible in the right view). gt_disparity_right exists so a horizontal
    flip augmentation can swap views without losing ground truth.
    """

    left: torch.Tensor
    right: torch.Tensor
    rig: CameraRig
    gt_disparity: torch.Tensor | None = None
    gt_occlusion: torch.Tensor | None = None
    gt_disparity_right: torch.Tensor | None = None


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Layered fronto-parallel scene: a full-frame background plus
    ``num_layers - 1`` rectangular foreground planes.

    Each layer's disparity is drawn from its (lo, hi) range; sampled values
    are sorted ascending so nearer (later-painted) layers always carry larger
    disparity. A single range applies to every layer.
    """

    image_hw: tuple[int, int] = (96, 320)
    num_layers: int = 3
    disparity_ranges: tuple = ((2.0, 30.0),)
    texture: str = "noise"
    seed: int = 0
    rig: CameraRig = DEFAULT_RIG

    def __post_init__(self):
        h, w = self.image_hw
        if h < 8 or w < 8:
            raise ValueError(f"image too small: {self.image_hw}")
        if self.num_layers < 1:
            raise ValueError("need at least one layer")
        if self.texture not in TEXTURE_KINDS:
            raise ValueError(f"texture must be one of {TEXTURE_KINDS}, got {self.texture!r}")
        ranges = self.ranges()
        for lo, hi in ranges:
            if not (0 < lo <= hi):
                raise ValueError(f"disparity range must satisfy 0 < lo <= hi, got ({lo}, {hi})")
            if hi >= w:
                raise ValueError(f"disparity {hi} exceeds image width {w}")

    def ranges(self) -> list[tuple[float, float]]:
        r = self.disparity_ranges
        if len(r) == 1:
            return [tuple(r[0])] * self.num_layers
        if len(r) != self.num_layers:
            raise ValueError(
                f"got {len(r)} disparity ranges for {self.num_layers} layers"
            )
        return [tuple(x) for x in r]


def _make_texture(kind: str, h: int, w: int, rng: np.random.Generator,
                  scale: float = 1.0, contrast: float = 1.0) -> np.ndarray:
    """Layer texture with perspective-consistent appearance coding.

    ``scale`` magnifies the texture (a plane seen closer shows coarser
    structure) and ``contrast`` attenuates it toward mid-gray (aerial
    perspective). Both are driven by the layer's disparity so that scene depth
    is monocularly identifiable, which the self-supervised task needs to
    generalize beyond the training pairs.
    """
    if kind == "noise":
        # band-limited noise: bilinear upsampling of random control grids at a
        # few octaves. Per-pixel white noise would make sub-pixel photometric
        # matching nearly flat around the optimum.
        acc = np.zeros((3, h, w))
        weight = 0.0
        for base, amp in ((16, 1.0), (8, 0.6), (4, 0.35)):
            cell = max(3, int(round(base * scale)))
            gh, gw = h // cell + 2, w // cell + 2
            grid = torch.from_numpy(rng.uniform(0, 1, size=(1, 3, gh, gw)))
            up = torch.nn.functional.interpolate(
                grid, scale_factor=cell, mode="bilinear", align_corners=False)
            acc += amp * up[0, :, :h, :w].numpy()
            weight += amp
        tex = acc / weight
        std = tex.std()
        if std > 1e-6:
            tex = 0.5 + (tex - tex.mean()) * (0.16 / std)
        return np.clip(0.5 + (tex - 0.5) * contrast, 0.0, 1.0)
    if kind == "gradient":
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        tex = np.empty((3, h, w))
        for c in range(3):
            # amplitudes keep the affine plane strictly inside [0, 1];
            # clipping would break the linearity the ramps exist for
            angle = rng.uniform(0, 2 * np.pi)
            gx = 0.22 * contrast * np.cos(angle)
            gy = 0.22 * contrast * np.sin(angle)
            tex[c] = 0.5 + gx * (2 * xs / w - 1) + gy * (2 * ys / h - 1)
        return tex
    if kind == "checker":
        cell = max(3, int(round(rng.integers(5, 12) * scale)))
        phase_x = int(rng.integers(0, cell))
        phase_y = int(rng.integers(0, cell))
        ys, xs = np.mgrid[0:h, 0:w]
        parity = ((xs + phase_x) // cell + (ys + phase_y) // cell) % 2
        # fixed luminance gap so contrast carries the depth cue, not the
        # random color draw
        jitter0 = rng.uniform(-0.05, 0.05, size=3)
        jitter1 = rng.uniform(-0.05, 0.05, size=3)
        c0 = 0.5 - (0.24 + jitter0) * contrast
        c1 = 0.5 + (0.24 + jitter1) * contrast
        return np.where(parity[None] == 0, c0[:, None, None], c1[:, None, None])
    raise ValueError(f"unknown texture kind {kind!r}")


def _sample_x(tex: np.ndarray, xq: np.ndarray) -> np.ndarray:
    """Horizontal bilinear sampling of (3, H, W) at per-column x positions,
    border-clamped. xq has shape (W,)."""
    w = tex.shape[-1]
    x = np.clip(xq, 0, w - 1)
    x0 = np.clip(np.floor(x), 0, max(w - 2, 0))
    wx = x - x0
    x0 = x0.astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    return tex[:, :, x0] * (1 - wx) + tex[:, :, x1] * wx


def generate_synthetic(spec: SyntheticSceneSpec) -> StereoSample:
    """Render a stereo pair and exact left-view ground truth.

    Layers are composited back to front. The right view samples each layer's
    texture at x + d (so the layer shifts left by its disparity) and nearer
    layers overwrite farther ones; the occlusion map marks left pixels whose
    right-view correspondence is covered by a nearer layer.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.image_hw
    n = spec.num_layers
    ranges = spec.ranges()

    disparities = np.sort(np.array([rng.uniform(lo, hi) for lo, hi in ranges]))
    lo_all = min(lo for lo, _ in ranges)
    hi_all = max(hi for _, hi in ranges)
    span = max(hi_all - lo_all, 1e-9)
    textures = []
    for d in disparities:
        scale = 0.5 + d / 16.0
        contrast = 0.3 + 0.7 * (d - lo_all) / span if hi_all > lo_all else 1.0
        textures.append(_make_texture(spec.texture, h, w, rng,
                                      scale=scale, contrast=contrast))

    # Rectangular supports in left-view pixel coordinates; layer 0 is the
    # full-frame background.
    rects = [(0, h, 0, w)]
    for _ in range(1, n):
        rh = int(rng.integers(max(4, h // 5), max(5, (2 * h) // 3)))
        rw = int(rng.integers(max(4, w // 5), max(5, (2 * w) // 3)))
        y0 = int(rng.integers(0, h - rh + 1))
        x0 = int(rng.integers(0, w - rw + 1))
        rects.append((y0, y0 + rh, x0, x0 + rw))

    left = textures[0].copy()
    disp_l = np.full((h, w), disparities[0])
    assigned = np.zeros((h, w), dtype=np.int64)
    for k in range(1, n):
        y0, y1, x0, x1 = rects[k]
        left[:, y0:y1, x0:x1] = textures[k][:, y0:y1, x0:x1]
        disp_l[y0:y1, x0:x1] = disparities[k]
        assigned[y0:y1, x0:x1] = k

    xs = np.arange(w, dtype=np.float64)
    right = _sample_x(textures[0], xs + disparities[0])
    disp_r = np.full((h, w), disparities[0])
    for k in range(1, n):
        y0, y1, x0, x1 = rects[k]
        xq = xs + disparities[k]
        cover = (xq >= x0) & (xq <= x1 - 1)
        vals = _sample_x(textures[k], xq)
        right[:, y0:y1, cover] = vals[:, y0:y1, cover]
        disp_r[y0:y1, cover] = disparities[k]

    occluded = np.zeros((h, w), dtype=bool)
    ys_grid, xs_grid = np.mgrid[0:h, 0:w]
    for k in range(n):
        on_k = assigned == k
        for m in range(k + 1, n):
            y0, y1, x0, x1 = rects[m]
            x_in_right = xs_grid - disparities[k] + disparities[m]
            covered = (x_in_right >= x0) & (x_in_right <= x1 - 1) \
                & (ys_grid >= y0) & (ys_grid < y1)
            occluded |= on_k & covered
    visible = (~occluded).astype(np.float64)

    to_t = lambda a: torch.from_numpy(np.ascontiguousarray(a)).float()
    return StereoSample(
        left=to_t(left),
        right=to_t(right),
        rig=spec.rig,
        gt_disparity=to_t(disp_l).unsqueeze(0),
        gt_occlusion=to_t(visible).unsqueeze(0),
        gt_disparity_right=to_t(disp_r).unsqueeze(0),
    )


@dataclass
class ManifestRecord:
    left: Path
    right: Path
    gt: Path | None = None


@dataclass
class DatasetManifest:
    root: Path
    split: str
    records: list[ManifestRecord] = field(default_factory=list)
    rig: CameraRig = DEFAULT_RIG

    def __len__(self) -> int:
        return len(self.records)


def _load_rig(root: Path, default: CameraRig) -> CameraRig:
    rig_path = root / "rig.json"
    if rig_path.exists():
        blob = json.loads(rig_path.read_text())
        return CameraRig(baseline_m=blob["baseline_m"], focal_fx_px=blob["focal_fx_px"])
    return default


def load_manifest(root, split: str) -> DatasetManifest:
    """Resolve a dataset under ``root``.

    Flat layout: a ``<split>.txt`` manifest with one sample per line
    ("left right [gt]", paths relative to root) plus a rig.json. KITTI
    layout: date/drive directories with image_02 (left) and image_03 (right)
    frame pairs.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root does not exist: {root}")

    split_file = root / f"{split}.txt"
    records: list[ManifestRecord] = []
    if split_file.exists():
        for ln, line in enumerate(split_file.read_text().splitlines(), 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) not in (2, 3):
                raise DataError(f"{split_file}:{ln}: expected 2 or 3 paths, got {len(parts)}")
            gt = root / parts[2] if len(parts) == 3 else None
            records.append(ManifestRecord(root / parts[0], root / parts[1], gt))
        rig = _load_rig(root, DEFAULT_RIG)
    else:
        lefts = sorted(root.glob("*/*/image_02/data/*.png"))
        if not lefts:
            raise DataError(
                f"no {split_file.name} manifest and no KITTI-style "
                f"*/*/image_02/data/*.png images under {root}"
            )
        for lp in lefts:
            rp = Path(str(lp).replace("image_02", "image_03"))
            records.append(ManifestRecord(lp, rp))
        rig = _load_rig(root, KITTI_RIG)

    missing = []
    for rec in records:
        for p in (rec.left, rec.right, rec.gt):
            if p is not None and not p.exists():
                missing.append(str(p))
    if missing:
        raise DataError("manifest references missing files:\n" + "\n".join(missing))
    if not records:
        raise DataError(f"empty manifest for split {split!r} under {root}")
    return DatasetManifest(root=root, split=split, records=records, rig=rig)


def read_image(path) -> torch.Tensor:
    """8-bit PNG (or other PIL-readable) image as a (3, H, W) float tensor in [0, 1]."""
    try:
        img = Image.open(path).convert("RGB")
    except Exception as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def write_image(path, image: torch.Tensor) -> None:
    arr = (image.clamp(0, 1).permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_sample(manifest: DatasetManifest, index: int) -> StereoSample:
    rec = manifest.records[index]
    left = read_image(rec.left)
    right = read_image(rec.right)
    gt_d = gt_occ = gt_dr = None
    if rec.gt is not None:
        blob = np.load(rec.gt)
        gt_d = torch.from_numpy(blob["disp_left"]).float().unsqueeze(0)
        if "occ_left" in blob:
            gt_occ = torch.from_numpy(blob["occ_left"]).float().unsqueeze(0)
        if "disp_right" in blob:
            gt_dr = torch.from_numpy(blob["disp_right"]).float().unsqueeze(0)
    return StereoSample(left=left, right=right, rig=manifest.rig,
                        gt_disparity=gt_d, gt_occlusion=gt_occ, gt_disparity_right=gt_dr)


def write_dataset(root, samples: list[StereoSample], split: str) -> None:
    """Write samples in the flat layout consumed by load_manifest: 8-bit PNG
    views, one .npz of ground-truth arrays per sample, a manifest, rig.json."""
    root = Path(root)
    for sub in ("left", "right", "gt"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        name = f"{split}_{i:05d}"
        write_image(root / "left" / f"{name}.png", s.left)
        write_image(root / "right" / f"{name}.png", s.right)
        if s.gt_disparity is not None:
            arrays = {"disp_left": s.gt_disparity.squeeze(0).numpy()}
            if s.gt_occlusion is not None:
                arrays["occ_left"] = s.gt_occlusion.squeeze(0).numpy()
            if s.gt_disparity_right is not None:
                arrays["disp_right"] = s.gt_disparity_right.squeeze(0).numpy()
            np.savez(root / "gt" / f"{name}.npz", **arrays)
            lines.append(f"left/{name}.png right/{name}.png gt/{name}.npz")
        else:
            lines.append(f"left/{name}.png right/{name}.png")
    (root / f"{split}.txt").write_text("\n".join(lines) + "\n")
    rig = samples[0].rig if samples else DEFAULT_RIG
    (root / "rig.json").write_text(json.dumps(
        {"baseline_m": rig.baseline_m, "focal_fx_px": rig.focal_fx_px}, indent=2))
