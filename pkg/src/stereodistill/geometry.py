"""Differentiable geometric core: disparity quantization, bilinear warping,
offset refinement, volume-to-disparity readout, stereoscopic synthesis and
left-view reprojection.

Conventions used throughout the package:

* Feature maps are torch tensors shaped ``(C, H, W)`` or ``(B, C, H, W)``.
* Disparity and depth maps carry an explicit channel axis: ``(..., 1, H, W)``.
* Offset maps are ``(..., 2, H, W)`` with channel 0 = horizontal (x) and
  channel 1 = vertical (y) displacement in pixels.
* Out-of-range sampling locations are border-clamped.
* Synthesizing the right view samples the left view at ``x + d`` (scene
  content moves left in the right image), the sign consistent with the
  left-reprojection correspondence ``x' = x - B*fx / D``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class CameraRig:
    """Rectified stereo rig: baseline in meters, horizontal focal length in pixels."""

    baseline_m: float
    focal_fx_px: float

    def __post_init__(self):
        if not (self.baseline_m > 0 and self.focal_fx_px > 0):
            raise ValueError(
                f"baseline and focal length must be positive, "
                f"got B={self.baseline_m}, fx={self.focal_fx_px}"
            )

    @property
    def bf(self) -> float:
        """Product B*fx (meter.pixels), the disparity-depth conversion constant."""
        return self.baseline_m * self.focal_fx_px


@dataclass(frozen=True)
class DisparityLevels:
    """Discrete disparity levels in pixels, descending from d_max to d_min.

    ``values`` is a float64 tensor of shape (N,); ops cast it to the dtype of
    whatever tensor it is combined with.
    """

    values: torch.Tensor
    d_min: float
    d_max: float

    def __post_init__(self):
        if self.values.ndim != 1 or self.values.numel() < 1:
            raise ValueError("levels must be a non-empty 1-D tensor")

    @property
    def n(self) -> int:
        return self.values.numel()


@dataclass
class DisparityLogitVolume:
    """Per-pixel logits over disparity levels; softmax over the level axis
    yields a disparity probability volume.

    ``logits`` is ``(N, H, W)`` or ``(B, N, H, W)`` with N == levels.n.
    """

    logits: torch.Tensor
    levels: DisparityLevels

    def __post_init__(self):
        if self.logits.ndim not in (3, 4):
            raise ValueError(f"logits must be 3-D or 4-D, got shape {tuple(self.logits.shape)}")
        if self.logits.shape[-3] != self.levels.n:
            raise ValueError(
                f"logit channels ({self.logits.shape[-3]}) do not match "
                f"number of levels ({self.levels.n})"
            )

    def probabilities(self) -> torch.Tensor:
        """Softmax over the level axis (numerically stable)."""
        return torch.softmax(self.logits, dim=-3)


def quantize_disparities(d_min: float, d_max: float, n: int) -> DisparityLevels:
    """Exponentially spaced disparity levels: d_max * (d_min/d_max)^(k/(N-1)).

    Endpoints are exact: values[0] == d_max, values[N-1] == d_min. N == 1
    returns the single level [d_max].
    """
    if not (0 < d_min <= d_max):
        raise ValueError(f"need 0 < d_min <= d_max, got d_min={d_min}, d_max={d_max}")
    if n < 1:
        raise ValueError(f"need at least one level, got n={n}")
    if d_min < d_max and n < 2:
        raise ValueError("n >= 2 required when d_min < d_max")
    if n == 1:
        values = torch.tensor([float(d_max)], dtype=torch.float64)
    else:
        exponents = torch.arange(n, dtype=torch.float64) / (n - 1)
        values = d_max * (d_min / d_max) ** exponents
        values[0] = d_max
        values[-1] = d_min
    return DisparityLevels(values=values, d_min=float(d_min), d_max=float(d_max))


def _as_batched(t: torch.Tensor, name: str) -> tuple[torch.Tensor, bool]:
    if t.ndim == 3:
        return t.unsqueeze(0), True
    if t.ndim == 4:
        return t, False
    raise ValueError(f"{name} must be 3-D or 4-D, got shape {tuple(t.shape)}")


def bilinear_sample(feature: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Sample ``feature`` at continuous pixel locations with border clamping.

    feature: (C, H, W) or (B, C, H, W)
    coords:  (2, Ho, Wo) or (B, 2, Ho, Wo); channel 0 = x, channel 1 = y.

    Returns the interpolated map with spatial shape (Ho, Wo). Differentiable
    in both the feature values and the coordinates; locations outside the
    image clamp to the border pixel (and carry no coordinate gradient there).
    """
    f, squeeze = _as_batched(feature, "feature")
    c, c_squeeze = _as_batched(coords, "coords")
    if squeeze != c_squeeze:
        if squeeze and not c_squeeze:
            f = f.expand(c.shape[0], -1, -1, -1)
            squeeze = False
        else:
            raise ValueError("feature is batched but coords is not")
    if c.shape[1] != 2:
        raise ValueError(f"coords must have 2 channels, got {c.shape[1]}")
    if f.shape[0] != c.shape[0]:
        raise ValueError(f"batch mismatch: feature {f.shape[0]} vs coords {c.shape[0]}")

    b, ch, h, w = f.shape
    ho, wo = c.shape[-2:]

    x = c[:, 0].clamp(0, w - 1)
    y = c[:, 1].clamp(0, h - 1)
    # Keep x0+1 a valid column; at the right border the weight shifts fully
    # onto x1 so the border pixel is still reproduced exactly.
    x0 = x.floor().clamp(0, max(w - 2, 0))
    y0 = y.floor().clamp(0, max(h - 2, 0))
    wx = (x - x0).unsqueeze(1)
    wy = (y - y0).unsqueeze(1)

    x0i = x0.long()
    y0i = y0.long()
    x1i = (x0i + 1).clamp(max=w - 1)
    y1i = (y0i + 1).clamp(max=h - 1)

    flat = f.reshape(b, ch, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(b, 1, ho * wo).expand(b, ch, ho * wo)
        return flat.gather(2, idx).reshape(b, ch, ho, wo)

    f00 = gather(y0i, x0i)
    f01 = gather(y0i, x1i)
    f10 = gather(y1i, x0i)
    f11 = gather(y1i, x1i)

    top = f00 + wx * (f01 - f00)
    bottom = f10 + wx * (f11 - f10)
    out = top + wy * (bottom - top)
    return out.squeeze(0) if squeeze else out


def _base_grid(h: int, w: int, dtype, device) -> torch.Tensor:
    ys = torch.arange(h, dtype=dtype, device=device)
    xs = torch.arange(w, dtype=dtype, device=device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=0)


def refine(feature: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    """Resample ``feature`` at p + delta(p) with the bilinear kernel.

    delta has shape (..., 2, H, W) matching feature's spatial size. A zero
    offset map reproduces the input exactly.
    """
    if feature.shape[-2:] != delta.shape[-2:]:
        raise ValueError(
            f"feature {tuple(feature.shape)} and offsets {tuple(delta.shape)} "
            f"must share spatial size"
        )
    if delta.shape[-3] != 2:
        raise ValueError(f"offset map must have 2 channels, got {delta.shape[-3]}")
    h, w = feature.shape[-2:]
    grid = _base_grid(h, w, delta.dtype, delta.device)
    coords = grid + delta if delta.ndim == 3 else grid.unsqueeze(0) + delta
    return bilinear_sample(feature, coords)


def shift_horizontal(t: torch.Tensor, dx: float) -> torch.Tensor:
    """Sample ``t`` at (x + dx, y): contents move left by dx pixels."""
    h, w = t.shape[-2:]
    tb, squeeze = _as_batched(t, "tensor")
    dtype = t.dtype if t.is_floating_point() else torch.float32
    grid = _base_grid(h, w, dtype, t.device)
    coords = grid.clone()
    coords[0] += dx
    out = bilinear_sample(tb, coords.unsqueeze(0).expand(tb.shape[0], -1, -1, -1))
    return out.squeeze(0) if squeeze else out


def volume_to_disparity(volume: DisparityLogitVolume) -> torch.Tensor:
    """Probability-weighted disparity readout: sum_n softmax(V)_n * d_n.

    Returns a (..., 1, H, W) map bounded by [d_min, d_max].
    """
    probs = volume.probabilities()
    levels = volume.levels.values.to(dtype=probs.dtype, device=probs.device)
    d = (probs * levels.view(-1, 1, 1)).sum(dim=-3, keepdim=True)
    return d


def disparity_to_depth(disparity: torch.Tensor, rig: CameraRig) -> torch.Tensor:
    """Element-wise depth D = B*fx / d (meters); requires d > 0."""
    if not bool((disparity > 0).all()):
        raise ValueError("disparity must be strictly positive everywhere")
    return rig.bf / disparity


def synthesize_right(volume: DisparityLogitVolume, left: torch.Tensor) -> torch.Tensor:
    """Synthesize the right view from the left image and a left logit volume.

    Each logit channel n and the left image are shifted by the level
    disparity d_n (sampling at x + d_n); the softmax of the shifted logits
    weights the shifted images:

        right_hat = sum_n softmax_n(shifted logits) * shifted_left_n

    Fully differentiable in the logits and the left image.
    """
    logits, v_squeeze = _as_batched(volume.logits, "logits")
    left_b, l_squeeze = _as_batched(left, "left")
    if v_squeeze != l_squeeze:
        raise ValueError("volume and left image must agree on batching")
    if logits.shape[-2:] != left_b.shape[-2:]:
        raise ValueError(
            f"volume spatial size {tuple(logits.shape[-2:])} does not match "
            f"image {tuple(left_b.shape[-2:])}"
        )
    if logits.shape[0] != left_b.shape[0]:
        raise ValueError("batch mismatch between volume and left image")

    b, n, h, w = logits.shape
    c = left_b.shape[1]
    dtype = left_b.dtype
    device = left_b.device
    levels = volume.levels.values.to(dtype=dtype, device=device)

    grid = _base_grid(h, w, dtype, device)
    coords = grid.unsqueeze(0).repeat(n, 1, 1, 1)
    coords[:, 0] += levels.view(n, 1, 1)
    coords = coords.unsqueeze(0).expand(b, n, 2, h, w).reshape(b * n, 2, h, w)

    shifted_logits = bilinear_sample(
        logits.reshape(b * n, 1, h, w), coords
    ).reshape(b, n, h, w)
    shifted_left = bilinear_sample(
        left_b.unsqueeze(1).expand(b, n, c, h, w).reshape(b * n, c, h, w), coords
    ).reshape(b, n, c, h, w)

    weights = torch.softmax(shifted_logits, dim=1).unsqueeze(2)
    out = (weights * shifted_left).sum(dim=1)
    return out.squeeze(0) if l_squeeze else out


def reproject_left(right: torch.Tensor, depth: torch.Tensor, rig: CameraRig) -> torch.Tensor:
    """Reconstruct the left view by sampling the right image at x - B*fx/D.

    right: (..., C, H, W); depth: (..., 1, H, W), strictly positive.
    Differentiable in both the right image and the depth map.
    """
    if not bool((depth > 0).all()):
        raise ValueError("depth must be strictly positive everywhere")
    if right.shape[-2:] != depth.shape[-2:]:
        raise ValueError(
            f"right image {tuple(right.shape)} and depth {tuple(depth.shape)} "
            f"must share spatial size"
        )
    h, w = right.shape[-2:]
    disparity = rig.bf / depth
    grid = _base_grid(h, w, depth.dtype, depth.device)
    if depth.ndim == 3:
        x = grid[0:1] - disparity
        y = grid[1:2].expand_as(x)
        coords = torch.cat([x, y], dim=0)
    else:
        x = grid[0:1].unsqueeze(0) - disparity
        y = grid[1:2].unsqueeze(0).expand_as(x)
        coords = torch.cat([x, y], dim=1)
    return bilinear_sample(right, coords)
