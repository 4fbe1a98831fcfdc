"""Reliability masks that select trustworthy pixels from the raw depth
prediction before it is used as a distillation target.

All masks are binary float maps computed without gradient; they enter the
loss graph as constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class MaskThresholds:
    """Thresholds gating the reliability masks.

    alpha:   L1/DSSIM balance of the photometric error.
    epsilon: max allowed raw-minus-distilled error gap.
    t1:      absolute photometric error cutoff.
    t2:      disparity-gap cutoff of the occlusion test.
    k:       number of right-neighbors scanned by the occlusion test.
    """

    alpha: float = 0.15
    epsilon: float = 1e-5
    t1: float = 0.2
    t2: float = 0.5
    k: int = 61

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.t1 <= 0 or self.t2 <= 0:
            raise ValueError("t1 and t2 must be positive")


_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def _box3(x: torch.Tensor) -> torch.Tensor:
    """3x3 box filter with reflection padding, same spatial size."""
    if x.ndim == 3:
        return F.avg_pool2d(F.pad(x.unsqueeze(0), (1, 1, 1, 1), mode="reflect"), 3, 1).squeeze(0)
    return F.avg_pool2d(F.pad(x, (1, 1, 1, 1), mode="reflect"), 3, 1)


def ssim(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Per-pixel, per-channel SSIM over a 3x3 box window."""
    mu_x = _box3(x)
    mu_y = _box3(y)
    sigma_x = _box3(x * x) - mu_x * mu_x
    sigma_y = _box3(y * y) - mu_y * mu_y
    sigma_xy = _box3(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + _SSIM_C1) * (2 * sigma_xy + _SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + _SSIM_C1) * (sigma_x + sigma_y + _SSIM_C2)
    return num / den


def photometric_error(reprojected: torch.Tensor, target: torch.Tensor, alpha: float) -> torch.Tensor:
    """Per-pixel photometric difference alpha*L1 + (1-alpha)*DSSIM, channel-averaged.

    DSSIM = (1 - SSIM)/2, so identical images score exactly zero. Returns a
    (..., 1, H, W) map.
    """
    if reprojected.shape != target.shape:
        raise ValueError(
            f"shape mismatch: {tuple(reprojected.shape)} vs {tuple(target.shape)}"
        )
    l1 = (reprojected - target).abs().mean(dim=-3, keepdim=True)
    dssim = ((1.0 - ssim(reprojected, target)) / 2.0).mean(dim=-3, keepdim=True)
    return alpha * l1 + (1.0 - alpha) * dssim


def photometric_mask(
    err_raw: torch.Tensor, err_distilled: torch.Tensor, thresholds: MaskThresholds
) -> torch.Tensor:
    """1 where the raw prediction reprojects at least as well as the distilled
    one (gap < epsilon) and its absolute error is below t1."""
    if err_raw.shape != err_distilled.shape:
        raise ValueError("error maps must share shape")
    with torch.no_grad():
        keep = (err_raw - err_distilled < thresholds.epsilon) & (err_raw < thresholds.t1)
        return keep.to(err_raw.dtype)


def occlusion_mask(disparity: torch.Tensor, thresholds: MaskThresholds) -> torch.Tensor:
    """1 on pixels whose right-view correspondence is not covered by a nearer
    surface.

    A pixel p is flagged occluded when some right-neighbor p_i = p + (i, 0),
    i = 1..k, satisfies |d(p_i) - d(p) - i| < t2. Neighbors beyond the right
    image border are skipped; a pixel with no valid neighbor stays visible.
    """
    with torch.no_grad():
        d = disparity.detach()
        w = d.shape[-1]
        min_gap = torch.full_like(d, float("inf"))
        for i in range(1, thresholds.k + 1):
            if i >= w:
                break
            gap = (d[..., i:] - d[..., : w - i] - float(i)).abs()
            region = min_gap[..., : w - i]
            min_gap[..., : w - i] = torch.minimum(region, gap)
        return (min_gap >= thresholds.t2).to(d.dtype)


def out_of_edge_mask(disparity: torch.Tensor, width: int) -> torch.Tensor:
    """1 where the correspondence x - d(p) lands inside [0, width-1]."""
    with torch.no_grad():
        d = disparity.detach()
        xs = torch.arange(d.shape[-1], dtype=d.dtype, device=d.device)
        corr = xs - d
        inside = (corr >= 0) & (corr <= width - 1)
        return inside.to(d.dtype)


def visible_mask(m_occ: torch.Tensor, m_out: torch.Tensor) -> torch.Tensor:
    """Element-wise AND of the occlusion and out-of-edge masks."""
    if m_occ.shape != m_out.shape:
        raise ValueError("masks must share shape")
    return m_occ * m_out
