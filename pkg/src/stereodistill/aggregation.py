"""Offset-based feature aggregation blocks for the decoder.

Each block fuses a low-resolution decoded feature with the encoder skip
feature of twice the spatial size. Learned per-pixel offset maps resample
both inputs before they are added:

* one branch refines the upsampled decoded feature,
* the skip feature is refined by one of two branches selected by the active
  data path (raw vs distilled), so the two paths can learn different
  alignments while sharing everything else.

The two-branch variant (single skip branch, no path switch) is kept for
ablations.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import refine

RAW = "raw"
DISTILLED = "distilled"
PATHS = (RAW, DISTILLED)


def _check_path(path: str) -> str:
    if path not in PATHS:
        raise ValueError(f"path must be one of {PATHS}, got {path!r}")
    return path


def switch_offset(d1: torch.Tensor, d2: torch.Tensor, path: str) -> torch.Tensor:
    """Select the skip-offset map for the active data path: d1 for raw, d2 for distilled."""
    if d1.shape != d2.shape:
        raise ValueError(f"offset shapes differ: {tuple(d1.shape)} vs {tuple(d2.shape)}")
    return d1 if _check_path(path) == RAW else d2


def _offset_branch(in_ch: int, hidden: int) -> nn.Sequential:
    head = nn.Conv2d(hidden, 2, 3, padding=1)
    # Zero-init so training starts from the identity refinement.
    nn.init.zeros_(head.weight)
    nn.init.zeros_(head.bias)
    return nn.Sequential(nn.Conv2d(in_ch, hidden, 3, padding=1), nn.ELU(), head)


class OffsetFusionBlock(nn.Module):
    """Aggregate a decoded feature with a 2x-larger skip feature via learned offsets.

    With ``dual_skip=True`` the skip feature owns two offset branches and the
    forward pass takes a path selector; with ``dual_skip=False`` a single
    branch is used and the selector is ignored (the two-branch ablation).
    """

    def __init__(self, prev_ch: int, skip_ch: int, width: int, offset_hidden: int = 32,
                 dual_skip: bool = True):
        super().__init__()
        self.width = width
        self.dual_skip = dual_skip
        self.conv_prev = nn.Conv2d(prev_ch, width, 3, padding=1)
        self.conv_skip = nn.Conv2d(skip_ch, width, 3, padding=1)
        self.bn_skip = nn.BatchNorm2d(width, momentum=0.1)
        self.branch_f = _offset_branch(2 * width, offset_hidden)
        self.branch_c1 = _offset_branch(2 * width, offset_hidden)
        self.branch_c2 = _offset_branch(2 * width, offset_hidden) if dual_skip else None
        self.fuse = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, f_prev: torch.Tensor, c_skip: torch.Tensor, path: str = RAW,
                collect: dict | None = None) -> torch.Tensor:
        _check_path(path)
        ph, pw = f_prev.shape[-2:]
        sh, sw = c_skip.shape[-2:]
        if (sh, sw) != (2 * ph, 2 * pw):
            raise ValueError(
                f"skip feature must be exactly 2x the decoded feature, "
                f"got {(sh, sw)} vs {(ph, pw)}"
            )
        f = F.interpolate(
            F.elu(self.conv_prev(f_prev)), scale_factor=2, mode="bilinear",
            align_corners=False,
        )
        c = F.elu(self.bn_skip(self.conv_skip(c_skip)))
        paired = torch.cat([f, c], dim=-3)

        delta_f = self.branch_f(paired)
        delta_c1 = self.branch_c1(paired)
        if self.dual_skip:
            delta_c2 = self.branch_c2(paired)
            delta_cs = switch_offset(delta_c1, delta_c2, path)
        else:
            delta_c2 = None
            delta_cs = delta_c1

        f_ref = refine(f, delta_f)
        c_ref = refine(c, delta_cs)
        out = F.elu(self.fuse(c_ref + f_ref))

        if collect is not None:
            collect["delta_f"] = delta_f.detach()
            collect["delta_c1"] = delta_c1.detach()
            if delta_c2 is not None:
                collect["delta_c2"] = delta_c2.detach()
        return out


def offset_norm_stats(deltas: list[torch.Tensor]) -> list[float]:
    """Mean per-pixel L2 norm (pixels) of each offset map in the list."""
    if len(deltas) == 0:
        raise ValueError("need at least one offset map")
    stats = []
    for d in deltas:
        if d.shape[-3] != 2:
            raise ValueError(f"offset map must have 2 channels, got shape {tuple(d.shape)}")
        norms = (d[..., 0, :, :] ** 2 + d[..., 1, :, :] ** 2).sqrt()
        stats.append(float(norms.mean()))
    return stats
