"""Training losses: image synthesis, self-distillation, edge-aware
smoothness, and the scheduled weighted total.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn


@dataclass(frozen=True)
class LossWeights:
    """Weights of the total loss and the epoch at which distillation starts."""

    lambda1: float = 0.0008
    lambda2: float = 0.01
    lambda3: float = 0.0016
    beta: float = 0.01
    gamma: float = 2.0
    sd_start_epoch: int = 25

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.sd_start_epoch < 0:
            raise ValueError("sd_start_epoch must be >= 0")


@dataclass
class LossTerms:
    """Scalar loss tensors of one training step; distilled terms may be absent."""

    synthesis: torch.Tensor
    smooth_raw: torch.Tensor
    distill: torch.Tensor | None = None
    smooth_distilled: torch.Tensor | None = None


class RandomConvPyramid(nn.Module):
    """Fixed three-stage feature pyramid used as the perceptual extractor.

    Weights are drawn once from a seeded generator and frozen, which keeps
    the perceptual term deterministic without any pretrained checkpoint.
    Any module returning three feature maps can be substituted (e.g. the
    pooling stages of a pretrained VGG).
    """

    def __init__(self, seed: int = 0, channels: tuple[int, int, int] = (8, 16, 32)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        c0 = 3
        stages = []
        for c1 in channels:
            conv = nn.Conv2d(c0, c1, 3, padding=1)
            with torch.no_grad():
                fan_in = c0 * 9
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5
                )
                conv.bias.zero_()
            stages.append(nn.Sequential(conv, nn.ELU(), nn.AvgPool2d(2)))
            c0 = c1
        self.stages = nn.ModuleList(stages)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, ...]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return tuple(feats)


def synthesis_loss(
    pred_right: torch.Tensor,
    real_right: torch.Tensor,
    extractor: nn.Module,
    beta: float,
) -> torch.Tensor:
    """Mean L1 between synthesized and real right image plus a weighted
    perceptual term.

    The perceptual term sums, over the extractor's three stages, the
    RMS-normalized L2 distance sqrt(mean((f_pred - f_real)^2)).
    """
    if pred_right.shape != real_right.shape:
        raise ValueError(
            f"shape mismatch: {tuple(pred_right.shape)} vs {tuple(real_right.shape)}"
        )
    loss = (pred_right - real_right).abs().mean()
    if beta != 0.0:
        pred_in = pred_right.unsqueeze(0) if pred_right.ndim == 3 else pred_right
        real_in = real_right.unsqueeze(0) if real_right.ndim == 3 else real_right
        perc = pred_right.new_zeros(())
        for fp, fr in zip(extractor(pred_in), extractor(real_in)):
            perc = perc + ((fp - fr) ** 2).mean().sqrt()
        loss = loss + beta * perc
    return loss


def self_distilled_loss(
    depth_distilled: torch.Tensor,
    depth_raw: torch.Tensor,
    m_photo: torch.Tensor,
    m_visible: torch.Tensor,
) -> torch.Tensor:
    """Masked L1 between the distilled depth and the (detached) raw depth,
    normalized by the total pixel count."""
    if depth_distilled.shape != depth_raw.shape:
        raise ValueError("depth maps must share shape")
    gate = m_photo * m_visible
    return (gate * (depth_distilled - depth_raw.detach()).abs()).mean()


def smoothness_loss(disparity: torch.Tensor, image: torch.Tensor, gamma: float) -> torch.Tensor:
    """Edge-aware smoothness: |grad d| damped by exp(-gamma |grad I|).

    Forward differences with the last column/row dropped; image gradients are
    channel-averaged.
    """
    if disparity.shape[-2:] != image.shape[-2:]:
        raise ValueError("disparity and image must share spatial size")
    dx_d = (disparity[..., :, 1:] - disparity[..., :, :-1]).abs()
    dy_d = (disparity[..., 1:, :] - disparity[..., :-1, :]).abs()
    dx_i = (image[..., :, 1:] - image[..., :, :-1]).abs().mean(dim=-3, keepdim=True)
    dy_i = (image[..., 1:, :] - image[..., :-1, :]).abs().mean(dim=-3, keepdim=True)
    term_x = (dx_d * torch.exp(-gamma * dx_i)).mean()
    term_y = (dy_d * torch.exp(-gamma * dy_i)).mean()
    return term_x + term_y


def total_loss(terms: LossTerms, weights: LossWeights, epoch: int) -> torch.Tensor:
    """Weighted sum of the four terms; before sd_start_epoch the distilled
    terms are omitted entirely (exactly L_syn + lambda1 * L_smooth)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    total = terms.synthesis + weights.lambda1 * terms.smooth_raw
    if epoch >= weights.sd_start_epoch:
        if terms.distill is None or terms.smooth_distilled is None:
            raise ValueError("distilled terms required once self-distillation is active")
        total = total + weights.lambda2 * terms.distill + weights.lambda3 * terms.smooth_distilled
    return total
