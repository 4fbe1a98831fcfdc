"""Encoder-decoder depth network with two data paths.

The encoder is a pluggable 4-stage pyramid producing features at
[H/2, H/4, H/8, H/16]. The decoder stacks three offset-fusion blocks, a
resolution-restoring conv block and two output heads (raw / distilled), each
emitting an N-channel disparity logit volume at full input resolution. Only
the skip-offset branches and the output heads differ between the two paths;
every other parameter is shared.

At inference the distilled path is used on horizontally flipped encoder
features and the resulting volume is flipped back.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .aggregation import DISTILLED, RAW, OffsetFusionBlock, _check_path
from .geometry import (
    CameraRig,
    DisparityLevels,
    DisparityLogitVolume,
    disparity_to_depth,
    quantize_disparities,
    volume_to_disparity,
)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class BackboneSpec:
    """Contract of a 4-stage encoder: stage channels and a stride-2 stem."""

    name: str = "conv4"
    stage_channels: tuple[int, int, int, int] = (32, 64, 128, 256)
    stem_stride: int = 2

    def __post_init__(self):
        if self.stem_stride != 2:
            raise ValueError("stem stride must be 2 (features start at H/2)")
        if len(self.stage_channels) != 4:
            raise ValueError("backbone must define exactly 4 stage channel counts")


@dataclass
class DepthNetOutputs:
    """Full-resolution disparity logit volume plus the path that produced it."""

    volume: DisparityLogitVolume
    path: str
    offsets: list[dict] | None = None


def _conv_elu(in_ch: int, out_ch: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1), nn.ELU())


def _conv_bn_elu(in_ch: int, out_ch: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False),
                         nn.BatchNorm2d(out_ch), nn.ELU())


class ConvBackbone(nn.Module):
    """Small convolutional pyramid honoring the [H/2 .. H/16] resolution contract."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        c1, c2, c3, c4 = spec.stage_channels
        self.spec = spec
        self.stage1 = nn.Sequential(_conv_bn_elu(3, c1, stride=2), _conv_bn_elu(c1, c1))
        self.stage2 = nn.Sequential(_conv_bn_elu(c1, c2, stride=2), _conv_bn_elu(c2, c2))
        self.stage3 = nn.Sequential(_conv_bn_elu(c2, c3, stride=2), _conv_bn_elu(c3, c3))
        self.stage4 = nn.Sequential(_conv_bn_elu(c3, c4, stride=2), _conv_bn_elu(c4, c4))

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        c1 = self.stage1(image)
        c2 = self.stage2(c1)
        c3 = self.stage3(c2)
        c4 = self.stage4(c3)
        return [c1, c2, c3, c4]


_BACKBONES = {"conv4": ConvBackbone}


def register_backbone(name: str, factory) -> None:
    """Register an encoder factory taking a BackboneSpec; plug-in point for
    heavier backbones (e.g. transformer encoders) honoring the same contract."""
    _BACKBONES[name] = factory


def build_backbone(spec: BackboneSpec) -> nn.Module:
    if spec.name not in _BACKBONES:
        raise ValueError(f"unknown backbone {spec.name!r}; registered: {sorted(_BACKBONES)}")
    return _BACKBONES[spec.name](spec)


class Decoder(nn.Module):
    """Three offset-fusion blocks, a restoration block, and two output heads."""

    def __init__(self, stage_channels, widths=(64, 64, 128), restore_channels=(32, 32),
                 num_levels: int = 49, offset_hidden: int = 32):
        super().__init__()
        c1, c2, c3, c4 = stage_channels
        w1, w2, w3 = widths
        # block3 fuses C4 with C3; block1 emits the finest aggregated feature.
        self.block3 = OffsetFusionBlock(c4, c3, w3, offset_hidden)
        self.block2 = OffsetFusionBlock(w3, c2, w2, offset_hidden)
        self.block1 = OffsetFusionBlock(w2, c1, w1, offset_hidden)
        r1, r2 = restore_channels
        self.restore = nn.Sequential(_conv_elu(w1, r1), _conv_elu(r1, r2))
        self.head_raw = nn.Conv2d(r2, num_levels, 3, padding=1)
        self.head_distilled = nn.Conv2d(r2, num_levels, 3, padding=1)
        self.num_levels = num_levels

    def forward(self, features, path: str, collect_offsets: bool = False):
        _check_path(path)
        c1, c2, c3, c4 = features
        collected = [dict(), dict(), dict()] if collect_offsets else [None, None, None]
        f3 = self.block3(c4, c3, path, collect=collected[2])
        f2 = self.block2(f3, c2, path, collect=collected[1])
        f1 = self.block1(f2, c1, path, collect=collected[0])
        x = F.interpolate(f1, scale_factor=2, mode="nearest")
        x = self.restore(x)
        head = self.head_raw if path == RAW else self.head_distilled
        logits = head(x)
        return logits, (collected if collect_offsets else None)


class DepthNet(nn.Module):
    """Monocular depth network trained from stereo pairs.

    The `trained` buffer is set by the trainer / checkpoint loader; inference
    refuses to run on freshly initialized parameters.
    """

    def __init__(self, backbone: BackboneSpec = BackboneSpec(),
                 levels: DisparityLevels | None = None,
                 decoder_widths=(64, 64, 128), restore_channels=(32, 32),
                 offset_hidden: int = 32):
        super().__init__()
        if levels is None:
            levels = quantize_disparities(2.0, 300.0, 49)
        self.levels = levels
        self.backbone_spec = backbone
        self.encoder = build_backbone(backbone)
        self.decoder = Decoder(backbone.stage_channels, decoder_widths,
                               restore_channels, levels.n, offset_hidden)
        self.register_buffer("trained", torch.tensor(False))

    def mark_trained(self):
        self.trained.fill_(True)

    def encoder_forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        """Multi-scale features at [H/2, H/4, H/8, H/16]; H and W must be divisible by 16."""
        h, w = image.shape[-2:]
        if h % 16 != 0 or w % 16 != 0:
            raise ValueError(f"input size must be divisible by 16, got {h}x{w}")
        x = image.unsqueeze(0) if image.ndim == 3 else image
        feats = self.encoder(x)
        if image.ndim == 3:
            feats = [f.squeeze(0) for f in feats]
        return feats

    def decoder_forward(self, features, path: str,
                        collect_offsets: bool = False) -> DepthNetOutputs:
        squeeze = features[0].ndim == 3
        feats = [f.unsqueeze(0) for f in features] if squeeze else list(features)
        hs = [f.shape[-2] for f in feats]
        ws = [f.shape[-1] for f in feats]
        for i in range(3):
            if hs[i] != 2 * hs[i + 1] or ws[i] != 2 * ws[i + 1]:
                raise ValueError(
                    f"features violate the resolution contract: {list(zip(hs, ws))}"
                )
        logits, offsets = self.decoder(feats, path, collect_offsets)
        if squeeze:
            logits = logits.squeeze(0)
        volume = DisparityLogitVolume(logits=logits, levels=self.levels)
        return DepthNetOutputs(volume=volume, path=path, offsets=offsets)

    def forward_raw(self, image: torch.Tensor) -> DepthNetOutputs:
        return self.decoder_forward(self.encoder_forward(image), RAW)

    def forward_distilled_flipped(self, image: torch.Tensor,
                                  collect_offsets: bool = False) -> DepthNetOutputs:
        """Distilled-path pass on width-flipped encoder features; the output
        volume is flipped back before return."""
        feats = self.encoder_forward(image)
        flipped = [f.flip(-1) for f in feats]
        out = self.decoder_forward(flipped, DISTILLED, collect_offsets)
        out.volume = DisparityLogitVolume(
            logits=out.volume.logits.flip(-1), levels=self.levels
        )
        return out

    def forward(self, image: torch.Tensor, path: str = RAW) -> DepthNetOutputs:
        if path == RAW:
            return self.forward_raw(image)
        return self.forward_distilled_flipped(image)

    def infer_disparity(self, image: torch.Tensor, path: str = DISTILLED) -> torch.Tensor:
        """Disparity map in pixels from a trained model (no gradient)."""
        if not bool(self.trained):
            raise RuntimeError(
                "model parameters are untrained; load a checkpoint or train first"
            )
        with torch.no_grad():
            out = self.forward_distilled_flipped(image) if path == DISTILLED \
                else self.forward_raw(image)
            return volume_to_disparity(out.volume)

    def infer_depth(self, image: torch.Tensor, rig: CameraRig,
                    path: str = DISTILLED) -> torch.Tensor:
        """Metric depth in meters, bounded by [B*fx/d_max, B*fx/d_min]."""
        return disparity_to_depth(self.infer_disparity(image, path), rig)


def config_fingerprint(config: dict) -> str:
    """Stable hash of a config dict (canonical JSON, sha256)."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def save_checkpoint(path, model: DepthNet, config: dict, optimizer=None,
                    epoch: int = 0, global_step: int = 0, rng_states: dict | None = None):
    """Single-archive checkpoint: float32 parameter arrays keyed by their
    hierarchical module names, plus the config and its fingerprint."""
    state = {k: v.float() if v.is_floating_point() else v
             for k, v in model.state_dict().items()}
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": config,
        "config_fingerprint": config_fingerprint(config),
        "model_state": state,
        "epoch": epoch,
        "global_step": global_step,
    }
    if optimizer is not None:
        payload["optimizer_state"] = optimizer.state_dict()
    if rng_states is not None:
        payload["rng_states"] = rng_states
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version: {version}")
    return payload
