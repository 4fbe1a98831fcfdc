"""Training loop: the three-step iteration (self-supervised pass,
self-distilled pass, loss computation), augmentation pipeline, learning-rate
schedule, JSON-lines logging and checkpointing.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .aggregation import DISTILLED, RAW
from .config import AugmentationConfig, Config, TrainConfig
from .data import StereoSample
from .errors import NumericError
from .geometry import (
    CameraRig,
    DisparityLogitVolume,
    disparity_to_depth,
    quantize_disparities,
    reproject_left,
    synthesize_right,
    volume_to_disparity,
)
from .losses import LossTerms, RandomConvPyramid, self_distilled_loss, smoothness_loss, \
    synthesis_loss, total_loss
from .masks import occlusion_mask, out_of_edge_mask, photometric_error, photometric_mask, \
    visible_mask
from .network import BackboneSpec, DepthNet, load_checkpoint, save_checkpoint


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Base lr halved once for every halve-epoch that has been reached."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    halvings = sum(1 for e in config.lr_halve_epochs if epoch >= e)
    return config.lr * (0.5 ** halvings)


def _rgb_to_hsv(x: torch.Tensor) -> torch.Tensor:
    r, g, b = x[0], x[1], x[2]
    maxc = x.max(dim=0).values
    minc = x.min(dim=0).values
    v = maxc
    delta = maxc - minc
    s = torch.where(maxc > 0, delta / maxc.clamp(min=1e-12), torch.zeros_like(maxc))
    dz = delta.clamp(min=1e-12)
    h = torch.zeros_like(maxc)
    h = torch.where(maxc == r, ((g - b) / dz) % 6.0, h)
    h = torch.where(maxc == g, (b - r) / dz + 2.0, h)
    h = torch.where(maxc == b, (r - g) / dz + 4.0, h)
    h = torch.where(delta == 0, torch.zeros_like(h), h) / 6.0
    return torch.stack([h, s, v])


def _hsv_to_rgb(x: torch.Tensor) -> torch.Tensor:
    h, s, v = x[0] % 1.0, x[1], x[2]
    i = (h * 6.0).floor()
    f = h * 6.0 - i
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    i = i.long() % 6
    r = torch.where(i == 0, v, torch.where(i == 1, q, torch.where(
        i == 2, p, torch.where(i == 3, p, torch.where(i == 4, t, v)))))
    g = torch.where(i == 0, t, torch.where(i == 1, v, torch.where(
        i == 2, v, torch.where(i == 3, q, torch.where(i == 4, p, p)))))
    b = torch.where(i == 0, p, torch.where(i == 1, p, torch.where(
        i == 2, t, torch.where(i == 3, v, torch.where(i == 4, v, q)))))
    return torch.stack([r, g, b])


def _color_jitter(img: torch.Tensor, brightness, contrast, saturation, hue) -> torch.Tensor:
    out = img
    if brightness != 1.0:
        out = out * brightness
    if contrast != 1.0:
        mean = out.mean()
        out = (out - mean) * contrast + mean
    if saturation != 1.0:
        gray = out.mean(dim=0, keepdim=True)
        out = gray + (out - gray) * saturation
    if hue != 0.0:
        hsv = _rgb_to_hsv(out.clamp(0, 1))
        hsv[0] = (hsv[0] + hue) % 1.0
        out = _hsv_to_rgb(hsv)
    return out.clamp(0, 1)


def _resize(img: torch.Tensor, hw: tuple[int, int], mode: str) -> torch.Tensor:
    kwargs = {} if mode == "nearest" else {"align_corners": False}
    return F.interpolate(img.unsqueeze(0), size=hw, mode=mode, **kwargs).squeeze(0)


def augment(sample: StereoSample, cfg: AugmentationConfig, rng: np.random.Generator) -> StereoSample:
    """Photometric + geometric augmentation applied consistently to both views.

    Random resize scales ground-truth disparity by the actual width ratio; a
    horizontal flip swaps the mirrored views so the left/right geometry stays
    valid (the flipped sample's left ground truth comes from the right-view
    disparity, and the occlusion map is dropped).

    The random stream is consumed unconditionally so sample alignment is
    stable under any flip/jitter outcome.
    """
    factor = rng.uniform(cfg.resize_min, cfg.resize_max)
    u_top, u_left = rng.random(), rng.random()
    do_flip = rng.random() < cfg.hflip_prob
    brightness = 1.0 + rng.uniform(-cfg.brightness, cfg.brightness)
    contrast = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast)
    saturation = 1.0 + rng.uniform(-cfg.saturation, cfg.saturation)
    hue = rng.uniform(-cfg.hue, cfg.hue)

    h, w = sample.left.shape[-2:]
    new_h, new_w = int(round(h * factor)), int(round(w * factor))
    if new_h < cfg.crop_h or new_w < cfg.crop_w:
        raise ValueError(
            f"crop {cfg.crop_h}x{cfg.crop_w} does not fit resized image {new_h}x{new_w}"
        )
    scale = new_w / w

    left = _resize(sample.left, (new_h, new_w), "bilinear")
    right = _resize(sample.right, (new_h, new_w), "bilinear")
    gt_d = gt_occ = gt_dr = None
    if sample.gt_disparity is not None:
        gt_d = _resize(sample.gt_disparity, (new_h, new_w), "nearest") * scale
    if sample.gt_occlusion is not None:
        gt_occ = _resize(sample.gt_occlusion, (new_h, new_w), "nearest")
    if sample.gt_disparity_right is not None:
        gt_dr = _resize(sample.gt_disparity_right, (new_h, new_w), "nearest") * scale

    top = int(u_top * (new_h - cfg.crop_h + 1))
    lef = int(u_left * (new_w - cfg.crop_w + 1))
    crop = lambda t: None if t is None else t[..., top:top + cfg.crop_h, lef:lef + cfg.crop_w]
    left, right, gt_d, gt_occ, gt_dr = crop(left), crop(right), crop(gt_d), crop(gt_occ), crop(gt_dr)

    if do_flip:
        left, right = right.flip(-1), left.flip(-1)
        gt_d, gt_dr = (None if gt_dr is None else gt_dr.flip(-1)), \
            (None if gt_d is None else gt_d.flip(-1))
        gt_occ = None

    left = _color_jitter(left, brightness, contrast, saturation, hue)
    right = _color_jitter(right, brightness, contrast, saturation, hue)

    return StereoSample(left=left, right=right, rig=sample.rig,
                        gt_disparity=gt_d, gt_occlusion=gt_occ, gt_disparity_right=gt_dr)


@dataclass
class StepResult:
    total: float
    synthesis: float
    smooth_raw: float
    distill: float | None
    smooth_distilled: float | None


def training_step(model: DepthNet, extractor, left: torch.Tensor, right: torch.Tensor,
                  rig: CameraRig, optimizer, cfg: TrainConfig, epoch: int) -> StepResult:
    """One optimizer update.

    Step 1: raw-path pass, right-view synthesis loss and raw smoothness.
    Step 2 (once epoch >= sd_start_epoch): distilled pass on flipped
    features, reliability masks from detached predictions, distillation and
    distilled smoothness losses. Step 3: weighted total, one Adam update.
    """
    weights, thresholds = cfg.weights, cfg.thresholds

    features = model.encoder_forward(left)
    out_raw = model.decoder_forward(features, RAW)
    pred_right = synthesize_right(out_raw.volume, left)
    l_syn = synthesis_loss(pred_right, right, extractor, weights.beta)
    d_raw = volume_to_disparity(out_raw.volume)
    l_smo_raw = smoothness_loss(d_raw, left, weights.gamma)
    terms = LossTerms(synthesis=l_syn, smooth_raw=l_smo_raw)

    if epoch >= weights.sd_start_epoch:
        flipped = [f.flip(-1) for f in features]
        out_dist = model.decoder_forward(flipped, DISTILLED)
        vol_dist = DisparityLogitVolume(out_dist.volume.logits.flip(-1), model.levels)
        d_dist = volume_to_disparity(vol_dist)
        depth_dist = disparity_to_depth(d_dist, rig)
        with torch.no_grad():
            depth_raw_const = disparity_to_depth(d_raw.detach(), rig)
            err_raw = photometric_error(
                reproject_left(right, depth_raw_const, rig), left, thresholds.alpha)
            err_dist = photometric_error(
                reproject_left(right, disparity_to_depth(d_dist.detach(), rig), rig),
                left, thresholds.alpha)
            m_photo = photometric_mask(err_raw, err_dist, thresholds)
            m_occ = occlusion_mask(d_dist.detach(), thresholds)
            m_out = out_of_edge_mask(d_dist.detach(), left.shape[-1])
            m_vis = visible_mask(m_occ, m_out)
        terms.distill = self_distilled_loss(depth_dist, depth_raw_const, m_photo, m_vis)
        terms.smooth_distilled = smoothness_loss(d_dist, left, weights.gamma)

    total = total_loss(terms, weights, epoch)
    scalars = {
        "loss_total": float(total.detach()),
        "loss_synthesis": float(terms.synthesis.detach()),
        "loss_smooth_raw": float(terms.smooth_raw.detach()),
        "loss_distill": None if terms.distill is None else float(terms.distill.detach()),
        "loss_smooth_distilled": None if terms.smooth_distilled is None
        else float(terms.smooth_distilled.detach()),
    }
    if not np.isfinite(scalars["loss_total"]):
        raise NumericError(f"non-finite loss at epoch {epoch}: {scalars}", terms=scalars)

    optimizer.zero_grad()
    total.backward()
    optimizer.step()

    return StepResult(
        total=scalars["loss_total"],
        synthesis=scalars["loss_synthesis"],
        smooth_raw=scalars["loss_smooth_raw"],
        distill=scalars["loss_distill"],
        smooth_distilled=scalars["loss_smooth_distilled"],
    )


class Trainer:
    """Drives training over an in-memory list of StereoSamples.

    Deterministic given the config seed: model init, data order and
    augmentation draw from seeded generators whose states are checkpointed,
    so a resumed run continues the exact stream of the uninterrupted one.
    """

    def __init__(self, config: Config, samples: list[StereoSample], out_dir,
                 device: str | None = None):
        if not samples:
            raise ValueError("no training samples")
        self.config = config
        self.samples = samples
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.device = torch.device(device or config.run.device)
        if config.run.num_threads > 0:
            torch.set_num_threads(config.run.num_threads)

        tc = config.train
        torch.manual_seed(tc.seed)
        levels = quantize_disparities(tc.levels.d_min, tc.levels.d_max, tc.levels.n)
        self.model = DepthNet(
            backbone=BackboneSpec(name=config.model.backbone,
                                  stage_channels=tuple(config.model.stage_channels)),
            levels=levels,
            decoder_widths=tuple(config.model.decoder_widths),
            restore_channels=tuple(config.model.restore_channels),
            offset_hidden=config.model.offset_hidden,
        ).to(self.device)
        self.extractor = RandomConvPyramid(seed=tc.seed + 1000).to(self.device)
        self.optimizer = torch.optim.Adam(
            self.model.parameters(), lr=tc.lr, betas=(tc.adam_beta1, tc.adam_beta2))
        self.rng = np.random.default_rng(tc.seed)
        self.rig = samples[0].rig
        self.start_epoch = 0
        self.global_step = 0

    def resume(self, checkpoint_path) -> None:
        payload = load_checkpoint(checkpoint_path)
        self.model.load_state_dict(payload["model_state"])
        if "optimizer_state" in payload:
            self.optimizer.load_state_dict(payload["optimizer_state"])
        self.start_epoch = payload["epoch"]
        self.global_step = payload["global_step"]
        rng_states = payload.get("rng_states", {})
        if "numpy" in rng_states:
            self.rng.bit_generator.state = rng_states["numpy"]
        if "torch" in rng_states:
            torch.set_rng_state(rng_states["torch"])

    def _checkpoint(self, path, epoch: int) -> None:
        save_checkpoint(
            path, self.model, config=json.loads(json.dumps(_config_dict(self.config))),
            optimizer=self.optimizer, epoch=epoch, global_step=self.global_step,
            rng_states={"numpy": self.rng.bit_generator.state,
                        "torch": torch.get_rng_state()},
        )

    def _batches(self, epoch: int):
        tc = self.config.train
        order = self.rng.permutation(len(self.samples))
        for start in range(0, len(order) - tc.batch_size + 1, tc.batch_size):
            idx = order[start:start + tc.batch_size]
            batch = [augment(self.samples[i], tc.aug, self.rng) for i in idx]
            left = torch.stack([s.left for s in batch]).to(self.device)
            right = torch.stack([s.right for s in batch]).to(self.device)
            yield left, right

    def train(self, log_path=None, max_steps: int | None = None) -> Path:
        """Run the configured epochs; returns the final checkpoint path."""
        tc = self.config.train
        log_path = Path(log_path) if log_path else self.out_dir / "log.jsonl"
        mode = "a" if self.start_epoch > 0 else "w"
        t0 = time.time()
        with open(log_path, mode) as log:
            for epoch in range(self.start_epoch, tc.epochs):
                lr = lr_schedule(epoch, tc)
                for group in self.optimizer.param_groups:
                    group["lr"] = lr
                for left, right in self._batches(epoch):
                    try:
                        result = training_step(
                            self.model, self.extractor, left, right, self.rig,
                            self.optimizer, tc, epoch)
                    except NumericError:
                        self._checkpoint(self.out_dir / "diagnostic_dump.pt", epoch)
                        raise
                    self.global_step += 1
                    if self.global_step % self.config.run.log_every == 0:
                        record = {
                            "step": self.global_step, "epoch": epoch, "lr": lr,
                            "loss_total": result.total,
                            "loss_synthesis": result.synthesis,
                            "loss_smooth_raw": result.smooth_raw,
                            "loss_distill": result.distill,
                            "loss_smooth_distilled": result.smooth_distilled,
                        }
                        log.write(json.dumps(record) + "\n")
                    if max_steps is not None and self.global_step >= max_steps:
                        break
                every = self.config.run.checkpoint_every
                if every > 0 and (epoch + 1) % every == 0 and (epoch + 1) < tc.epochs:
                    self.model.mark_trained()
                    self._checkpoint(self.out_dir / f"ckpt_epoch{epoch + 1:03d}.pt", epoch + 1)
                if max_steps is not None and self.global_step >= max_steps:
                    break
        self.model.mark_trained()
        final = self.out_dir / "ckpt_final.pt"
        self._checkpoint(final, tc.epochs)
        elapsed = time.time() - t0
        (self.out_dir / "train_summary.json").write_text(json.dumps({
            "steps": self.global_step, "epochs": tc.epochs, "seconds": elapsed}, indent=2))
        return final


def _config_dict(config: Config) -> dict:
    from .config import to_flat

    return to_flat(config)
