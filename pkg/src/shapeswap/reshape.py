"""Stage one: semantic-flow face reshaping.

A U-Net maps landmark heatmaps (reshaped-contour and target-contour, 17
channels each) plus the 19-channel segmentation one-hot to a dense backward
flow; a differentiable bilinear warp applies the flow to image and
segmentation; a 22-channel spectral-norm patch discriminator judges the
warped (image, segmentation) pair. Losses: hinge adversarial, pixel
reconstruction on identity pairs, and a landmark term through a frozen
differentiable landmark regressor.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from . import dataset as ds_mod
from . import face3d, synthdata
from .config import RunConfig, TrainingDiverged
from .nets import PatchDiscriminator, UNet, hinge_d_loss, hinge_g_loss
from .seeds import derive_seed, seed_torch

GENERATOR_CHANNELS = 17 + 17 + face3d.NUM_SEG_CLASSES  # 53
DISC_CHANNELS = 3 + face3d.NUM_SEG_CLASSES             # 22


def heatmap_encode(landmarks: torch.Tensor, height: int, width: int,
                   sigma: float = 2.0) -> torch.Tensor:
    """Gaussian landmark heatmaps.

    landmarks: (B, 17, 2) pixel coordinates -> (B, 17, H, W) with value
    exp(-d^2 / (2 sigma^2)) at pixel centers; the peak is exactly 1 when a
    landmark sits on a pixel center. Off-frame landmarks just produce
    near-zero channels.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    b, k, _ = landmarks.shape
    ys = torch.arange(height, dtype=landmarks.dtype)
    xs = torch.arange(width, dtype=landmarks.dtype)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    dx = gx[None, None] - landmarks[:, :, 0, None, None]
    dy = gy[None, None] - landmarks[:, :, 1, None, None]
    return torch.exp(-(dx**2 + dy**2) / (2.0 * sigma**2))


def generator_input(p_s2t: torch.Tensor, p_t: torch.Tensor, seg_onehot: torch.Tensor,
                    sigma: float = 2.0) -> torch.Tensor:
    """Assemble the 53-channel generator input tensor."""
    b, c, h, w = seg_onehot.shape
    if c != face3d.NUM_SEG_CLASSES:
        raise ValueError(f"segmentation must have {face3d.NUM_SEG_CLASSES} channels")
    hm_s2t = heatmap_encode(p_s2t, h, w, sigma).to(seg_onehot.dtype)
    hm_t = heatmap_encode(p_t, h, w, sigma).to(seg_onehot.dtype)
    return torch.cat([hm_s2t, hm_t, seg_onehot], dim=1)


def save_generator_input(tensor: torch.Tensor, path: str | Path) -> None:
    np.savez(path, data=tensor.detach().cpu().numpy().astype("<f4"))


def load_generator_input(path: str | Path) -> torch.Tensor:
    return torch.from_numpy(np.load(path)["data"])


def build_flow_generator(cfg: RunConfig) -> UNet:
    return UNet(GENERATOR_CHANNELS, 2, base_width=cfg.reshape.base_width,
                levels=cfg.reshape.levels)


def build_reshape_discriminator() -> PatchDiscriminator:
    return PatchDiscriminator(DISC_CHANNELS)


def estimate_flow(generator: UNet, p_s2t: torch.Tensor, p_t: torch.Tensor,
                  seg_onehot: torch.Tensor, sigma: float = 2.0) -> torch.Tensor:
    """Run the generator; output (B, 2, H, W) pixel displacements (dx, dy).

    Magnitudes are clamped to the image height as a post-estimation sanity
    bound (rescaling preserves direction and stays differentiable a.e.).
    """
    x = generator_input(p_s2t, p_t, seg_onehot, sigma)
    flow = generator(x)
    h = float(flow.shape[2])
    norm = torch.sqrt((flow**2).sum(dim=1, keepdim=True) + 1e-12)
    return flow * torch.clamp(h / norm, max=1.0)


def warp(flow: torch.Tensor, image: torch.Tensor,
         seg_onehot: torch.Tensor | None = None):
    """Backward bilinear warp with border-replicate padding.

    out(x, y) = in(x + dx(x,y), y + dy(x,y)); differentiable in both the
    flow and the image. Zero flow reproduces the input bitwise. The
    segmentation is warped on its one-hot channels with the same sampler and
    re-argmaxed by the caller when a class map is needed.
    """
    if flow.dim() != 4 or flow.shape[1] != 2:
        raise ValueError("flow must be (B, 2, H, W)")
    b, _, h, w = flow.shape
    if image.shape[0] != b or image.shape[2:] != (h, w):
        raise ValueError("image/flow shapes disagree")

    ys = torch.arange(h, dtype=flow.dtype, device=flow.device)
    xs = torch.arange(w, dtype=flow.dtype, device=flow.device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    sx = gx[None] + flow[:, 0]
    sy = gy[None] + flow[:, 1]

    def sample(tensor):
        x0 = torch.floor(sx)
        y0 = torch.floor(sy)
        wx = (sx - x0).unsqueeze(1)
        wy = (sy - y0).unsqueeze(1)
        x0l = x0.long()
        y0l = y0.long()
        cols = [torch.clamp(x0l, 0, w - 1), torch.clamp(x0l + 1, 0, w - 1)]
        rows = [torch.clamp(y0l, 0, h - 1), torch.clamp(y0l + 1, 0, h - 1)]
        flat = tensor.reshape(b, tensor.shape[1], h * w)

        def gather(row, col):
            idx = (row * w + col).reshape(b, 1, h * w).expand(-1, tensor.shape[1], -1)
            return torch.gather(flat, 2, idx).reshape(b, tensor.shape[1], h, w)

        v00 = gather(rows[0], cols[0])
        v01 = gather(rows[0], cols[1])
        v10 = gather(rows[1], cols[0])
        v11 = gather(rows[1], cols[1])
        return ((1 - wx) * (1 - wy) * v00 + wx * (1 - wy) * v01
                + (1 - wx) * wy * v10 + wx * wy * v11)

    warped_image = sample(image)
    if seg_onehot is None:
        return warped_image
    if seg_onehot.shape[0] != b or seg_onehot.shape[2:] != (h, w):
        raise ValueError("seg/flow shapes disagree")
    return warped_image, sample(seg_onehot)


@dataclass
class ReshapeLosses:
    adv: torch.Tensor
    rec: torch.Tensor
    ldmk: torch.Tensor
    total: torch.Tensor


def landmark_distance(pred: torch.Tensor, target: torch.Tensor,
                      image_size: int) -> torch.Tensor:
    """Per-sample Euclidean norm over all 17 landmarks, in normalized units."""
    diff = (pred - target) / (image_size - 1)
    return torch.sqrt((diff**2).sum(dim=(1, 2)) + 1e-12).mean()


def reshape_losses(generator, discriminator, batch: dict, landmark_fn,
                   lambda_rec: float = 10.0, lambda_ldmk: float = 800.0,
                   sigma: float = 2.0) -> tuple[ReshapeLosses, dict]:
    """Generator-side losses for one batch.

    batch: image (B,3,H,W), seg (B,19,H,W one-hot), p_t, p_s2t (B,17,2),
    recon (B,) bool. landmark_fn maps an image batch to (B,17,2) pixel
    landmarks and must be differentiable (the frozen regressor in training,
    an oracle in tests).
    """
    image, seg = batch["image"], batch["seg"]
    p_t, p_s2t, recon = batch["p_t"], batch["p_s2t"], batch["recon"]
    size = image.shape[-1]

    flow = estimate_flow(generator, p_s2t, p_t, seg, sigma)
    warped_img, warped_seg = warp(flow, image, seg)

    adv = hinge_g_loss(discriminator(torch.cat([warped_img, warped_seg], dim=1)))

    if recon.any():
        diff = (warped_img - image)[recon]
        rec = torch.sqrt((diff**2).sum(dim=(1, 2, 3)) + 1e-12).mean()
    else:
        rec = torch.zeros((), dtype=image.dtype, device=image.device)

    ldmk = landmark_distance(landmark_fn(warped_img), p_s2t, size)

    total = adv + lambda_rec * rec + lambda_ldmk * ldmk
    losses = ReshapeLosses(adv=adv, rec=rec, ldmk=ldmk, total=total)
    aux = {"flow": flow, "warped_image": warped_img, "warped_seg": warped_seg}
    return losses, aux


def discriminator_step(discriminator, real: tuple[torch.Tensor, torch.Tensor],
                       fake: tuple[torch.Tensor, torch.Tensor]) -> torch.Tensor:
    """Hinge loss on [image | one-hot seg]; fake inputs are detached."""
    real_in = torch.cat(real, dim=1)
    fake_in = torch.cat([t.detach() for t in fake], dim=1)
    return hinge_d_loss(discriminator(real_in), discriminator(fake_in))


def _adam(params, cfg: RunConfig):
    o = cfg.optim
    return torch.optim.Adam(params, lr=o.lr, betas=(o.beta1, o.beta2))


class ReshapeTrainer:
    def __init__(self, cfg: RunConfig, data: ds_mod.LoadedDataset, landmark_fn,
                 log_path: str | Path | None = None):
        self.cfg = cfg
        self.data = data
        self.landmark_fn = landmark_fn
        seed_torch(derive_seed(cfg.seed, "reshape"))
        self.generator = build_flow_generator(cfg)
        self.discriminator = build_reshape_discriminator()
        self.opt_g = _adam(self.generator.parameters(), cfg)
        self.opt_d = _adam(self.discriminator.parameters(), cfg)
        self.step = 0
        self.log_path = Path(log_path) if log_path else None

    def make_batch(self, step: int, pool=None):
        cfg = self.cfg
        pool = pool if pool is not None else self.data.train_idx
        tgt, src, recon = ds_mod.sample_pairs(
            derive_seed(cfg.seed, "reshape-data"), step, pool,
            cfg.reshape.batch_size, cfg.reshape.recon_prob)
        p_t, p_s2t = ds_mod.cross_landmarks(self.data, tgt, src)
        return {
            "image": ds_mod.batch_images(self.data, tgt),
            "seg": ds_mod.batch_segs(self.data, tgt),
            "p_t": p_t,
            "p_s2t": p_s2t,
            "recon": torch.from_numpy(recon),
            "tgt": tgt,
            "src": src,
        }

    def train_step(self) -> dict:
        cfg = self.cfg
        batch = self.make_batch(self.step)

        losses, aux = reshape_losses(
            self.generator, self.discriminator, batch, self.landmark_fn,
            cfg.reshape.lambda_rec, cfg.reshape.lambda_ldmk, cfg.reshape.heatmap_sigma)

        d_loss = discriminator_step(
            self.discriminator,
            real=(batch["image"], batch["seg"]),
            fake=(aux["warped_image"], aux["warped_seg"]))
        self.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        self.opt_d.step()

        # recompute generator losses against the updated discriminator
        losses, aux = reshape_losses(
            self.generator, self.discriminator, batch, self.landmark_fn,
            cfg.reshape.lambda_rec, cfg.reshape.lambda_ldmk, cfg.reshape.heatmap_sigma)
        self.opt_g.zero_grad(set_to_none=True)
        losses.total.backward()
        self.opt_g.step()

        out = {"step": self.step, "loss_d": float(d_loss),
               "loss_adv": float(losses.adv), "loss_rec": float(losses.rec),
               "loss_ldmk": float(losses.ldmk), "loss_g": float(losses.total)}
        if not all(np.isfinite(v) for v in out.values()):
            raise TrainingDiverged(f"non-finite reshape loss at step {self.step}: {out}")
        self.step += 1
        return out

    def train(self, steps: int | None = None) -> None:
        steps = self.cfg.reshape.steps if steps is None else steps
        log = open(self.log_path, "a") if self.log_path else None
        try:
            while self.step < steps:
                t0 = time.time()
                rec = self.train_step()
                rec["wall"] = round(time.time() - t0, 4)
                if log:
                    log.write(json.dumps(rec) + "\n")
                    log.flush()
        finally:
            if log:
                log.close()

    def save(self, path: str | Path) -> None:
        arrays = {}
        arrays.update(ckpt.module_arrays("generator", self.generator))
        arrays.update(ckpt.module_arrays("discriminator", self.discriminator))
        arrays.update(ckpt.optimizer_arrays("opt_g", self.opt_g))
        arrays.update(ckpt.optimizer_arrays("opt_d", self.opt_d))
        ckpt.save_checkpoint(path, "reshape", self.step, self.cfg.content_hash(), arrays,
                             {"image_size": self.data.image_size})

    def load(self, path: str | Path, force: bool = False) -> None:
        arrays, meta = ckpt.load_checkpoint(path, "reshape", self.cfg.content_hash(), force)
        ckpt.load_module(self.generator, arrays, "generator")
        ckpt.load_module(self.discriminator, arrays, "discriminator")
        ckpt.load_optimizer(self.opt_g, arrays, "opt_g")
        ckpt.load_optimizer(self.opt_d, arrays, "opt_d")
        self.step = meta["step"]


def load_generator(path: str | Path, cfg: RunConfig, force: bool = False) -> UNet:
    arrays, meta = ckpt.load_checkpoint(path, "reshape", cfg.content_hash(), force)
    gen = build_flow_generator(cfg)
    ckpt.load_module(gen, arrays, "generator")
    gen.eval()
    return gen


def reshape_infer(generator: UNet, model: face3d.BlendModel, image: torch.Tensor,
                  seg_onehot: torch.Tensor, src_params: face3d.FaceParams,
                  tgt_params: face3d.FaceParams, sigma: float = 2.0):
    """Full stage-one inference for a single pair.

    Returns (warped image, warped seg one-hot, flow); shapes match inputs.
    """
    size = image.shape[-1]
    p_t, p_s2t = face3d.cross_identity_landmarks(model, src_params, tgt_params, size)
    p_t_t = torch.from_numpy(p_t.points[None].astype(np.float32))
    p_s2t_t = torch.from_numpy(p_s2t.points[None].astype(np.float32))
    with torch.no_grad():
        flow = estimate_flow(generator, p_s2t_t, p_t_t, seg_onehot, sigma)
        warped_img, warped_seg = warp(flow, image, seg_onehot)
    return warped_img, warped_seg, flow


def flow_epe(pred: torch.Tensor, gt: np.ndarray, face_mask: np.ndarray) -> float:
    """Mean end-point error over face pixels, in pixels."""
    p = pred[0].detach().cpu().numpy()
    diff = np.stack([p[0] - gt[:, :, 0], p[1] - gt[:, :, 1]])
    epe = np.sqrt((diff**2).sum(axis=0))
    return float(epe[face_mask].mean())


def validation_epe(generator: UNet, data: ds_mod.LoadedDataset, cfg: RunConfig,
                   num_pairs: int = 24) -> float:
    """EPE of estimated vs ground-truth flow over held-out cross pairs."""
    rng_pool = data.val_idx if data.val_idx.size >= 2 else data.train_idx
    tgt, src, _ = ds_mod.sample_pairs(derive_seed(cfg.seed, "reshape-val"), 0,
                                      rng_pool, num_pairs, 0.0)
    ids = data.identities
    total, count = 0.0, 0
    for ti, si in zip(tgt, src):
        ti, si = int(ti), int(si)
        if ids[ti] == ids[si]:
            continue
        tgt_params, src_params = data.params(ti), data.params(si)
        src_shape = face3d.FaceParams(beta=src_params.beta, theta=tgt_params.theta,
                                      psi=tgt_params.psi, camera=tgt_params.camera)
        gt = synthdata.ground_truth_flow(data.model, tgt_params, src_shape, data.image_size)
        seg = data.seg(ti)
        image = ds_mod.batch_images(data, np.array([ti]))
        seg_t = ds_mod.batch_segs(data, np.array([ti]))
        _, _, flow = reshape_infer(generator, data.model, image, seg_t,
                                   src_params, tgt_params, cfg.reshape.heatmap_sigma)
        total += flow_epe(flow, gt, seg > 0)
        count += 1
    return total / max(count, 1)
