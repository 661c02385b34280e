"""Stage two: inner-face swapping in the frozen encoder's latent space.

Target tokens query source tokens through multi-head cross-attention; the
attended source values are added to the target values, normalized and mixed
by an MLP (skip connections around both), passed through two standard
transformer blocks, and decoded to an image by an upsampling convolutional
decoder. Trained with hinge adversarial, reconstruction (identity pairs),
identity-cosine, landmark, perceptual, and expression losses.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from . import dataset as ds_mod
from . import face3d, reshape
from .config import RunConfig, TrainingDiverged
from .facemae import Block, FaceEncoder, load_encoder
from .nets import PatchDiscriminator, hinge_d_loss, hinge_g_loss
from .seeds import derive_seed, seed_torch


def cross_attention(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax of q k^T / sqrt(d_k); q: (..., N_t, d), k: (..., N_s, d)."""
    if q.shape[-1] != k.shape[-1]:
        raise ValueError("query/key dims disagree")
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    return torch.softmax(logits, dim=-1)


class CrossAttentionFusion(nn.Module):
    """Fusion block: attended source values added to target values."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        if width % heads:
            raise ValueError("width must be divisible by heads")
        self.width, self.heads = width, heads
        self.d_k = width // heads
        self.q_proj = nn.Linear(width, width)
        self.k_proj = nn.Linear(width, width)
        self.v_src = nn.Linear(width, width)
        self.v_tgt = nn.Linear(width, width)
        self.out = nn.Linear(width, width)
        self.norm1 = nn.LayerNorm(width)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(),
                                 nn.Linear(4 * width, width))

    def _split(self, x):
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.d_k).transpose(1, 2)

    def attention(self, e_s: torch.Tensor, e_t: torch.Tensor) -> torch.Tensor:
        """(B, heads, N_t, N_s) attention maps."""
        return cross_attention(self._split(self.q_proj(e_t)), self._split(self.k_proj(e_s)))

    def forward(self, e_s: torch.Tensor, e_t: torch.Tensor) -> torch.Tensor:
        b, n_t, _ = e_t.shape
        ca = self.attention(e_s, e_t)
        v_s = self._split(self.v_src(e_s))
        v_t = self._split(self.v_tgt(e_t))
        fused = ca @ v_s + v_t
        fused = fused.transpose(1, 2).reshape(b, n_t, self.width)
        h = self.norm1(e_t + self.out(fused))
        return self.norm2(h + self.mlp(h))


class Cafm(nn.Module):
    """Cross-attention fusion followed by two standard transformer blocks."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.fuse = CrossAttentionFusion(width, heads)
        self.blocks = nn.ModuleList([Block(width, heads), Block(width, heads)])

    def forward(self, e_s: torch.Tensor, e_t: torch.Tensor) -> torch.Tensor:
        x = self.fuse(e_s, e_t)
        for blk in self.blocks:
            x = blk(x)
        return x


class ResBlkUp(nn.Module):
    """Residual block with nearest upsampling, StarGANv2 style."""

    def __init__(self, c_in, c_out, upsample=True):
        super().__init__()
        self.upsample = upsample
        self.norm1 = nn.InstanceNorm2d(c_in, affine=True)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm2 = nn.InstanceNorm2d(c_out, affine=True)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1, bias=False) if c_in != c_out else nn.Identity()

    def forward(self, x):
        h = F.leaky_relu(self.norm1(x), 0.2)
        if self.upsample:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        h = self.conv1(h)
        h = self.conv2(F.leaky_relu(self.norm2(h), 0.2))
        return (h + self.skip(x)) / math.sqrt(2.0)


class TokenDecoder(nn.Module):
    """Token grid -> image decoder; output saturates to [-1, 1] via tanh."""

    def __init__(self, width: int, grid: int, image_size: int, base_width: int = 16):
        super().__init__()
        ups = int(round(math.log2(image_size // grid)))
        if grid * 2**ups != image_size:
            raise ValueError("token grid does not upsample to the image size")
        self.grid = grid
        chans = [width]
        for i in range(ups):
            chans.append(max(base_width, min(8 * base_width, width) // 2**i))
        self.blocks = nn.ModuleList(
            ResBlkUp(chans[i], chans[i + 1]) for i in range(ups))
        self.head_norm = nn.InstanceNorm2d(chans[-1], affine=True)
        self.head = nn.Conv2d(chans[-1], 3, 3, padding=1)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        b, n, l = tokens.shape
        grid = int(round(n**0.5))
        if grid * grid != n:
            raise ValueError(f"token count {n} is not a square grid")
        x = tokens.transpose(1, 2).reshape(b, l, grid, grid)
        for blk in self.blocks:
            x = blk(x)
        return torch.tanh(self.head(F.leaky_relu(self.head_norm(x), 0.2)))


def build_swap_models(cfg: RunConfig):
    grid = cfg.data.image_size // cfg.encoder.patch_size
    cafm = Cafm(cfg.encoder.width, cfg.swap.heads)
    decoder = TokenDecoder(cfg.encoder.width, grid, cfg.data.image_size,
                           cfg.swap.decoder_base_width)
    disc = PatchDiscriminator(3)
    return cafm, decoder, disc


@dataclass
class SwapLosses:
    adv: torch.Tensor
    rec: torch.Tensor
    id: torch.Tensor
    exp: torch.Tensor
    ldmk: torch.Tensor
    perc: torch.Tensor
    total: torch.Tensor


def cosine_sim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    num = (a * b).sum(dim=-1)
    den = torch.sqrt((a * a).sum(dim=-1) * (b * b).sum(dim=-1)).clamp(min=1e-12)
    return num / den


def swap_losses(cafm: Cafm, decoder: TokenDecoder, discriminator: PatchDiscriminator,
                batch: dict, aux, weights: dict | None = None) -> tuple[SwapLosses, dict]:
    """Generator-side losses for one swap batch.

    batch: e_s, e_t (B,N,L), i_res, i_t, i_s (B,3,H,W), recon (B,) bool.
    aux provides frozen id_embed / exp_embed / landmarks / perc_features.
    """
    w = {"rec": 10.0, "id": 5.0, "exp": 10.0, "ldmk": 5000.0, "perc": 2.0}
    w.update(weights or {})
    i_res, i_t, i_s, recon = batch["i_res"], batch["i_t"], batch["i_s"], batch["recon"]
    size = i_res.shape[-1]

    e_o = cafm(batch["e_s"], batch["e_t"])
    i_o = decoder(e_o)

    adv = hinge_g_loss(discriminator(i_o))

    if recon.any():
        diff = (i_o - i_res)[recon]
        rec = torch.sqrt((diff**2).sum(dim=(1, 2, 3)) + 1e-12).mean()
    else:
        rec = torch.zeros((), dtype=i_o.dtype, device=i_o.device)

    id_loss = (1.0 - cosine_sim(aux.id_embed(i_o), aux.id_embed(i_s))).mean()

    ldmk = reshape.landmark_distance(aux.landmarks(i_o), aux.landmarks(i_res).detach(), size)

    f_o = aux.perc_features(i_o)
    f_r = [f.detach() for f in aux.perc_features(i_res)]
    sq = sum(((a - b) ** 2).sum(dim=(1, 2, 3)) for a, b in zip(f_o, f_r))
    perc = torch.sqrt(sq + 1e-12).mean()

    exp = torch.sqrt(((aux.exp_embed(i_o) - aux.exp_embed(i_t).detach()) ** 2)
                     .sum(dim=-1) + 1e-12).mean()

    total = (adv + w["rec"] * rec + w["id"] * id_loss + w["exp"] * exp
             + w["ldmk"] * ldmk + w["perc"] * perc)
    losses = SwapLosses(adv=adv, rec=rec, id=id_loss, exp=exp, ldmk=ldmk,
                        perc=perc, total=total)
    return losses, {"i_o": i_o, "e_o": e_o}


class SwapTrainer:
    """Trains CAFM + decoder + discriminator against frozen stage-one,
    encoder, and auxiliary networks."""

    def __init__(self, cfg: RunConfig, data: ds_mod.LoadedDataset,
                 reshape_generator, encoder: FaceEncoder, aux,
                 log_path: str | Path | None = None):
        self.cfg = cfg
        self.data = data
        self.aux = aux
        seed_torch(derive_seed(cfg.seed, "swap"))
        self.cafm, self.decoder, self.disc = build_swap_models(cfg)
        self.reshape_generator = reshape_generator.eval()
        self.encoder = encoder.eval()
        for p in self.encoder.parameters():
            if p.requires_grad:
                raise ValueError("encoder must be frozen for swap training")
        train_params = list(self.cafm.parameters()) + list(self.decoder.parameters())
        self.opt_g = torch.optim.Adam(train_params, lr=cfg.optim.lr,
                                      betas=(cfg.optim.beta1, cfg.optim.beta2))
        self.opt_d = torch.optim.Adam(self.disc.parameters(), lr=cfg.optim.lr,
                                      betas=(cfg.optim.beta1, cfg.optim.beta2))
        self.step = 0
        self.log_path = Path(log_path) if log_path else None

    def reshape_batch(self, tgt: np.ndarray, src: np.ndarray) -> torch.Tensor:
        """Stage-one output I_t^res for each pair, produced online, no grads."""
        p_t, p_s2t = ds_mod.cross_landmarks(self.data, tgt, src)
        images = ds_mod.batch_images(self.data, tgt)
        segs = ds_mod.batch_segs(self.data, tgt)
        with torch.no_grad():
            flow = reshape.estimate_flow(self.reshape_generator, p_s2t, p_t, segs,
                                         self.cfg.reshape.heatmap_sigma)
            warped, _ = reshape.warp(flow, images, segs)
        return warped

    def make_batch(self, step: int) -> dict:
        cfg = self.cfg
        tgt, src, recon = ds_mod.sample_pairs(
            derive_seed(cfg.seed, "swap-data"), step, self.data.train_idx,
            cfg.swap.batch_size, cfg.swap.recon_prob)
        i_t = ds_mod.batch_images(self.data, tgt)
        i_s = ds_mod.batch_images(self.data, src)
        i_res = self.reshape_batch(tgt, src)
        with torch.no_grad():
            e_s = self.encoder(i_s)
            e_t = self.encoder(i_res)
        return {"i_t": i_t, "i_s": i_s, "i_res": i_res, "e_s": e_s, "e_t": e_t,
                "recon": torch.from_numpy(recon), "tgt": tgt, "src": src}

    def train_step(self) -> dict:
        cfg = self.cfg
        batch = self.make_batch(self.step)
        wts = {"rec": cfg.swap.lambda_rec, "id": cfg.swap.lambda_id,
               "exp": cfg.swap.lambda_exp, "ldmk": cfg.swap.lambda_ldmk,
               "perc": cfg.swap.lambda_perc}

        with torch.no_grad():
            fake = self.decoder(self.cafm(batch["e_s"], batch["e_t"]))
        d_loss = hinge_d_loss(self.disc(batch["i_t"]), self.disc(fake))
        self.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        self.opt_d.step()

        losses, _ = swap_losses(self.cafm, self.decoder, self.disc, batch, self.aux, wts)
        self.opt_g.zero_grad(set_to_none=True)
        losses.total.backward()
        self.opt_g.step()

        out = {"step": self.step, "loss_d": float(d_loss), "loss_adv": float(losses.adv),
               "loss_rec": float(losses.rec), "loss_id": float(losses.id),
               "loss_exp": float(losses.exp), "loss_ldmk": float(losses.ldmk),
               "loss_perc": float(losses.perc), "loss_g": float(losses.total)}
        if not all(np.isfinite(v) for v in out.values()):
            raise TrainingDiverged(f"non-finite swap loss at step {self.step}: {out}")
        self.step += 1
        return out

    def train(self, steps: int | None = None) -> None:
        steps = self.cfg.swap.steps if steps is None else steps
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
        arrays.update(ckpt.module_arrays("cafm", self.cafm))
        arrays.update(ckpt.module_arrays("decoder", self.decoder))
        arrays.update(ckpt.module_arrays("discriminator", self.disc))
        arrays.update(ckpt.optimizer_arrays("opt_g", self.opt_g))
        arrays.update(ckpt.optimizer_arrays("opt_d", self.opt_d))
        ckpt.save_checkpoint(path, "swap", self.step, self.cfg.content_hash(), arrays,
                             {"image_size": self.data.image_size})

    def load(self, path: str | Path, force: bool = False) -> None:
        arrays, meta = ckpt.load_checkpoint(path, "swap", self.cfg.content_hash(), force)
        ckpt.load_module(self.cafm, arrays, "cafm")
        ckpt.load_module(self.decoder, arrays, "decoder")
        ckpt.load_module(self.disc, arrays, "discriminator")
        ckpt.load_optimizer(self.opt_g, arrays, "opt_g")
        ckpt.load_optimizer(self.opt_d, arrays, "opt_d")
        self.step = meta["step"]


@dataclass
class SwapPipeline:
    """Frozen three-checkpoint inference pipeline."""

    cfg: RunConfig
    model: face3d.BlendModel
    reshape_generator: object
    encoder: FaceEncoder
    cafm: Cafm
    decoder: TokenDecoder

    @staticmethod
    def load(cfg: RunConfig, model: face3d.BlendModel, reshape_path, encoder_path,
             swap_path, force: bool = False) -> "SwapPipeline":
        gen = reshape.load_generator(reshape_path, cfg, force)
        enc = load_encoder(encoder_path, cfg, force)
        arrays, meta = ckpt.load_checkpoint(swap_path, "swap", cfg.content_hash(), force)
        if meta.get("image_size") != cfg.data.image_size:
            raise ckpt.CheckpointError(
                f"swap checkpoint was trained at {meta.get('image_size')}px but the "
                f"config asks for {cfg.data.image_size}px")
        cafm, decoder, _ = build_swap_models(cfg)
        ckpt.load_module(cafm, arrays, "cafm")
        ckpt.load_module(decoder, arrays, "decoder")
        cafm.eval()
        decoder.eval()
        return SwapPipeline(cfg, model, gen, enc, cafm, decoder)

    def swap_faces(self, i_s: torch.Tensor, i_t: torch.Tensor, seg_t: torch.Tensor,
                   src_params: face3d.FaceParams, tgt_params: face3d.FaceParams,
                   return_intermediate: bool = False):
        """I_o = decode(cafm(encode(I_s), encode(reshape(I_t))))."""
        i_res, seg_res, flow = reshape.reshape_infer(
            self.reshape_generator, self.model, i_t, seg_t, src_params, tgt_params,
            self.cfg.reshape.heatmap_sigma)
        with torch.no_grad():
            e_s = self.encoder(i_s)
            e_t = self.encoder(i_res)
            i_o = self.decoder(self.cafm(e_s, e_t))
        if return_intermediate:
            return i_o, {"i_res": i_res, "seg_res": seg_res, "flow": flow,
                         "e_s": e_s, "e_t": e_t}
        return i_o
