"""Shared face encoder: ViT-style patch encoder pretrained by masked
reconstruction, frozen afterward.

No class token: downstream fusion operates on patch-aligned tokens only.
Masking, per-patch normalized pixel targets, and the lightweight decoder
follow the usual masked-autoencoder recipe at desk scale.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint as ckpt
from . import dataset as ds_mod
from .config import RunConfig, TrainingDiverged
from .seeds import derive_seed, rng_for, seed_torch


def sincos_pos_embed(width: int, grid: int) -> np.ndarray:
    """Fixed 2D sine-cosine positional table, (grid*grid, width)."""
    assert width % 4 == 0
    quarter = width // 4
    omega = 1.0 / 10000 ** (np.arange(quarter) / quarter)
    coords = np.arange(grid, dtype=np.float64)
    out = np.einsum("p,q->pq", coords, omega)
    table = np.concatenate([np.sin(out), np.cos(out)], axis=1)  # (grid, width/2)
    row = np.repeat(table, grid, axis=0)
    col = np.tile(table, (grid, 1))
    return np.concatenate([row, col], axis=1).astype(np.float32)


def patchify(images: torch.Tensor, patch: int) -> torch.Tensor:
    """(B, 3, H, W) -> (B, N, patch*patch*3)."""
    b, c, h, w = images.shape
    if h % patch or w % patch:
        raise ValueError(f"image size {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = images.reshape(b, c, gh, patch, gw, patch)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(b, gh * gw, patch * patch * c)


def unpatchify(tokens: torch.Tensor, patch: int, channels: int = 3) -> torch.Tensor:
    b, n, d = tokens.shape
    grid = int(round(n**0.5))
    x = tokens.reshape(b, grid, grid, patch, patch, channels)
    return x.permute(0, 5, 1, 3, 2, 4).reshape(b, channels, grid * patch, grid * patch)


class Block(nn.Module):
    """Standard pre-norm transformer block."""

    def __init__(self, width, heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(width)
        hidden = int(width * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(),
                                 nn.Linear(hidden, width))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class FaceEncoder(nn.Module):
    def __init__(self, image_size=64, patch=16, width=128, depth=4, heads=4):
        super().__init__()
        self.patch = patch
        self.width = width
        self.grid = image_size // patch
        self.num_patches = self.grid * self.grid
        self.embed = nn.Linear(patch * patch * 3, width)
        pos = sincos_pos_embed(width, self.grid)
        self.register_buffer("pos", torch.from_numpy(pos)[None], persistent=False)
        self.blocks = nn.ModuleList(Block(width, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(width)

    def forward(self, images: torch.Tensor, keep: torch.Tensor | None = None) -> torch.Tensor:
        """Encode to (B, N, L) patch embeddings; `keep` restricts to visible
        token indices during masked pretraining."""
        tokens = self.embed(patchify(images, self.patch)) + self.pos.to(images.dtype)
        if keep is not None:
            tokens = tokens[:, keep, :]
        for blk in self.blocks:
            tokens = blk(tokens)
        return self.norm(tokens)


class MaeDecoder(nn.Module):
    def __init__(self, encoder: FaceEncoder, width=64, depth=2, heads=4):
        super().__init__()
        self.proj = nn.Linear(encoder.width, width)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, width))
        pos = sincos_pos_embed(width, encoder.grid)
        self.register_buffer("pos", torch.from_numpy(pos)[None], persistent=False)
        self.blocks = nn.ModuleList(Block(width, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(width)
        self.head = nn.Linear(width, encoder.patch * encoder.patch * 3)

    def forward(self, visible_tokens: torch.Tensor, keep: torch.Tensor, n: int) -> torch.Tensor:
        b = visible_tokens.shape[0]
        x = self.mask_token.expand(b, n, -1).clone()
        x[:, keep, :] = self.proj(visible_tokens)
        x = x + self.pos.to(x.dtype)
        for blk in self.blocks:
            x = blk(x)
        return self.head(self.norm(x))


@dataclass
class MaskPlan:
    ratio: float
    masked: np.ndarray   # (N,) bool
    visible: np.ndarray  # sorted visible indices

    @property
    def num_masked(self) -> int:
        return int(self.masked.sum())


def random_mask(n: int, ratio: float, seed: int) -> MaskPlan:
    """Uniform random mask without replacement; count = round(ratio * N)."""
    if not (0.0 < ratio < 1.0):
        raise ValueError("mask ratio must be in (0, 1)")
    k = int(round(ratio * n))
    rng = rng_for("mask", seed)
    order = rng.permutation(n)
    masked = np.zeros(n, dtype=bool)
    masked[order[:k]] = True
    return MaskPlan(ratio=ratio, masked=masked, visible=np.sort(order[k:]))


def masked_patch_mse(pred: torch.Tensor, target_patches: torch.Tensor,
                     masked: torch.Tensor, norm_pix: bool = True) -> torch.Tensor:
    """MSE over masked patches only, with per-patch normalized targets."""
    if norm_pix:
        mean = target_patches.mean(dim=-1, keepdim=True)
        var = target_patches.var(dim=-1, keepdim=True)
        target_patches = (target_patches - mean) / torch.sqrt(var + 1e-6)
    per_patch = ((pred - target_patches) ** 2).mean(dim=-1)
    masked_f = masked.to(per_patch.dtype)
    return (per_patch * masked_f).sum() / masked_f.sum().clamp(min=1.0)


def mae_loss(encoder: FaceEncoder, decoder: MaeDecoder, images: torch.Tensor,
             plan: MaskPlan) -> torch.Tensor:
    keep = torch.from_numpy(plan.visible.copy())
    visible = encoder(images, keep=keep)
    pred = decoder(visible, keep, encoder.num_patches)
    target = patchify(images, encoder.patch)
    return masked_patch_mse(pred, target, torch.from_numpy(plan.masked.copy()))


def build_encoder(cfg: RunConfig) -> FaceEncoder:
    e = cfg.encoder
    return FaceEncoder(cfg.data.image_size, e.patch_size, e.width, e.depth, e.heads)


class MaeTrainer:
    def __init__(self, cfg: RunConfig, data: ds_mod.LoadedDataset,
                 log_path: str | Path | None = None):
        self.cfg = cfg
        self.data = data
        seed_torch(derive_seed(cfg.seed, "mae"))
        self.encoder = build_encoder(cfg)
        self.decoder = MaeDecoder(self.encoder, cfg.encoder.decoder_width,
                                  cfg.encoder.decoder_depth, cfg.encoder.heads)
        params = list(self.encoder.parameters()) + list(self.decoder.parameters())
        self.opt = torch.optim.Adam(params, lr=cfg.optim.lr,
                                    betas=(cfg.optim.beta1, cfg.optim.beta2))
        self.step = 0
        self.log_path = Path(log_path) if log_path else None

    def train_step(self) -> dict:
        cfg = self.cfg
        rng = rng_for(cfg.seed, "mae-data", self.step)
        idx = self.data.train_idx[rng.integers(0, self.data.train_idx.size,
                                               size=cfg.encoder.batch_size)]
        images = ds_mod.batch_images(self.data, idx)
        plan = random_mask(self.encoder.num_patches, cfg.encoder.mask_ratio,
                           derive_seed(cfg.seed, "mae-mask", self.step))
        loss = mae_loss(self.encoder, self.decoder, images, plan)
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.step()
        out = {"step": self.step, "loss": float(loss)}
        if not np.isfinite(out["loss"]):
            raise TrainingDiverged(f"non-finite MAE loss at step {self.step}")
        self.step += 1
        return out

    def train(self, steps: int | None = None) -> None:
        steps = self.cfg.encoder.steps if steps is None else steps
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
        arrays.update(ckpt.module_arrays("encoder", self.encoder))
        arrays.update(ckpt.module_arrays("decoder", self.decoder))
        arrays.update(ckpt.optimizer_arrays("opt", self.opt))
        e = self.cfg.encoder
        ckpt.save_checkpoint(path, "mae", self.step, self.cfg.content_hash(), arrays, {
            "image_size": self.data.image_size,
            "encoder_config": {"patch": e.patch_size, "width": e.width,
                               "depth": e.depth, "heads": e.heads,
                               "mask_ratio": e.mask_ratio},
        })

    def load(self, path: str | Path, force: bool = False) -> None:
        arrays, meta = ckpt.load_checkpoint(path, "mae", self.cfg.content_hash(), force)
        ckpt.load_module(self.encoder, arrays, "encoder")
        ckpt.load_module(self.decoder, arrays, "decoder")
        ckpt.load_optimizer(self.opt, arrays, "opt")
        self.step = meta["step"]


def load_encoder(path: str | Path, cfg: RunConfig, force: bool = False) -> FaceEncoder:
    """Load the frozen encoder; validates the stored architecture config."""
    arrays, meta = ckpt.load_checkpoint(path, "mae", cfg.content_hash(), force)
    e = cfg.encoder
    stored = meta.get("encoder_config", {})
    want = {"patch": e.patch_size, "width": e.width, "depth": e.depth,
            "heads": e.heads, "mask_ratio": e.mask_ratio}
    if stored != want:
        raise ckpt.CheckpointError(
            f"encoder config mismatch: checkpoint has {stored}, config wants {want}")
    enc = build_encoder(cfg)
    ckpt.load_module(enc, arrays, "encoder")
    enc.eval()
    for p in enc.parameters():
        p.requires_grad_(False)
    return enc
