"""Frozen auxiliary networks trained on the synthetic ground truth.

These stand in for the large pretrained models the loss formulation needs:
two identity embedders (dual-retrieval protocol), an expression embedder, a
differentiable contour-landmark regressor, a pose regressor for evaluation,
and a small autoencoder whose encoder stages serve as the perceptual
feature extractor. Each checkpoint embeds the dataset hash it was trained
on so metrics cannot silently mix corpora.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from . import dataset as ds_mod
from .config import RunConfig, TrainingDiverged
from .nets import ConvBackbone
from .seeds import derive_seed, rng_for, seed_torch


class IdEmbedder(nn.Module):
    """Identity classifier; the unit-normalized penultimate layer is the
    embedding used for cosine losses and retrieval."""

    def __init__(self, num_ids: int, base_width: int = 32, embed_dim: int = 64):
        super().__init__()
        self.backbone = ConvBackbone((base_width, 2 * base_width, 4 * base_width))
        self.fc = nn.Linear(4 * base_width, embed_dim)
        self.classifier = nn.Linear(embed_dim, num_ids)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        h = self.backbone(images).mean(dim=(2, 3))
        return self.fc(h)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.features(images))

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.features(images), dim=-1)


class ExpEmbedder(nn.Module):
    """Expression-coefficient regressor; the hidden layer is the embedding."""

    def __init__(self, expr_dim: int, embed_dim: int = 16, base_width: int = 32):
        super().__init__()
        self.backbone = ConvBackbone((base_width, 2 * base_width, 4 * base_width))
        self.fc = nn.Linear(4 * base_width, embed_dim)
        self.head = nn.Linear(embed_dim, expr_dim)

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        h = self.backbone(images).mean(dim=(2, 3))
        return torch.tanh(self.fc(h)) * 3.0

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.embed(images))


class LandmarkRegressor(nn.Module):
    """Predicts the 17 contour landmarks in pixels; differentiable w.r.t.
    its input because it sits inside both stages' training losses."""

    def __init__(self, image_size: int = 64, base_width: int = 32):
        super().__init__()
        self.image_size = image_size
        self.backbone = ConvBackbone((base_width, 2 * base_width, 4 * base_width))
        spatial = (image_size // 8) ** 2 * 4 * base_width
        self.fc1 = nn.Linear(spatial, 256)
        self.fc2 = nn.Linear(256, 17 * 2)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        h = self.backbone(images).flatten(1)
        norm = self.fc2(F.leaky_relu(self.fc1(h), 0.2))
        return norm.reshape(-1, 17, 2) * (self.image_size - 1)


class PoseRegressor(nn.Module):
    """Predicts the global rotation (axis-angle) from an image."""

    def __init__(self, base_width: int = 24):
        super().__init__()
        self.backbone = ConvBackbone((base_width, 2 * base_width, 4 * base_width))
        self.fc = nn.Linear(4 * base_width, 64)
        self.head = nn.Linear(64, 3)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        h = self.backbone(images).mean(dim=(2, 3))
        return self.head(F.leaky_relu(self.fc(h), 0.2))


class PerceptualNet(nn.Module):
    """Image autoencoder; the encoder's last two conv stages are the
    perceptual feature stack."""

    def __init__(self, base_width: int = 32):
        super().__init__()
        w = base_width
        self.encoder = ConvBackbone((w, 2 * w, 4 * w))
        self.decoder = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(4 * w, 2 * w, 3, padding=1), nn.LeakyReLU(0.2),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * w, w, 3, padding=1), nn.LeakyReLU(0.2),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(w, 3, 3, padding=1), nn.Tanh(),
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(images))

    def features(self, images: torch.Tensor) -> list[torch.Tensor]:
        return self.encoder.stage_features(images)[-2:]


def _adam(params, cfg: RunConfig):
    return torch.optim.Adam(params, lr=cfg.optim.lr, betas=(cfg.optim.beta1, cfg.optim.beta2))


def _train_batches(cfg: RunConfig, data: ds_mod.LoadedDataset, tag: str, steps: int):
    for step in range(steps):
        rng = rng_for(cfg.seed, tag, step)
        idx = data.train_idx[rng.integers(0, data.train_idx.size, size=cfg.aux.batch_size)]
        yield step, idx


def _finite_or_raise(value: float, tag: str, step: int) -> float:
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite {tag} loss at step {step}")
    return value


def train_id_embedder(cfg: RunConfig, data: ds_mod.LoadedDataset, variant: str,
                      log=None) -> IdEmbedder:
    """variant 'a' and 'b' differ in seed and width (dual-evaluator setup)."""
    num_ids = int(data.identities.max()) + 1
    if num_ids < 2:
        raise ValueError("identity embedder needs at least 2 identities")
    base = {"a": 32, "b": 48}[variant]
    seed_torch(derive_seed(cfg.seed, "aux-id", variant))
    net = IdEmbedder(num_ids, base_width=base, embed_dim=cfg.aux.id_embed_dim)
    opt = _adam(net.parameters(), cfg)
    ids = torch.from_numpy(data.identities)
    for step, idx in _train_batches(cfg, data, f"aux-id-{variant}", cfg.aux.steps):
        images = ds_mod.batch_images(data, idx)
        loss = F.cross_entropy(net(images), ids[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        _log(log, {"net": f"id-{variant}", "step": step,
                   "loss": _finite_or_raise(float(loss), "id", step)})
    return net.eval()


def train_exp_embedder(cfg: RunConfig, data: ds_mod.LoadedDataset, log=None) -> ExpEmbedder:
    seed_torch(derive_seed(cfg.seed, "aux-exp"))
    net = ExpEmbedder(cfg.face3d.expr_dim, cfg.aux.exp_embed_dim)
    opt = _adam(net.parameters(), cfg)
    psi = torch.from_numpy(
        np.stack([r.expression_label for r in data.records]).astype(np.float32))
    for step, idx in _train_batches(cfg, data, "aux-exp", cfg.aux.steps):
        images = ds_mod.batch_images(data, idx)
        loss = F.mse_loss(net(images), psi[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        _log(log, {"net": "exp", "step": step,
                   "loss": _finite_or_raise(float(loss), "exp", step)})
    return net.eval()


def train_landmark_regressor(cfg: RunConfig, data: ds_mod.LoadedDataset, log=None) -> LandmarkRegressor:
    seed_torch(derive_seed(cfg.seed, "aux-ldmk"))
    net = LandmarkRegressor(data.image_size)
    opt = _adam(net.parameters(), cfg)
    scale = data.image_size - 1
    for step, idx in _train_batches(cfg, data, "aux-ldmk", cfg.aux.steps):
        images = ds_mod.batch_images(data, idx)
        target = ds_mod.batch_landmarks(data, idx)
        loss = F.mse_loss(net(images) / scale, target / scale)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        _log(log, {"net": "ldmk", "step": step,
                   "loss": _finite_or_raise(float(loss), "ldmk", step)})
    return net.eval()


def train_pose_regressor(cfg: RunConfig, data: ds_mod.LoadedDataset, log=None) -> PoseRegressor:
    seed_torch(derive_seed(cfg.seed, "aux-pose"))
    net = PoseRegressor()
    opt = _adam(net.parameters(), cfg)
    rots = torch.from_numpy(
        np.stack([r.params.theta[:3] for r in data.records]).astype(np.float32))
    for step, idx in _train_batches(cfg, data, "aux-pose", cfg.aux.steps):
        images = ds_mod.batch_images(data, idx)
        loss = F.mse_loss(net(images), rots[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        _log(log, {"net": "pose", "step": step,
                   "loss": _finite_or_raise(float(loss), "pose", step)})
    return net.eval()


def train_perceptual(cfg: RunConfig, data: ds_mod.LoadedDataset, log=None) -> PerceptualNet:
    seed_torch(derive_seed(cfg.seed, "aux-perc"))
    net = PerceptualNet()
    opt = _adam(net.parameters(), cfg)
    for step, idx in _train_batches(cfg, data, "aux-perc", cfg.aux.steps):
        images = ds_mod.batch_images(data, idx)
        loss = F.mse_loss(net(images), images)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        _log(log, {"net": "perc", "step": step,
                   "loss": _finite_or_raise(float(loss), "perc", step)})
    return net.eval()


def _log(log, record: dict):
    if log is not None:
        record["wall"] = time.time()
        log.write(json.dumps(record) + "\n")
        log.flush()


_STAGE_FOR = {"id-a": "aux-id-a", "id-b": "aux-id-b", "exp": "aux-exp",
              "ldmk": "aux-ldmk", "pose": "aux-pose", "perc": "aux-perc"}


def save_aux(net: nn.Module, name: str, path: str | Path, cfg: RunConfig,
             dataset_hash: str, meta_extra: dict | None = None) -> None:
    extra = {"dataset_hash": dataset_hash}
    extra.update(meta_extra or {})
    ckpt.save_checkpoint(path, _STAGE_FOR[name], 0, cfg.content_hash(),
                         ckpt.module_arrays("net", net), extra)


def _freeze(net: nn.Module) -> nn.Module:
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


@dataclass
class AuxBundle:
    """Frozen auxiliary nets plus the callables the training losses expect."""

    id_a: IdEmbedder
    id_b: IdEmbedder
    exp: ExpEmbedder
    ldmk: LandmarkRegressor
    pose: PoseRegressor
    perc: PerceptualNet
    dataset_hash: str = ""

    def id_embed(self, images):
        return self.id_a.embed(images)

    def exp_embed(self, images):
        return self.exp.embed(images)

    def landmarks(self, images):
        return self.ldmk(images)

    def perc_features(self, images):
        return self.perc.features(images)

    @staticmethod
    def train_all(cfg: RunConfig, data: ds_mod.LoadedDataset, log=None) -> "AuxBundle":
        return AuxBundle(
            id_a=_freeze(train_id_embedder(cfg, data, "a", log)),
            id_b=_freeze(train_id_embedder(cfg, data, "b", log)),
            exp=_freeze(train_exp_embedder(cfg, data, log)),
            ldmk=_freeze(train_landmark_regressor(cfg, data, log)),
            pose=_freeze(train_pose_regressor(cfg, data, log)),
            perc=_freeze(train_perceptual(cfg, data, log)),
        )

    def save_all(self, out_dir: str | Path, cfg: RunConfig, dataset_hash: str) -> None:
        out = Path(out_dir)
        num_ids = self.id_a.classifier.out_features
        save_aux(self.id_a, "id-a", out / "aux_id_a.npz", cfg, dataset_hash,
                 {"num_ids": num_ids})
        save_aux(self.id_b, "id-b", out / "aux_id_b.npz", cfg, dataset_hash,
                 {"num_ids": num_ids})
        save_aux(self.exp, "exp", out / "aux_exp.npz", cfg, dataset_hash)
        save_aux(self.ldmk, "ldmk", out / "aux_ldmk.npz", cfg, dataset_hash)
        save_aux(self.pose, "pose", out / "aux_pose.npz", cfg, dataset_hash)
        save_aux(self.perc, "perc", out / "aux_perc.npz", cfg, dataset_hash)

    @staticmethod
    def load_all(out_dir: str | Path, cfg: RunConfig, image_size: int | None = None,
                 force: bool = False, expect_dataset_hash: str | None = None) -> "AuxBundle":
        out = Path(out_dir)
        size = image_size or cfg.data.image_size
        chash = cfg.content_hash()

        def load_one(name, build):
            arrays, meta = ckpt.load_checkpoint(out / f"aux_{name}.npz",
                                                _STAGE_FOR[name.replace('_', '-')],
                                                chash, force)
            if (expect_dataset_hash is not None and not force
                    and meta.get("dataset_hash") != expect_dataset_hash):
                raise ckpt.CheckpointError(
                    f"aux checkpoint {name} was trained on dataset "
                    f"{meta.get('dataset_hash')}, current is {expect_dataset_hash}")
            net = build(meta)
            ckpt.load_module(net, arrays, "net")
            return _freeze(net), meta

        id_a, meta = load_one("id_a", lambda m: IdEmbedder(
            m["num_ids"], 32, cfg.aux.id_embed_dim))
        id_b, _ = load_one("id_b", lambda m: IdEmbedder(
            m["num_ids"], 48, cfg.aux.id_embed_dim))
        exp, _ = load_one("exp", lambda m: ExpEmbedder(cfg.face3d.expr_dim,
                                                       cfg.aux.exp_embed_dim))
        ldmk, _ = load_one("ldmk", lambda m: LandmarkRegressor(size))
        pose, _ = load_one("pose", lambda m: PoseRegressor())
        perc, _ = load_one("perc", lambda m: PerceptualNet())
        return AuxBundle(id_a=id_a, id_b=id_b, exp=exp, ldmk=ldmk, pose=pose,
                         perc=perc, dataset_hash=meta.get("dataset_hash", ""))
