"""Manifest-backed dataset access and deterministic pair sampling.

All batch composition randomness is derived from (seed, step), so loss
trajectories are reproducible and independent of loader parallelism.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import face3d, synthdata
from .seeds import rng_for


@dataclass
class LoadedDataset:
    root: Path
    model: face3d.BlendModel
    records: list
    train_idx: np.ndarray
    val_idx: np.ndarray
    image_size: int

    def __post_init__(self):
        self._image_cache: dict[int, np.ndarray] = {}
        self._seg_cache: dict[int, np.ndarray] = {}

    def image(self, i: int) -> np.ndarray:
        if i not in self._image_cache:
            self._image_cache[i] = synthdata.load_image_png(self.root / self.records[i].image_path)
        return self._image_cache[i]

    def seg(self, i: int) -> np.ndarray:
        if i not in self._seg_cache:
            self._seg_cache[i] = synthdata.load_seg_png(self.root / self.records[i].seg_path)
        return self._seg_cache[i]

    def params(self, i: int) -> face3d.FaceParams:
        return self.records[i].params

    @property
    def identities(self) -> np.ndarray:
        return np.array([r.identity_id for r in self.records])


def load_dataset(manifest_path: str | Path) -> LoadedDataset:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    records = synthdata.read_manifest(manifest_path)
    model = face3d.load_model(root / "model.fl3d")
    splits = np.array([r.split for r in records])
    img = synthdata.load_image_png(root / records[0].image_path)
    return LoadedDataset(
        root=root,
        model=model,
        records=records,
        train_idx=np.nonzero(splits == "train")[0],
        val_idx=np.nonzero(splits == "val")[0],
        image_size=img.shape[0],
    )


def sample_pairs(seed: int, step: int, pool: np.ndarray, batch_size: int,
                 recon_prob: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Target/source index pairs for one step; recon pairs share the index."""
    rng = rng_for(seed, "pairs", step)
    tgt = pool[rng.integers(0, pool.size, size=batch_size)]
    src = pool[rng.integers(0, pool.size, size=batch_size)]
    recon = rng.random(batch_size) < recon_prob
    src[recon] = tgt[recon]
    return tgt, src, recon


def to_tensor_image(images: np.ndarray) -> torch.Tensor:
    """(B, H, W, 3) float in [-1,1] -> (B, 3, H, W) float32 tensor."""
    arr = np.ascontiguousarray(np.moveaxis(images, -1, 1), dtype=np.float32)
    return torch.from_numpy(arr)


def to_tensor_onehot(segs: np.ndarray, num_classes: int = face3d.NUM_SEG_CLASSES) -> torch.Tensor:
    """(B, H, W) int -> (B, C, H, W) float32 one-hot tensor."""
    stacked = np.stack([synthdata.seg_one_hot(s, num_classes) for s in segs])
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(stacked, -1, 1)))


def batch_images(ds: LoadedDataset, idx: np.ndarray) -> torch.Tensor:
    return to_tensor_image(np.stack([ds.image(int(i)) for i in idx]))


def batch_segs(ds: LoadedDataset, idx: np.ndarray) -> torch.Tensor:
    return to_tensor_onehot(np.stack([ds.seg(int(i)) for i in idx]))


def batch_landmarks(ds: LoadedDataset, idx: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(
        np.stack([ds.records[int(i)].landmarks for i in idx]).astype(np.float32))


def cross_landmarks(ds: LoadedDataset, tgt_idx: np.ndarray,
                    src_idx: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
    """P_t and P_s2t batches for target/source record pairs."""
    p_t, p_s2t = [], []
    for ti, si in zip(tgt_idx, src_idx):
        lt, ls2t = face3d.cross_identity_landmarks(
            ds.model, ds.params(int(si)), ds.params(int(ti)), ds.image_size)
        p_t.append(lt.points)
        p_s2t.append(ls2t.points)
    return (torch.from_numpy(np.stack(p_t).astype(np.float32)),
            torch.from_numpy(np.stack(p_s2t).astype(np.float32)))
