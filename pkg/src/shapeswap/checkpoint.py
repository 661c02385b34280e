"""Single-file checkpoint archive: named float32 arrays plus JSON metadata.

Every checkpoint records its stage tag, step counter, and the hash of the
config that produced it; loaders refuse mismatched hashes unless forced.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

VALID_STAGES = ("face3d", "mae", "reshape", "swap",
                "aux-id-a", "aux-id-b", "aux-exp", "aux-ldmk", "aux-pose", "aux-perc")

_META_KEY = "___meta___"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, stage: str, step: int, config_hash: str,
                    arrays: dict[str, np.ndarray], extra_meta: dict | None = None) -> None:
    if stage not in VALID_STAGES:
        raise CheckpointError(f"unknown stage tag {stage!r}")
    meta = {"stage": stage, "step": int(step), "config_hash": config_hash}
    meta.update(extra_meta or {})
    payload = {}
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if np.issubdtype(arr.dtype, np.floating):
            payload[name] = arr.astype("<f4")
        else:
            payload[name] = arr.astype("<i8")
    payload[_META_KEY] = np.array(json.dumps(meta))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path: str | Path, expect_stage: str | None = None,
                    expect_config_hash: str | None = None,
                    force: bool = False) -> tuple[dict[str, np.ndarray], dict]:
    try:
        data = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    if _META_KEY not in data:
        raise CheckpointError(f"not a checkpoint archive: {path}")
    meta = json.loads(str(data[_META_KEY]))
    if expect_stage is not None and meta["stage"] != expect_stage:
        raise CheckpointError(
            f"{path}: stage tag {meta['stage']!r} does not match expected {expect_stage!r}")
    if (expect_config_hash is not None and meta["config_hash"] != expect_config_hash
            and not force):
        raise CheckpointError(
            f"{path}: config hash {meta['config_hash']} does not match current "
            f"{expect_config_hash} (use --force to override)")
    arrays = {k: data[k] for k in data.files if k != _META_KEY}
    return arrays, meta


# --- torch bridges ----------------------------------------------------------

def module_arrays(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}/{name}": tensor.detach().cpu().numpy()
            for name, tensor in module.state_dict().items()}


def load_module(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    state = OrderedDict()
    want = module.state_dict()
    for name, ref in want.items():
        key = f"{prefix}/{name}"
        if key not in arrays:
            raise CheckpointError(f"missing array {key}")
        state[name] = torch.from_numpy(np.asarray(arrays[key])).to(ref.dtype)
    module.load_state_dict(state)


def optimizer_arrays(prefix: str, optimizer: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    out = {}
    sd = optimizer.state_dict()
    for pid, state in sd["state"].items():
        for key, val in state.items():
            if isinstance(val, torch.Tensor):
                out[f"{prefix}/opt/{pid}/{key}"] = val.detach().cpu().numpy()
    return out


def load_optimizer(optimizer: torch.optim.Optimizer, arrays: dict[str, np.ndarray],
                   prefix: str) -> None:
    sd = optimizer.state_dict()
    state = {}
    head = f"{prefix}/opt/"
    for name, arr in arrays.items():
        if not name.startswith(head):
            continue
        pid, key = name[len(head):].split("/", 1)
        pid = int(pid)
        tensor = torch.from_numpy(np.asarray(arr))
        if key == "step":
            tensor = tensor.to(torch.float32).reshape(())
        state.setdefault(pid, {})[key] = tensor
    if state:
        sd["state"] = state
        optimizer.load_state_dict(sd)
