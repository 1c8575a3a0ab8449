"""Checkpoints as ``.npz`` archives: named arrays plus a JSON metadata record.

Array names are ``param/<name>``, ``buffer/<name>`` and ``velocity/<name>``;
``__meta__`` holds the training config, its fingerprint and array shapes.
No pickled objects are stored.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig, fingerprint, from_dict, to_dict
from .model import CausalFSFG, build_model


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, model: CausalFSFG, config: TrainConfig, velocity=None, extra=None):
    arrays = {}
    names = [n for n, _ in model.named_parameters()]
    for n, p in model.named_parameters():
        arrays[f"param/{n}"] = p.detach().cpu().numpy()
    for n, b in model.named_buffers():
        arrays[f"buffer/{n}"] = b.detach().cpu().numpy()
    if velocity is not None:
        for n, v in zip(names, velocity):
            arrays[f"velocity/{n}"] = v.detach().cpu().numpy()
    meta = {
        "format": "causalfsfg-checkpoint/1",
        "config": to_dict(config),
        "fingerprint": fingerprint(config),
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
        "extra": extra or {},
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return meta


def read_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
    return meta, arrays


def load_checkpoint(path, config: TrainConfig | None = None):
    """Rebuild the model; with ``config`` given, its fingerprint must match."""
    meta, arrays = read_checkpoint(path)
    stored = from_dict(TrainConfig, meta["config"])
    if config is not None and fingerprint(config.model) != fingerprint(stored.model):
        raise CheckpointError(f"{path}: checkpoint model config does not match the requested one")
    dtype = torch.float64 if stored.dtype == "float64" else torch.float32
    model = build_model(stored.model, seed=stored.seed, dtype=dtype)
    state = model.state_dict()
    for key in state:
        for prefix in ("param/", "buffer/"):
            if prefix + key in arrays:
                state[key] = torch.from_numpy(arrays[prefix + key])
                break
        else:
            raise CheckpointError(f"{path}: missing array for {key}")
    model.load_state_dict(state)
    model.eval()
    velocity = [torch.from_numpy(arrays[f"velocity/{n}"])
                for n, _ in model.named_parameters() if f"velocity/{n}" in arrays]
    return model, stored, velocity, meta
