"""Versioned containers of named arrays plus a JSON metadata block.

Used for network checkpoints (weights, optimizer moments, config snapshot)
so that training can resume bit-for-bit.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

CHECKPOINT_VERSION = "1.0.0"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(meta, version=CHECKPOINT_VERSION)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    tmp.replace(path)
    return path


def load_checkpoint(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
    if meta.get("version", "").split(".")[0] != CHECKPOINT_VERSION.split(".")[0]:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
    if kind is not None and meta.get("kind") != kind:
        raise CheckpointError(f"expected a {kind!r} checkpoint, got {meta.get('kind')!r}")
    return arrays, meta


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def module_arrays(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module(prefix: str, module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {k[len(prefix) + 1:]: torch.from_numpy(np.array(v)) for k, v in arrays.items()
             if k.startswith(prefix + "/")}
    module.load_state_dict(state)


def optimizer_arrays(prefix: str, opt: torch.optim.Optimizer) -> tuple[dict[str, np.ndarray], list]:
    """Flatten optimizer state into named arrays; returns ``(arrays, param_groups)``."""
    sd = opt.state_dict()
    arrays = {}
    for idx, st in sd["state"].items():
        for name, value in st.items():
            arrays[f"{prefix}/{idx}/{name}"] = torch.as_tensor(value).detach().cpu().numpy().copy()
    groups = [{k: v for k, v in g.items()} for g in sd["param_groups"]]
    return arrays, groups


def load_optimizer(prefix: str, opt: torch.optim.Optimizer, arrays: dict[str, np.ndarray], groups: list) -> None:
    state: dict[int, dict] = {}
    for key, value in arrays.items():
        if not key.startswith(prefix + "/"):
            continue
        idx, name = key[len(prefix) + 1:].split("/", 1)
        state.setdefault(int(idx), {})[name] = torch.from_numpy(np.array(value))
    opt.load_state_dict({"state": state, "param_groups": groups})


def layout_hash(names) -> str:
    return hashlib.sha256("|".join(names).encode()).hexdigest()[:16]
