# src/nncore/checkpoint.py
"""
Checkpoint = JSON manifest + one little-endian float32 blob.

    <name>.json  {format_version, config, blob, tensors:[{name, shape, offset}]}
    <name>.f32   tensors back to back, offset counted in elements
"""

import json
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from src.utils.config import CHECKPOINT_FORMAT_VERSION
from src.utils.errors import CheckpointError
from src.utils.logger import logger

PathLike = Union[str, Path]


def _paths(path: PathLike) -> Tuple[Path, Path]:
    path = Path(path)
    manifest = path if path.suffix == ".json" else path.with_suffix(".json")
    return manifest, manifest.with_suffix(".f32")


def save_checkpoint(module: nn.Module, path: PathLike, config: dict) -> Path:
    manifest_path, blob_path = _paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)

    tensors = []
    chunks = []
    offset = 0
    for name, t in module.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f4", copy=False).reshape(-1)
        tensors.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(arr)
        offset += arr.size

    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
    blob_path.write_bytes(blob.astype("<f4").tobytes())
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": config,
        "blob": blob_path.name,
        "tensors": tensors,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    logger.success(f"✅ Checkpoint written: {manifest_path} ({offset} values)")
    return manifest_path


def read_checkpoint(path: PathLike) -> Tuple[Dict[str, torch.Tensor], dict]:
    manifest_path, _ = _paths(path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{manifest_path} is not valid JSON: {e}") from e
    if not isinstance(manifest, dict):
        raise CheckpointError(f"{manifest_path} must hold a JSON object")
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')}")

    try:
        blob_path = manifest_path.parent / manifest["blob"]
        entries = [(e["name"], [int(s) for s in e["shape"]], int(e["offset"])) for e in manifest["tensors"]]
        config = manifest["config"]
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"malformed checkpoint manifest {manifest_path}: {e!r}") from e
    if not blob_path.exists():
        raise FileNotFoundError(f"checkpoint blob not found: {blob_path}")
    blob = np.frombuffer(blob_path.read_bytes(), dtype="<f4")

    state = {}
    for name, shape, start in entries:
        size = int(np.prod(shape)) if shape else 1
        if start < 0 or start + size > blob.size:
            raise CheckpointError(f"tensor {name} runs past the end of {blob_path.name}")
        state[name] = torch.from_numpy(blob[start:start + size].reshape(shape).astype(np.float32))
    return state, config


def load_into(module: nn.Module, path: PathLike) -> dict:
    state, config = read_checkpoint(path)
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"checkpoint does not fit the model: {e}") from e
    return config
