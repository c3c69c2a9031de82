"""GLDF checkpoint container.

Layout: magic "GLDF", format version (u32 LE), length-prefixed JSON config
blob, tensor count (u32), then per tensor: name (u16 length + utf-8), dtype
tag (u8), rank (u8), shape (u64 each), row-major little-endian data.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"GLDF"
VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAG_FOR = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


def save_container(path: str | Path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        blob = json.dumps(config, sort_keys=True).encode("utf-8")
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _TAG_FOR:
                raise ValueError(f"unsupported dtype {arr.dtype} for tensor {name}")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", _TAG_FOR[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path} is not a GLDF container")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise ValueError(f"unknown GLDF version {version}")
        (blob_len,) = struct.unpack("<I", f.read(4))
        config = json.loads(f.read(blob_len).decode("utf-8"))
        (count,) = struct.unpack("<I", f.read(4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            tag, rank = struct.unpack("<BB", f.read(2))
            if tag not in _DTYPE_TAGS:
                raise ValueError(f"unknown dtype tag {tag}")
            shape = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
            dtype = _DTYPE_TAGS[tag]
            n_items = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(n_items * dtype.itemsize), dtype=dtype)
            tensors[name] = data.reshape(shape).copy()
    return config, tensors


def model_tensors(model: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + name: p.detach().cpu().numpy() for name, p in model.state_dict().items()}


def save_model(path: str | Path, model, extra: dict | None = None, tensors: dict | None = None) -> None:
    """Persist a dual-mode model (plus optional extra tensors, e.g. optimizer state)."""
    config = {
        "model": model.cfg.to_dict(),
        "augmented": model.augmented,
        "extra": extra or {},
    }
    allt = model_tensors(model, "model.")
    if tensors:
        allt.update(tensors)
    save_container(path, config, allt)


def load_model(path: str | Path):
    """Rebuild a model from a GLDF file; returns (model, extra, other tensors)."""
    from .net import DualModeTransformer, ModelConfig, TimeConditioner

    config, tensors = load_container(path)
    cfg = ModelConfig(**config["model"])
    model = DualModeTransformer(cfg)
    if config["augmented"]:
        model.time_cond = TimeConditioner(cfg).to(cfg.torch_dtype)
    state = {
        name[len("model."):]: torch.as_tensor(arr)
        for name, arr in tensors.items()
        if name.startswith("model.")
    }
    model.load_state_dict(state)
    rest = {k: v for k, v in tensors.items() if not k.startswith("model.")}
    return model, config["extra"], rest
