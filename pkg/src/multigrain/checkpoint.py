"""Self-describing binary checkpoint container.

A checkpoint is a zip archive with two entries: manifest.json (format
version, metadata document, and a tensor index of name -> shape/dtype/offset)
and data.bin (the concatenated little-endian tensor bytes).  Writes go
through a temp file and an atomic rename.
"""

from __future__ import annotations

import json
import os
import tempfile
import zipfile
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .adapters import BankConfig
from .model import BackboneConfig, ModelState, attach_bank, init_model

FORMAT_VERSION = 1

_DTYPES = {"float64": "<f8", "float32": "<f4"}


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint container."""


def save_checkpoint(path, tensors: dict[str, np.ndarray], metadata: dict) -> None:
    path = Path(path)
    index = {}
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dtype_name = arr.dtype.name
        if dtype_name not in _DTYPES:
            raise CheckpointError(f"unsupported tensor dtype {dtype_name} for {name!r}")
        raw = np.ascontiguousarray(arr).astype(_DTYPES[dtype_name]).tobytes()
        index[name] = {"shape": list(arr.shape), "dtype": dtype_name,
                       "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, "byte_order": "little",
                "metadata": metadata, "tensors": index}
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".ckpt.tmp")
    os.close(fd)
    try:
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            zf.writestr("manifest.json", json.dumps(manifest, indent=2))
            zf.writestr("data.bin", b"".join(blobs))
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        with zipfile.ZipFile(path, "r") as zf:
            manifest = json.loads(zf.read("manifest.json"))
            blob = zf.read("data.bin")
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format {manifest.get('format_version')}")
    tensors = {}
    for name, spec in manifest["tensors"].items():
        start, n = spec["offset"], spec["nbytes"]
        arr = np.frombuffer(blob[start:start + n], dtype=_DTYPES[spec["dtype"]])
        tensors[name] = arr.reshape(spec["shape"]).astype(spec["dtype"])
    return tensors, manifest["metadata"]


# ---------------------------------------------------------------------------
# model-level save/load


def save_model(path, state: ModelState, extra: Optional[dict] = None) -> None:
    tensors = {name: t.data for name, t in state.named_parameters()}
    metadata: dict = {"backbone": asdict(state.config)}
    if state.bank is not None:
        metadata["bank"] = asdict(state.bank.config)
        metadata["attributes"] = state.bank.attributes
    if extra:
        metadata["extra"] = extra
    save_checkpoint(path, tensors, metadata)


def load_model(path) -> tuple[ModelState, dict]:
    """Rebuild a ModelState (and bank, if saved) from a checkpoint."""
    tensors, metadata = load_checkpoint(path)
    backbone = metadata.get("backbone")
    if backbone is None:
        raise CheckpointError("checkpoint metadata lacks a backbone config")
    backbone = dict(backbone)
    for key in ("coarse_sites", "fine_sites"):
        if key in backbone:
            backbone[key] = tuple(backbone[key])
    config = BackboneConfig(**backbone)
    state = init_model(config, seed=0)
    if "bank" in metadata:
        bank_cfg = BankConfig(**metadata["bank"])
        attributes = {str(k): int(v) for k, v in metadata["attributes"].items()}
        attach_bank(state, attributes, bank_cfg, seed=0)
    expected = dict(state.named_parameters())
    missing = sorted(set(expected) - set(tensors))
    extra_names = sorted(set(tensors) - set(expected))
    if missing or extra_names:
        raise CheckpointError(
            f"checkpoint/model tensor mismatch; missing={missing[:5]} "
            f"extra={extra_names[:5]}")
    dt = config.np_dtype
    for name, tensor in expected.items():
        arr = tensors[name].astype(dt)
        if arr.shape != tensor.data.shape:
            raise CheckpointError(
                f"tensor {name!r} shape {arr.shape} != expected {tensor.data.shape}")
        tensor.data = arr
    return state, metadata
