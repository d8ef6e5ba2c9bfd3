"""Versioned binary containers for model parameters, plus run manifests.

Checkpoint layout: magic, format version, header length, a sorted-keys JSON
header describing every tensor (dtype, shape, offset, byte count) and
arbitrary metadata, then the concatenated little-endian tensor payload in
sorted name order. Writing the same state twice produces identical bytes.

The weight-manifest format for externally trained backbones is the same
idea split in two files: a JSON manifest mapping layer names to shapes and
offsets, next to a raw tensor file.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np
import torch

MAGIC = b"PTRC"
FORMAT_VERSION = 1


def _tensor_table(tensors: dict[str, np.ndarray]) -> tuple[dict, bytes]:
    table: dict[str, dict] = {}
    payload = bytearray()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        table[name] = {
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": len(payload),
            "nbytes": len(raw),
        }
        payload.extend(raw)
    return table, bytes(payload)


def save_checkpoint(path: str | Path, kind: str, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    table, payload = _tensor_table(tensors)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta or {},
        "tensors": table,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


def load_checkpoint(path: str | Path) -> tuple[str, dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    tensors: dict[str, np.ndarray] = {}
    for name, info in header["tensors"].items():
        start, nbytes = info["offset"], info["nbytes"]
        arr = np.frombuffer(payload[start : start + nbytes], dtype=np.dtype(info["dtype"]))
        tensors[name] = arr.reshape(info["shape"]).copy()
    return header["kind"], tensors, header["meta"]


def module_state_numpy(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {name: value.detach().cpu().numpy().copy() for name, value in module.state_dict().items()}


def load_module_state(module: torch.nn.Module, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
    state = {}
    for name, arr in tensors.items():
        if prefix and not name.startswith(prefix):
            continue
        state[name[len(prefix) :]] = torch.from_numpy(np.ascontiguousarray(arr))
    module.load_state_dict(state, strict=True)


def module_fingerprint(module: torch.nn.Module) -> str:
    """Content hash of the module's parameters and buffers."""
    digest = hashlib.sha256()
    for name, arr in sorted(module_state_numpy(module).items()):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()


def save_weight_manifest(manifest_path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write manifest JSON plus a sibling .bin raw tensor file."""
    manifest_path = Path(manifest_path)
    data_path = manifest_path.with_suffix(".bin")
    table, payload = _tensor_table(tensors)
    doc = {"format_version": FORMAT_VERSION, "data_file": data_path.name, "tensors": table}
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
    with open(data_path, "wb") as fh:
        fh.write(payload)


def load_weight_manifest(manifest_path: str | Path) -> dict[str, np.ndarray]:
    manifest_path = Path(manifest_path)
    with open(manifest_path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    data_path = manifest_path.parent / doc["data_file"]
    payload = data_path.read_bytes()
    tensors: dict[str, np.ndarray] = {}
    for name, info in doc["tensors"].items():
        arr = np.frombuffer(payload[info["offset"] : info["offset"] + info["nbytes"]], dtype=np.dtype(info["dtype"]))
        tensors[name] = arr.reshape(info["shape"]).copy()
    return tensors


def rng_state_meta(np_rng: "np.random.Generator | None" = None) -> dict:
    """JSON-serializable snapshot of the torch (and optionally numpy) RNG state."""
    state: dict[str, Any] = {"torch": torch.get_rng_state().numpy().tobytes().hex()}
    if np_rng is not None:
        state["numpy"] = np_rng.bit_generator.state
    return state


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def config_hash(config: Any) -> str:
    if dataclasses.is_dataclass(config) and not isinstance(config, type):
        config = dataclasses.asdict(config)
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode("utf-8")).hexdigest()


def write_run_manifest(
    path: str | Path,
    command: str,
    config: dict,
    inputs: dict[str, str | Path],
    outputs: dict[str, str | Path],
) -> dict:
    """Record everything needed to reproduce a command bit-for-bit.

    Inputs and outputs are hashed by content; the timestamp is informational
    and excluded from reproducibility comparisons.
    """
    manifest = {
        "command": command,
        "config": config,
        "config_sha256": config_hash(config),
        "inputs": {name: sha256_file(p) for name, p in sorted(inputs.items()) if Path(p).exists()},
        "outputs": {name: sha256_file(p) for name, p in sorted(outputs.items()) if Path(p).exists()},
        "created": datetime.now(timezone.utc).isoformat(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
    return manifest
