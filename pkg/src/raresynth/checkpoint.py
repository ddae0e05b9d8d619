"""Checkpoint archives.

Layout of a ``.rsck`` file::

    b"RSCKPT01"                      8-byte magic
    uint64 little-endian             manifest length in bytes
    manifest                         UTF-8 JSON, sorted keys, compact
    tensor data                      little-endian float32, manifest order

The manifest lists ``{"name", "shape", "dtype", "stored"}`` per tensor along
with the archive kind, the architecture descriptor and a config snapshot.
Nothing time-dependent is recorded, so save -> load -> save reproduces the
file byte for byte.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch

from . import __version__
from .classifier import ClassifierModel, ResNetSmall
from .diffusion import UNet, UNetSpec
from .errors import CheckpointError, InvalidArgument
from .io import atomic_write_bytes
from .lora import AdaptedModel, LoRAConfig, adapter_state, attach_lora, load_adapter_state

MAGIC = b"RSCKPT01"
FORMAT_VERSION = 1


def encode_archive(kind: str, tensors: dict[str, Any], meta: dict | None = None) -> bytes:
    entries, blobs = [], []
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype), "stored": "<f4"})
        blobs.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "created_by": f"raresynth {__version__}",
        "tensors": entries,
        "meta": meta or {},
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)


def decode_archive(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:8] != MAGIC:
        raise CheckpointError("not a raresynth checkpoint (bad magic)")
    if len(data) < 16:
        raise CheckpointError("truncated checkpoint header")
    (n,) = struct.unpack("<Q", data[8:16])
    try:
        manifest = json.loads(data[16 : 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt manifest: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')}")
    offset = 16 + n
    tensors = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = offset + 4 * count
        if end > len(data):
            raise CheckpointError(f"truncated checkpoint while reading {entry['name']}")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(entry["dtype"])
        offset = end
    if offset != len(data):
        raise CheckpointError("trailing bytes after tensor data")
    return manifest, tensors


def save_archive(path, kind: str, tensors: dict[str, Any], meta: dict | None = None) -> Path:
    return atomic_write_bytes(path, encode_archive(kind, tensors, meta))


def load_archive(path: str | os.PathLike, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    manifest, tensors = decode_archive(p.read_bytes())
    if kind is not None and manifest["kind"] != kind:
        raise CheckpointError(f"{p}: expected a {kind!r} checkpoint, found {manifest['kind']!r}")
    return manifest, tensors


def _load_state(module: torch.nn.Module, tensors: dict[str, np.ndarray], where: str) -> None:
    state = module.state_dict()
    if set(state) != set(tensors):
        missing, extra = sorted(set(state) - set(tensors)), sorted(set(tensors) - set(state))
        raise CheckpointError(f"{where}: tensor names do not match architecture (missing={missing[:3]}, unexpected={extra[:3]})")
    for name, ref in state.items():
        if tuple(ref.shape) != tuple(tensors[name].shape):
            raise CheckpointError(f"{where}: {name} has shape {tensors[name].shape}, architecture expects {tuple(ref.shape)}")
    module.load_state_dict({k: torch.as_tensor(np.array(v)).to(state[k].dtype) for k, v in tensors.items()})


# -- typed helpers -----------------------------------------------------------


def save_diffusion(path, model: UNet, config: dict | None = None, extra: dict | None = None) -> Path:
    meta = {"arch": model.spec.to_dict(), "config": config or {}, **(extra or {})}
    return save_archive(path, "diffusion", model.state_dict(), meta)


def load_diffusion(path) -> tuple[UNet, dict]:
    manifest, tensors = load_archive(path, "diffusion")
    model = UNet(UNetSpec.from_dict(manifest["meta"]["arch"]))
    _load_state(model, tensors, str(path))
    model.eval()
    return model, manifest


def save_adapter(path, adapted: AdaptedModel, config: dict | None = None, extra: dict | None = None) -> Path:
    meta = {"lora": _lora_dict(adapted.cfg), "base_arch": adapted.net.spec.to_dict(), "config": config or {}, **(extra or {})}
    return save_archive(path, "adapter", adapter_state(adapted), meta)


def load_adapter(path, base: UNet) -> tuple[AdaptedModel, dict]:
    manifest, tensors = load_archive(path, "adapter")
    want = manifest["meta"].get("base_arch")
    if want is not None and want != base.spec.to_dict():
        raise CheckpointError(f"{path}: adapter was trained on base {want}, got {base.spec.to_dict()}")
    cfg = LoRAConfig(**manifest["meta"]["lora"])
    adapted = attach_lora(base, cfg)
    try:
        load_adapter_state(adapted, {k: torch.as_tensor(np.array(v)) for k, v in tensors.items()})
    except (ValueError, InvalidArgument) as e:
        raise CheckpointError(f"{path}: {e}") from e
    adapted.eval()
    return adapted, manifest


def save_classifier(path, model: ClassifierModel, config: dict | None = None, extra: dict | None = None) -> Path:
    meta = {
        "arch": {"widths": list(model.net.widths), "image_size": model.image_size},
        "trained": bool(model.trained),
        "config": config or {},
        **(extra or {}),
    }
    return save_archive(path, "classifier", model.net.state_dict(), meta)


def load_classifier(path) -> tuple[ClassifierModel, dict]:
    manifest, tensors = load_archive(path, "classifier")
    arch = manifest["meta"]["arch"]
    net = ResNetSmall(tuple(arch["widths"]))
    _load_state(net, tensors, str(path))
    net.eval()
    return ClassifierModel(net, int(arch["image_size"]), trained=bool(manifest["meta"].get("trained"))), manifest


def _lora_dict(cfg: LoRAConfig) -> dict:
    import dataclasses

    d = dataclasses.asdict(cfg)
    if isinstance(d["targets"], tuple):
        d["targets"] = list(d["targets"])
    return d
