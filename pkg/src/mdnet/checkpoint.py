"""Checkpoint archive: named tensors as little-endian raw bytes plus a JSON manifest.

Layout (an uncompressed zip container, timestamps pinned so identical content
gives identical bytes)::

    manifest.json          {"format": "mdnet-archive", "format_version": 1,
                            "tensors": {name: {"dtype": "<f4", "shape": [...],
                                               "entry": "tensors/000000.bin"}},
                            "meta": {...}}
    tensors/000000.bin     raw little-endian bytes, C order
    ...

``meta`` carries the caller's manifest (config preset, model config, epoch, ...).
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path
from typing import Any

import numpy as np
import torch

from mdnet.errors import ArchiveVersionError, CorruptArchiveError

FORMAT = "mdnet-archive"
FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)

_TAGS = {
    torch.float16: "<f2",
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int8: "|i1",
    torch.uint8: "|u1",
    torch.int16: "<i2",
    torch.int32: "<i4",
    torch.int64: "<i8",
    torch.bool: "|b1",
}
_FROM_TAG = {tag: dtype for dtype, tag in _TAGS.items()}


def _entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_archive(tensors: dict[str, torch.Tensor], meta: dict[str, Any], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = {}
    blobs = []
    for i, name in enumerate(sorted(tensors)):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _TAGS:
            raise TypeError(f"tensor {name}: unsupported dtype {t.dtype}")
        tag = _TAGS[t.dtype]
        entry = f"tensors/{i:06d}.bin"
        index[name] = {"dtype": tag, "shape": list(t.shape), "entry": entry}
        blobs.append((entry, t.numpy().astype(np.dtype(tag), copy=False).tobytes()))
    manifest = {"format": FORMAT, "format_version": FORMAT_VERSION, "tensors": index, "meta": meta}
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _entry(zf, "manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode())
        for entry, data in blobs:
            _entry(zf, entry, data)
    tmp.replace(path)


def read_manifest(path: str | Path) -> dict[str, Any]:
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, EOFError) as exc:
        raise CorruptArchiveError(f"{path}: not a readable checkpoint archive ({exc})") from exc
    if manifest.get("format") != FORMAT:
        raise CorruptArchiveError(f"{path}: unknown archive format {manifest.get('format')!r}")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ArchiveVersionError(
            f"{path}: archive format version {manifest.get('format_version')} "
            f"is not supported (expected {FORMAT_VERSION})"
        )
    return manifest


def load_archive(path: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    manifest = read_manifest(path)
    tensors = {}
    try:
        with zipfile.ZipFile(path) as zf:
            for name, spec in manifest["tensors"].items():
                dtype = np.dtype(spec["dtype"])
                raw = zf.read(spec["entry"])
                count = int(np.prod(spec["shape"], dtype=np.int64))
                if len(raw) != count * dtype.itemsize:
                    raise CorruptArchiveError(f"{path}: tensor {name} has {len(raw)} bytes, expected {count * dtype.itemsize}")
                arr = np.frombuffer(raw, dtype=dtype).reshape(spec["shape"])
                tensors[name] = torch.from_numpy(arr.astype(dtype.newbyteorder("="), copy=True))
    except (zipfile.BadZipFile, KeyError, EOFError, ValueError) as exc:
        raise CorruptArchiveError(f"{path}: damaged tensor data ({exc})") from exc
    return tensors, manifest["meta"]


def save_checkpoint(
    model: torch.nn.Module,
    meta: dict[str, Any],
    path: str | Path,
    optimizer: torch.optim.Optimizer | None = None,
) -> None:
    """Write model parameters/buffers and, optionally, Adam state."""
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    meta = dict(meta)
    if optimizer is not None:
        state = optimizer.state_dict()
        scalars = {}
        for pid, pstate in state["state"].items():
            for key, value in pstate.items():
                if torch.is_tensor(value):
                    tensors[f"optimizer.{pid}.{key}"] = value
                else:
                    scalars[f"{pid}.{key}"] = value
        meta["optimizer"] = {"param_groups": state["param_groups"], "scalars": scalars}
    save_archive(tensors, meta, path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    """Return (model state dict, meta). Optimizer tensors stay available via :func:`optimizer_state`."""
    tensors, meta = load_archive(path)
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    meta = dict(meta)
    meta["_optimizer_tensors"] = {k: v for k, v in tensors.items() if k.startswith("optimizer.")}
    return state, meta


def optimizer_state(meta: dict[str, Any]) -> dict[str, Any] | None:
    opt = meta.get("optimizer")
    if opt is None:
        return None
    state: dict[int, dict[str, Any]] = {}
    for name, value in meta.get("_optimizer_tensors", {}).items():
        _, pid, key = name.split(".", 2)
        state.setdefault(int(pid), {})[key] = value
    for name, value in opt["scalars"].items():
        pid, key = name.split(".", 1)
        state.setdefault(int(pid), {})[key] = value
    return {"state": state, "param_groups": opt["param_groups"]}


def export_weights(module: torch.nn.Module, path: str | Path, meta: dict[str, Any] | None = None) -> None:
    save_archive(module.state_dict(), meta or {}, path)
