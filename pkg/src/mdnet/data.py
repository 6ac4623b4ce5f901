"""CT volume ingestion, slice preprocessing, dataset splits, cache layout and synthetic data.

Cache layout written by :func:`write_cache`::

    <root>/manifest.json
    <root>/volumes/<volume id>/img_0000.png   16-bit grayscale, value/65535 in [0, 1]
    <root>/volumes/<volume id>/msk_0000.png   8-bit, 0 = background, 255 = foreground

``manifest.json`` fields:

    format, format_version   "mdnet-cache", 1
    dataset_kind             "lits" | "spleen" | "generic" | "synthetic"
    size                     in-plane size of every stored slice
    window                   [lo, hi] HU window used for normalisation (null for synthetic)
    foreground_only          whether empty-mask slices were dropped
    label_mapping            label ids merged into the foreground (null for synthetic)
    volumes                  list of {id, spacing, n_slices, samples: [{slice, image, mask}]}
    splits                   {"train": [ids], "val": [ids], "test": [ids]}

The manifest is written with sorted keys and no timestamps, so identical inputs
give a byte-identical file.
"""

from __future__ import annotations

import json
import logging
import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from mdnet.config import PreprocessConfig
from mdnet.errors import ConfigError, DataError

log = logging.getLogger(__name__)

CACHE_FORMAT = "mdnet-cache"
CACHE_VERSION = 1

FOREGROUND_LABELS = {"lits": (1, 2), "spleen": (1,)}
KNOWN_LABELS = {"lits": (0, 1, 2), "spleen": (0, 1)}


@dataclass
class Volume:
    voxels: np.ndarray  # [D, H, W] Hounsfield units
    spacing: tuple[float, float, float]  # mm along (D, H, W)
    labels: np.ndarray  # [D, H, W] integer
    id: str

    def __post_init__(self) -> None:
        if self.voxels.shape != self.labels.shape:
            raise DataError(
                f"volume {self.id}: image grid {self.voxels.shape} does not match label grid {self.labels.shape}"
            )
        if any(s <= 0 for s in self.spacing):
            raise DataError(f"volume {self.id}: spacing must be positive, got {self.spacing}")


@dataclass
class Sample:
    image: np.ndarray  # [3, S, S] float32 in [0, 1]
    mask: np.ndarray  # [1, S, S] uint8 in {0, 1}
    meta: dict[str, Any] = field(default_factory=dict)


# --------------------------------------------------------------------------- NIfTI


def _read_nifti(path: Path):
    import nibabel as nib

    try:
        img = nib.load(str(path))
        data = np.asanyarray(img.dataobj)
        zooms = img.header.get_zooms()
    except Exception as exc:  # nibabel raises a zoo of types for bad headers
        raise DataError(f"{path}: unreadable NIfTI file ({exc})") from exc
    if data.ndim != 3:
        raise DataError(f"{path}: expected a 3D volume, got {data.ndim} dimensions")
    return img, data, zooms


def read_image_volume(path: str | Path) -> np.ndarray:
    """Read a single NIfTI image as a float32 [D, H, W] array (axial slices first)."""
    img, _, _ = _read_nifti(Path(path))
    return np.asarray(img.get_fdata(dtype=np.float32)).transpose(2, 1, 0)


def load_volume(image_path: str | Path, label_path: str | Path, volume_id: str | None = None) -> Volume:
    """Read an image/label NIfTI pair into a [D, H, W] volume (axial slices first)."""
    image_path, label_path = Path(image_path), Path(label_path)
    img, data, zooms = _read_nifti(image_path)
    _, labels, _ = _read_nifti(label_path)
    if data.shape != labels.shape:
        raise DataError(f"grid mismatch: {image_path.name} has {data.shape}, {label_path.name} has {labels.shape}")
    voxels = np.asarray(img.get_fdata(dtype=np.float32)).transpose(2, 1, 0)
    labels = np.rint(np.asarray(labels, dtype=np.float64)).astype(np.int16).transpose(2, 1, 0)
    spacing = (float(zooms[2]), float(zooms[1]), float(zooms[0]))
    vid = volume_id or _stem(image_path)
    return Volume(np.ascontiguousarray(voxels), spacing, np.ascontiguousarray(labels), vid)


def save_volume(volume: Volume, image_path: str | Path, label_path: str | Path) -> None:
    """Write a volume as an image/label NIfTI pair readable by :func:`load_volume`."""
    import nibabel as nib

    for path in (Path(image_path), Path(label_path)):
        path.parent.mkdir(parents=True, exist_ok=True)
    sd, sh, sw = volume.spacing
    affine = np.diag([sw, sh, sd, 1.0])
    nib.save(nib.Nifti1Image(volume.voxels.transpose(2, 1, 0).astype(np.float32), affine), str(image_path))
    nib.save(nib.Nifti1Image(volume.labels.transpose(2, 1, 0).astype(np.int16), affine), str(label_path))


def _stem(path: Path) -> str:
    name = path.name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


# --------------------------------------------------------------------------- preprocessing


def merge_labels(
    labels: np.ndarray,
    mapping: set[int] | tuple[int, ...],
    known: tuple[int, ...] | None = None,
) -> np.ndarray:
    """Binary mask: 1 where the label id is in ``mapping``.

    Ids outside ``known`` (when given) trigger a warning and count as background.
    """
    mapping = set(int(v) for v in mapping)
    if known is not None:
        unknown = sorted(set(np.unique(labels).tolist()) - set(known))
        if unknown:
            warnings.warn(f"unknown label ids {unknown} treated as background", stacklevel=2)
            mapping -= set(unknown)
    if not mapping:
        return np.zeros(labels.shape, dtype=np.uint8)
    return np.isin(labels, sorted(mapping)).astype(np.uint8)


def window_normalize(hu: np.ndarray, window: tuple[float, float]) -> np.ndarray:
    lo, hi = window
    if lo >= hi:
        raise ConfigError(f"degenerate HU window {window}: lower bound must be < upper bound")
    return ((np.clip(hu, lo, hi) - lo) / (hi - lo)).astype(np.float32)


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a [H, W] float array to [size, size]."""
    if image.shape == (size, size):
        return image.astype(np.float32)
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None, None]
    return F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)[0, 0].numpy()


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of a [H, W] binary array to [size, size]."""
    if mask.shape == (size, size):
        return mask.astype(np.uint8)
    t = torch.from_numpy(np.ascontiguousarray(mask, dtype=np.uint8))[None, None].float()
    return F.interpolate(t, size=(size, size), mode="nearest-exact")[0, 0].numpy().astype(np.uint8)


def slice_and_preprocess(
    volume: Volume,
    config: PreprocessConfig | None = None,
    mapping: set[int] | tuple[int, ...] | None = None,
    known: tuple[int, ...] | None = None,
) -> list[Sample]:
    """Cut a volume into windowed, resized, three-channel axial slices."""
    config = config or PreprocessConfig()
    if mapping is None:
        mapping = config.label_mapping if config.label_mapping is not None else (1,)
    masks = merge_labels(volume.labels, mapping, known)
    samples = []
    for d in range(volume.voxels.shape[0]):
        mask = resize_mask(masks[d], config.size)
        if config.foreground_only and not mask.any():
            continue
        gray = np.clip(resize_image(window_normalize(volume.voxels[d], config.window), config.size), 0.0, 1.0)
        samples.append(
            Sample(
                image=np.repeat(gray[None], 3, axis=0),
                mask=mask[None],
                meta={"volume_id": volume.id, "slice_index": d, "spacing": list(volume.spacing)},
            )
        )
    return samples


# --------------------------------------------------------------------------- splits


def split_dataset(
    volume_ids: list[str],
    dataset_kind: str,
    seed: int = 0,
    ratios: tuple[float, float, float] = (0.7, 0.15, 0.15),
) -> tuple[list[str], list[str], list[str]]:
    """Partition volume ids into (train, val, test).

    ``lits``: seeded shuffle, 20 validation and 20 test volumes, the rest train
    (91/20/20 for the 131 public scans). ``spleen``: order preserving, first five
    test, next five validation, the rest train. ``generic``: seeded shuffle with
    the given train/val/test ratios.
    """
    ids = list(volume_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("volume ids must be unique")
    n = len(ids)
    if dataset_kind == "lits":
        if n < 41:
            raise ValueError(f"lits split needs at least 41 volumes (20 val + 20 test + 1 train), got {n}")
        order = [ids[i] for i in np.random.default_rng(seed).permutation(n)]
        return order[40:], order[:20], order[20:40]
    if dataset_kind == "spleen":
        if n < 11:
            raise ValueError(f"spleen split needs at least 11 volumes (5 test + 5 val + 1 train), got {n}")
        return ids[10:], ids[5:10], ids[:5]
    if dataset_kind == "generic":
        if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
            raise ValueError(f"invalid split ratios {ratios}")
        total = sum(ratios)
        n_val = int(round(n * ratios[1] / total))
        n_test = int(round(n * ratios[2] / total))
        n_train = n - n_val - n_test
        if n_train < (1 if ratios[0] > 0 else 0) or n_train < 0:
            raise ValueError(f"too few volumes ({n}) for split ratios {ratios}")
        order = [ids[i] for i in np.random.default_rng(seed).permutation(n)]
        return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]
    raise ValueError(f"unknown dataset kind {dataset_kind!r}")


# --------------------------------------------------------------------------- synthetic


def _smooth_texture(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    tex = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma, mode="wrap")
    tex -= tex.min()
    return tex / max(tex.max(), 1e-12)


def _synth_one(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    while True:
        n_lobes = int(rng.integers(0, 4))
        freqs = rng.integers(2, 6, size=n_lobes)
        amps = rng.uniform(0.05, 0.35 / max(n_lobes, 1), size=n_lobes)
        phases = rng.uniform(0, 2 * np.pi, size=n_lobes)
        aspect = rng.uniform(0.55, 1.0)
        angle = rng.uniform(0, np.pi)
        frac = rng.uniform(0.04, 0.35)
        r0 = math.sqrt(frac * size * size / (math.pi * aspect * (1 + 0.5 * float(np.sum(amps**2)))))
        r_max = r0 * (1 + float(np.sum(amps)))
        if r_max > 0.5 * size - 2:
            continue
        cy, cx = rng.uniform(r_max + 1, size - r_max - 1, size=2)
        dy, dx = yy - cy, xx - cx
        u = dx * math.cos(angle) + dy * math.sin(angle)
        v = (-dx * math.sin(angle) + dy * math.cos(angle)) / aspect
        rho = np.hypot(u, v)
        theta = np.arctan2(v, u)
        radius = r0 * (1 + sum(a * np.cos(k * theta + p) for a, k, p in zip(amps, freqs, phases)))
        signed = radius - rho
        mask = signed > 0
        if 0.02 <= mask.mean() <= 0.5:
            break
    softness = rng.uniform(0.8, 2.5)
    alpha = 1.0 / (1.0 + np.exp(-np.clip(signed / softness, -50, 50)))
    background = 0.1 + 0.3 * _smooth_texture(rng, size, size / 16)
    foreground = rng.uniform(0.55, 0.8) + 0.1 * _smooth_texture(rng, size, size / 32)
    image = background * (1 - alpha) + foreground * alpha + rng.normal(0, 0.03, size=(size, size))
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask.astype(np.uint8)


def synth_generate(seed: int, n: int, size: int = 256) -> list[Sample]:
    """Textured images with one soft-edged ellipse or lobed blob and its exact mask.

    Sample ``i`` depends only on ``(seed, i, size)``, never on ``n``. Every mask
    covers between 2% and 50% of the image.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if size % 32:
        raise ValueError(f"size must be a multiple of 32, got {size}")
    samples = []
    for i in range(n):
        image, mask = _synth_one(np.random.default_rng([seed, i]), size)
        samples.append(
            Sample(
                image=np.repeat(image[None], 3, axis=0),
                mask=mask[None],
                meta={"volume_id": f"synth_{i:04d}", "slice_index": 0, "spacing": [1.0, 1.0, 1.0]},
            )
        )
    return samples


# --------------------------------------------------------------------------- cache


class CacheWriter:
    """Write samples to the cache layout incrementally, then the manifest.

    Samples can be added volume by volume so a whole dataset never has to be
    held in memory.
    """

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.volumes: dict[str, dict[str, Any]] = {}
        self.size: int | None = None

    def add(self, samples: list[Sample]) -> None:
        for s in samples:
            vid = s.meta["volume_id"]
            entry = self.volumes.setdefault(vid, {"id": vid, "spacing": s.meta.get("spacing"), "samples": []})
            vdir = self.root / "volumes" / vid
            vdir.mkdir(parents=True, exist_ok=True)
            idx = int(s.meta["slice_index"])
            img_rel = f"volumes/{vid}/img_{idx:04d}.png"
            msk_rel = f"volumes/{vid}/msk_{idx:04d}.png"
            gray = np.rint(np.clip(s.image[0], 0.0, 1.0) * 65535.0).astype(np.uint16)
            Image.fromarray(gray).save(self.root / img_rel)
            Image.fromarray((s.mask[0] > 0).astype(np.uint8) * 255).save(self.root / msk_rel)
            entry["samples"].append({"slice": idx, "image": img_rel, "mask": msk_rel})
            self.size = int(s.image.shape[-1])

    def finish(
        self,
        splits: dict[str, list[str]],
        *,
        dataset_kind: str,
        config: PreprocessConfig | None = None,
        n_slices: dict[str, int] | None = None,
        volume_ids: list[str] | None = None,
    ) -> Path:
        """Write ``manifest.json`` and return its path.

        ``volume_ids`` lists volumes that must appear even if all their slices
        were filtered out.
        """
        for vid in volume_ids or []:
            self.volumes.setdefault(vid, {"id": vid, "spacing": None, "samples": []})
        for vid, entry in self.volumes.items():
            entry["n_slices"] = (n_slices or {}).get(vid, len(entry["samples"]))
        for name, ids in splits.items():
            missing = [v for v in ids if v not in self.volumes]
            if missing:
                log.warning("split %s references volumes without samples: %s", name, missing)
        manifest = {
            "format": CACHE_FORMAT,
            "format_version": CACHE_VERSION,
            "dataset_kind": dataset_kind,
            "size": self.size,
            "window": list(config.window) if config else None,
            "foreground_only": bool(config.foreground_only) if config else False,
            "label_mapping": list(config.label_mapping) if config and config.label_mapping is not None else None,
            "volumes": [self.volumes[v] for v in sorted(self.volumes, key=_natural_key)],
            "splits": {k: list(v) for k, v in splits.items()},
        }
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / "manifest.json"
        path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
        return path


def _natural_key(text: str) -> list:
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", text)]


def write_cache(
    samples: list[Sample],
    root: str | Path,
    splits: dict[str, list[str]],
    *,
    dataset_kind: str,
    config: PreprocessConfig | None = None,
    n_slices: dict[str, int] | None = None,
) -> Path:
    """Write samples as PNG slices plus ``manifest.json``; return the manifest path."""
    writer = CacheWriter(root)
    writer.add(samples)
    return writer.finish(splits, dataset_kind=dataset_kind, config=config, n_slices=n_slices)


def read_manifest(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable dataset manifest ({exc})") from exc
    if manifest.get("format") != CACHE_FORMAT:
        raise DataError(f"{path}: not an mdnet dataset manifest")
    manifest["_root"] = str(path.parent)
    return manifest


def load_split(manifest: dict[str, Any], split: str) -> list[Sample]:
    """Read every cached slice of the volumes assigned to ``split``."""
    if split not in manifest["splits"]:
        raise DataError(f"manifest has no {split!r} split (available: {sorted(manifest['splits'])})")
    root = Path(manifest["_root"])
    by_id = {v["id"]: v for v in manifest["volumes"]}
    samples = []
    for vid in manifest["splits"][split]:
        vol = by_id.get(vid)
        if vol is None:
            raise DataError(f"split {split!r} references unknown volume {vid!r}")
        for s in vol["samples"]:
            gray = np.asarray(Image.open(root / s["image"]), dtype=np.float32) / 65535.0
            mask = (np.asarray(Image.open(root / s["mask"])) > 127).astype(np.uint8)
            samples.append(
                Sample(
                    image=np.repeat(gray[None], 3, axis=0),
                    mask=mask[None],
                    meta={"volume_id": vid, "slice_index": s["slice"], "spacing": vol.get("spacing")},
                )
            )
    return samples


class SampleDataset(torch.utils.data.Dataset):
    """Wrap a list of samples as (image, mask) float tensors."""

    def __init__(self, samples: list[Sample], dtype: torch.dtype = torch.float32) -> None:
        self.samples = samples
        self.dtype = dtype

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> tuple[torch.Tensor, torch.Tensor]:
        s = self.samples[i]
        return torch.from_numpy(s.image).to(self.dtype), torch.from_numpy(s.mask).to(self.dtype)

    def tensors(self) -> tuple[torch.Tensor, torch.Tensor]:
        images = torch.from_numpy(np.stack([s.image for s in self.samples])).to(self.dtype)
        masks = torch.from_numpy(np.stack([s.mask for s in self.samples])).to(self.dtype)
        return images, masks
