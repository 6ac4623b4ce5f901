"""Command-line interface: preprocess | synth | train | eval | predict | viz | inspect.

Every command writes its effective configuration to ``config.yaml`` in its
output directory. Configuration precedence is defaults < ``--preset`` <
``--config`` file < ``--set section.key=value`` overrides. Output directories
for ``preprocess`` and ``synth`` default to ``$MDNET_CACHE_ROOT/<name>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any

import numpy as np
import torch
import yaml
from PIL import Image

from mdnet import data as D
from mdnet.config import ModelConfig, PreprocessConfig, RunConfig, load_run_config
from mdnet.errors import ConfigError, DataError, MDNetError
from mdnet.evaluate import evaluate, model_predictor, write_report
from mdnet.model import SegOutputs, predict, profile
from mdnet.training import load_model, train
from mdnet.viz import render, save_png

log = logging.getLogger("mdnet")

CACHE_ENV = "MDNET_CACHE_ROOT"
PARAM_ANCHOR = 72.33e6
MAC_ANCHOR = 116.64e9
ANCHOR_BAND = 0.20


def discover_pairs(input_dir: Path, kind: str) -> list[tuple[str, Path, Path]]:
    """Find (volume id, image path, label path) triples in the documented layouts.

    lits:    volume-<n>.nii[.gz] with segmentation-<n>.nii[.gz], any depth
    spleen:  imagesTr/spleen_<n>.nii.gz with labelsTr/spleen_<n>.nii.gz
    generic: images/<id>.nii[.gz] with labels/<id>.nii[.gz]
    """
    if not input_dir.is_dir():
        raise DataError(f"input directory {input_dir} does not exist")
    pairs, missing = [], []
    if kind == "lits":
        for img in sorted(input_dir.rglob("volume-*.nii*"), key=lambda p: D._natural_key(p.name)):
            num = img.name[len("volume-"):].split(".")[0]
            candidates = list(input_dir.rglob(f"segmentation-{num}.nii*"))
            if candidates:
                pairs.append((f"volume-{num}", img, candidates[0]))
            else:
                missing.append(img.name)
    else:
        img_dir, lbl_dir = ("imagesTr", "labelsTr") if kind == "spleen" else ("images", "labels")
        for img in sorted((input_dir / img_dir).glob("*.nii*"), key=lambda p: D._natural_key(p.name)):
            if img.name.startswith("."):
                continue
            lbl = input_dir / lbl_dir / img.name
            if lbl.exists():
                pairs.append((D._stem(img), img, lbl))
            else:
                missing.append(img.name)
    if missing:
        raise DataError("missing label files for: " + ", ".join(missing))
    if not pairs:
        raise DataError(f"no {kind} volume/label pairs found under {input_dir}")
    return pairs


def _out_dir(args: argparse.Namespace, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(CACHE_ENV)
    if not root:
        raise ConfigError(f"--out is required when ${CACHE_ENV} is not set")
    return Path(root) / default_name


def _run_config(args: argparse.Namespace) -> RunConfig:
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    return load_run_config(getattr(args, "config", None), overrides, getattr(args, "preset", None))


def _echo(out: Path, config: dict[str, Any]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(config, sort_keys=True))


# --------------------------------------------------------------------------- commands


def cmd_preprocess(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    pre = cfg.preprocess
    if pre.label_mapping is None and args.kind in D.FOREGROUND_LABELS:
        pre = PreprocessConfig(pre.window, pre.size, pre.foreground_only, D.FOREGROUND_LABELS[args.kind])
    if args.foreground_only:
        pre.foreground_only = True
    pairs = discover_pairs(Path(args.input_dir), args.kind)
    ids = [vid for vid, _, _ in pairs]
    seed = cfg.train.seed if args.seed is None else args.seed
    # split first so an impossible split fails before anything is written
    train_ids, val_ids, test_ids = D.split_dataset(ids, args.kind, seed)
    out = _out_dir(args, f"{args.kind}_cache")
    writer = D.CacheWriter(out)
    n_slices = {}
    for vid, img, lbl in pairs:
        volume = D.load_volume(img, lbl, vid)
        n_slices[vid] = volume.voxels.shape[0]
        writer.add(D.slice_and_preprocess(volume, pre, known=D.KNOWN_LABELS.get(args.kind)))
        log.info("preprocessed %s (%d slices)", vid, n_slices[vid])
    manifest = writer.finish(
        {"train": train_ids, "val": val_ids, "test": test_ids},
        dataset_kind=args.kind, config=pre, n_slices=n_slices, volume_ids=ids,
    )
    _echo(out, RunConfig(cfg.model, cfg.train, pre).to_dict())
    print(f"wrote {manifest} ({len(ids)} volumes, split {len(train_ids)}/{len(val_ids)}/{len(test_ids)})")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    out = _out_dir(args, "synthetic")
    seed = 7 if args.seed is None else args.seed
    samples = D.synth_generate(seed, args.n, args.size)
    ids = [s.meta["volume_id"] for s in samples]
    if args.overfit:
        splits = {"train": ids, "val": ids, "test": ids}
    else:
        tr, va, te = D.split_dataset(ids, "generic", seed, tuple(args.ratios))
        splits = {"train": tr, "val": va, "test": te}
    manifest = D.write_cache(samples, out, splits, dataset_kind="synthetic")
    _echo(out, {"synth": {"seed": seed, "n": args.n, "size": args.size, "overfit": args.overfit}})
    print(f"wrote {manifest} ({args.n} samples)")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    manifest = D.read_manifest(args.data)
    for split in ("train", "val"):
        if not manifest["splits"].get(split):
            raise DataError(f"manifest {args.data} has no {split!r} samples")
    train_set = D.load_split(manifest, "train")
    val_set = D.load_split(manifest, "val")
    if not train_set or not val_set:
        raise DataError("train and val splits must contain samples")
    out = Path(args.out)
    _echo(out, cfg.to_dict())
    result = train(cfg.model, cfg.train, train_set, val_set, out, resume=args.resume,
                   extra_meta={"preprocess": cfg.preprocess.to_dict()})
    last = result.history[-1]
    print(
        f"best epoch {result.best_epoch} val loss {result.best_val_loss:.4f}; "
        f"last epoch {last['epoch']} val dsc " + ", ".join(f"{d:.4f}" for d in last["val_dsc"])
    )
    return 0


def _load_checkpoint_model(path: str):
    model, meta = load_model(path)
    return model, meta


def cmd_eval(args: argparse.Namespace) -> int:
    model, meta = _load_checkpoint_model(args.checkpoint)
    manifest = D.read_manifest(args.data)
    size = manifest.get("size")
    if size is None or size % 32:
        raise ConfigError(f"manifest image size {size} is not a multiple of 32")
    if meta.get("image_size") is not None and meta["image_size"] != size:
        raise ConfigError(f"checkpoint was trained on {meta['image_size']}px images but manifest has {size}px")
    samples = D.load_split(manifest, args.split)
    if not samples:
        raise DataError(f"split {args.split!r} is empty")
    report = evaluate(model_predictor(model), samples, args.threshold, per_slice=args.per_slice)
    report["split"] = args.split
    out = Path(args.out)
    text, _ = write_report(report, out)
    _echo(out, {"eval": {"checkpoint": str(args.checkpoint), "data": str(args.data), "split": args.split,
                         "threshold": args.threshold, "per_slice": args.per_slice},
                "model": meta["model_config"]})
    print(text.read_text())
    return 0


def _read_image(path: Path) -> np.ndarray:
    try:
        img = Image.open(path)
        arr = np.asarray(img)
    except Exception as exc:
        raise DataError(f"{path}: unreadable image ({exc})") from exc
    if arr.ndim == 3:
        arr = arr[..., :3].mean(axis=-1)
    scale = 65535.0 if arr.dtype == np.uint16 or img.mode.startswith("I") else 255.0
    return (arr.astype(np.float32) / scale).clip(0.0, 1.0)


def _load_inputs(path: Path, meta: dict[str, Any]) -> list[tuple[str, np.ndarray]]:
    """Grayscale [S, S] slices in [0, 1] named for output files."""
    size = meta.get("image_size") or 512
    if not path.exists():
        raise DataError(f"{path} does not exist")
    if path.name.endswith((".nii", ".nii.gz")):
        pre = PreprocessConfig(**{**PreprocessConfig().to_dict(), **meta.get("preprocess", {}), "size": size})
        voxels = D.read_image_volume(path)
        return [
            (f"slice_{d:04d}", np.clip(D.resize_image(D.window_normalize(voxels[d], pre.window), size), 0, 1))
            for d in range(voxels.shape[0])
        ]
    gray = _read_image(path)
    if gray.shape != (size, size):
        gray = np.clip(D.resize_image(gray, size), 0.0, 1.0)
    return [(path.stem, gray)]


def _run_model(model, gray: np.ndarray, threshold: float) -> tuple[np.ndarray, SegOutputs]:
    dtype = next(model.parameters()).dtype
    image = torch.from_numpy(np.repeat(gray[None], 3, axis=0)).to(dtype)
    mask, probs = predict(model, image, threshold)
    return mask[0].numpy(), SegOutputs(*(p[0].numpy() for p in probs))


def cmd_predict(args: argparse.Namespace) -> int:
    model, meta = _load_checkpoint_model(args.checkpoint)
    out = Path(args.out)
    inputs = _load_inputs(Path(args.input), meta)
    for name, gray in inputs:
        mask, probs = _run_model(model, gray, args.threshold)
        save_png(mask.astype(np.uint8) * 255, out / f"{name}_mask.png")
        for head, prob in zip(("M1", "M2", "M3"), probs):
            save_png(np.rint(prob * 65535).astype(np.uint16), out / f"{name}_prob_{head}.png")
    _echo(out, {"predict": {"checkpoint": str(args.checkpoint), "input": str(args.input),
                            "threshold": args.threshold}, "model": meta["model_config"]})
    print(f"wrote {len(inputs)} masks to {out}")
    return 0


def cmd_viz(args: argparse.Namespace) -> int:
    model, meta = _load_checkpoint_model(args.checkpoint)
    out = Path(args.out)
    path = Path(args.input)
    if path.name == "manifest.json" or path.is_dir():
        manifest = D.read_manifest(path)
        samples = D.load_split(manifest, args.split)
        if not 0 <= args.index < len(samples):
            raise DataError(f"index {args.index} out of range for split {args.split!r} ({len(samples)} samples)")
        gray = samples[args.index].image[0]
    else:
        gray = _load_inputs(path, meta)[0][1]
    _, probs = _run_model(model, gray, args.threshold)
    paths = render(gray, list(probs), out, args.threshold)
    _echo(out, {"viz": {"checkpoint": str(args.checkpoint), "input": str(args.input),
                        "threshold": args.threshold}, "model": meta["model_config"]})
    print("\n".join(str(p) for p in paths))
    return 0


def format_inspect(report: dict[str, Any], config: ModelConfig) -> str:
    lines = [f"MDNet preset {config.preset!r}, input {report['input_shape']}", ""]
    lines.append(f"{'module':<10} {'params':>14} {'MACs':>18}")
    for name, row in report["modules"].items():
        lines.append(f"{name:<10} {row['params']:>14,d} {row['macs']:>18,d}")
    lines.append(f"{'total':<10} {report['params']:>14,d} {report['macs']:>18,d}")
    lines.append("")
    lines.append(f"params: {report['params'] / 1e6:.2f} M   MACs: {report['macs'] / 1e9:.2f} GMac")
    if config.preset == "full" and report["input_shape"] == [3, 512, 512]:
        dp = report["params"] / PARAM_ANCHOR - 1
        dm = report["macs"] / MAC_ANCHOR - 1
        ok = abs(dp) <= ANCHOR_BAND and abs(dm) <= ANCHOR_BAND
        lines.append(
            f"reference 72.33 M params / 116.64 GMac: {dp:+.1%} / {dm:+.1%} "
            f"({'within' if ok else 'OUTSIDE'} the ±20% band)"
        )
    lines += ["", "feature trace:"]
    for t in report["trace"]:
        lines.append(f"  {t['name']:<9} stride {t['stride']:>2}  shape {t['shape']}")
    return "\n".join(lines) + "\n"


def cmd_inspect(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    report = profile(cfg.model, (3, args.size, args.size))
    text = format_inspect(report, cfg.model)
    if args.out:
        out = Path(args.out)
        _echo(out, cfg.to_dict())
        (out / "inspect.txt").write_text(text)
        (out / "inspect.json").write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    print(text, end="")
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdnet", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, config: bool = True) -> None:
        p.add_argument("--out", help=f"output directory (preprocess/synth default: ${CACHE_ENV}/<name>)")
        p.add_argument("--seed", type=int, help="random seed (training, splits, synthetic data)")
        if config:
            p.add_argument("--config", help="YAML/JSON config with model/train/preprocess sections")
            p.add_argument("--preset", choices=("full", "tiny"), help="model preset")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="dotted-path override, e.g. train.learning_rate=3e-4 (repeatable)")

    p = sub.add_parser("preprocess", help="slice CT volumes into a cached dataset")
    p.add_argument("input_dir")
    p.add_argument("--kind", choices=("lits", "spleen", "generic"), required=True)
    p.add_argument("--foreground-only", action="store_true", help="drop slices with empty masks")
    common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="write a synthetic shape dataset")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--overfit", action="store_true", help="assign every sample to train, val and test")
    p.add_argument("--ratios", type=float, nargs=3, default=(0.7, 0.15, 0.15), metavar=("TRAIN", "VAL", "TEST"))
    common(p, config=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train MDNet on a cached dataset")
    p.add_argument("--data", required=True, help="dataset manifest.json or its directory")
    p.add_argument("--resume", action="store_true", help="continue from <out>/last.ckpt")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-decoder metrics on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--per-slice", action="store_true", help="treat every slice as a case")
    common(p, config=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment an image or NIfTI volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    common(p, config=False)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("viz", help="heatmaps, overlays and the M1/M2/M3 panel for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image, NIfTI volume (first slice) or dataset manifest")
    p.add_argument("--split", default="test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.5)
    common(p, config=False)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("inspect", help="parameter/MAC table and feature-shape trace")
    p.add_argument("--size", type=int, default=512)
    common(p)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command in ("train", "eval", "predict", "viz") and not args.out:
        parser.error(f"{args.command} requires --out")
    try:
        return args.func(args)
    except (MDNetError, ValueError, FileNotFoundError) as exc:
        print(f"mdnet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
