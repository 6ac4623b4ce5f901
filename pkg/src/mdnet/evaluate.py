"""Per-head evaluation reports (one row per decoder, six metrics each).

Cases are volumes by default: overlap metrics use confusion counts summed over
all slices of a volume, and HD95 is the mean of the per-slice values over slices
where both masks are nonempty (pixel units). ``per_slice=True`` treats every
slice as its own case.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any

import numpy as np
import torch

from mdnet.data import Sample
from mdnet.metrics import METRIC_NAMES, CaseMetrics, Counts, aggregate, confusion_counts, hd95, overlap_metrics

HEADS = ("M1", "M2", "M3")
NOTE = (
    "Values come from this run's data and are not comparable to published "
    "full-scale LiTS/MSD benchmark numbers."
)

Predictor = Callable[[torch.Tensor], Sequence[np.ndarray]]


def model_predictor(model: torch.nn.Module, batch_size: int = 8) -> Predictor:
    """Wrap a model as ``images -> [prob_M1, prob_M2, prob_M3]`` (numpy, [B, 1, H, W])."""
    dtype = next(model.parameters()).dtype

    @torch.no_grad()
    def run(images: torch.Tensor) -> list[np.ndarray]:
        model.eval()
        outs: list[list[np.ndarray]] = [[], [], []]
        for start in range(0, len(images), batch_size):
            logits = model(images[start:start + batch_size].to(dtype))
            for head, m in enumerate(logits):
                outs[head].append(torch.sigmoid(m).cpu().numpy())
        return [np.concatenate(o) for o in outs]

    return run


def _volume_case(preds: list[np.ndarray], gts: list[np.ndarray], case: str) -> CaseMetrics:
    totals = [0, 0, 0, 0]
    distances = []
    for p, g in zip(preds, gts):
        for i, v in enumerate(confusion_counts(p, g)):
            totals[i] += v
        d = hd95(p, g)
        if d is not None:
            distances.append(d)
    mean_hd = math.fsum(distances) / len(distances) if distances else None
    return CaseMetrics(**overlap_metrics(Counts(*totals)), hd95=mean_hd, case=case)


def evaluate(
    predictor: Predictor,
    samples: list[Sample],
    threshold: float = 0.5,
    per_slice: bool = False,
    batch_size: int = 8,
) -> dict[str, Any]:
    if not samples:
        raise ValueError("no samples to evaluate")
    grouped: OrderedDict[str, list[tuple[list[np.ndarray], np.ndarray]]] = OrderedDict()
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = torch.from_numpy(np.stack([s.image for s in chunk]))
        probs = predictor(images)
        for i, s in enumerate(chunk):
            key = s.meta.get("volume_id", "case")
            if per_slice:
                key = f"{key}/{s.meta.get('slice_index', start + i)}"
            masks = [(np.asarray(p[i, 0]) > threshold) for p in probs]
            grouped.setdefault(key, []).append((masks, s.mask[0].astype(bool)))

    heads: dict[str, Any] = {}
    for h, name in enumerate(HEADS):
        cases = [
            _volume_case([m[h] for m, _ in items], [g for _, g in items], case)
            for case, items in grouped.items()
        ]
        heads[name] = {"mean": aggregate(cases), "cases": [c.as_dict() for c in cases]}
    return {
        "grouping": "slice" if per_slice else "volume",
        "threshold": threshold,
        "metrics": list(METRIC_NAMES),
        "heads": heads,
        "note": NOTE,
    }


def _fmt(value: float | None) -> str:
    return "undefined" if value is None else f"{value:.4f}"


def format_report(report: dict[str, Any]) -> str:
    """Plain-text report: per-decoder summary table, then per-case rows with per-head columns."""
    metrics = report["metrics"]
    lines = [f"# MDNet per-decoder evaluation ({report['grouping']} cases, threshold {report['threshold']})", ""]
    lines.append("| Head | " + " | ".join(metrics) + " |")
    lines.append("|" + "---|" * (len(metrics) + 1))
    for i, name in enumerate(HEADS):
        mean = report["heads"][name]["mean"]
        lines.append(f"| Decoder {i + 1} ({name}) | " + " | ".join(_fmt(mean[m]) for m in metrics) + " |")
    first = report["heads"][HEADS[0]]["mean"]
    lines += ["", f"cases: {first['n_cases']}, hd95 defined for: "
              + ", ".join(f"{n} {report['heads'][n]['mean']['hd95_count']}" for n in HEADS), ""]
    header = ["case"] + [f"{n}.{m}" for n in HEADS for m in metrics]
    lines.append("\t".join(header))
    for j, case in enumerate(report["heads"][HEADS[0]]["cases"]):
        row = [case["case"]]
        for n in HEADS:
            c = report["heads"][n]["cases"][j]
            row += [_fmt(c[m]) for m in metrics]
        lines.append("\t".join(row))
    lines += ["", f"Note: {report['note']}", ""]
    return "\n".join(lines)


def write_report(report: dict[str, Any], out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = out / "report.txt"
    data = out / "report.json"
    text.write_text(format_report(report))
    data.write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    return text, data
