"""End-to-end acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line that is printed in the pytest terminal
summary under "acceptance criteria".
"""

import json
import math
import time

import numpy as np
import pytest
import torch

from fdcheck import check_module, check_sample, check_tensors
from mdnet import cli
from mdnet.blocks import CBAM, DCBlock, DecoderBlock, MaskAttention
from mdnet.config import ModelConfig
from mdnet.data import load_split, read_manifest, split_dataset
from mdnet.evaluate import evaluate, model_predictor
from mdnet.losses import bce_dice_loss
from mdnet.metrics import case_metrics, confusion_counts, hd95, overlap_metrics
from mdnet.model import MDNet, count_params_and_macs
from mdnet.training import load_model
from oracles import hd_all_pairs, overlap_loop, random_mask_pair
from test_blocks import _identity_mask_attention

pytestmark = pytest.mark.acceptance


@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory):
    """Tiny preset trained for 200 epochs on 8 synthetic 256px samples (train = val)."""
    root = tmp_path_factory.mktemp("overfit")
    assert cli.main(["synth", "--out", str(root / "data"), "--n", "8", "--size", "256", "--seed", "7", "--overfit"]) == 0
    tic = time.perf_counter()
    code = cli.main(["train", "--data", str(root / "data"), "--out", str(root / "run"), "--preset", "tiny",
                     "--seed", "0", "--set", "train.max_epochs=200"])
    elapsed = time.perf_counter() - tic
    assert code == 0
    return root, elapsed


def test_shape_contract(criterion):
    """Shape contract: full preset features and three 512x512 logit maps"""
    model = MDNet(ModelConfig.full()).eval()
    x = torch.randn(1, 3, 512, 512)
    tic = time.perf_counter()
    with torch.no_grad():
        feats = model.encoder(x)
        outs = model.decode(feats)
    elapsed = time.perf_counter() - tic
    shapes = [tuple(f.shape[1:]) for f in feats]
    ok = (
        shapes == [(64, 128, 128), (128, 64, 64), (320, 32, 32), (512, 16, 16)]
        and all(tuple(o.shape[1:]) == (1, 512, 512) for o in outs)
        and elapsed < 60
    )
    criterion(ok, f"forward {elapsed:.1f}s")
    assert ok


def test_param_mac_anchor(criterion, capsys):
    """Parameter/MAC anchor: inspect --preset full within 20% of 72.33 M / 116.64 GMac"""
    assert cli.main(["inspect", "--preset", "full"]) == 0
    text = capsys.readouterr().out
    params, macs = count_params_and_macs(ModelConfig.full(), (3, 512, 512))
    dp, dm = params / 72.33e6 - 1, macs / 116.64e9 - 1
    ok = abs(dp) <= 0.2 and abs(dm) <= 0.2 and f"{params:,d}" in text and f"{macs:,d}" in text
    criterion(ok, f"{params:,d} params ({dp:+.1%}), {macs:,d} MACs ({dm:+.1%})")
    assert ok


def test_gradient_suite(criterion):
    """Gradient suite: finite differences for blocks, loss and the tiny model (rel. error < 1e-3)"""
    tic = time.perf_counter()
    g = torch.Generator().manual_seed(0)

    def rnd(*shape):
        return torch.randn(*shape, generator=g)

    errors = {}
    errors["dc_block"] = max(check_module(DCBlock(4, 4, cbam_reduction=2), (rnd(2, 4, 16, 16),)).values())
    errors["cbam"] = max(check_module(CBAM(4, reduction=2), (rnd(2, 4, 16, 16),)).values())
    errors["mask_attention"] = max(
        check_module(MaskAttention(4), (rnd(2, 4, 16, 16), rnd(2, 1, 32, 32))).values()
    )
    errors["decoder_block"] = max(
        check_module(DecoderBlock(4, 4, 4), (rnd(2, 4, 8, 8), rnd(2, 4, 16, 16))).values()
    )
    logits = rnd(4, 1, 32, 32).double().requires_grad_()
    target = (rnd(4, 1, 32, 32) > 0.3).double()
    errors["bce_dice_loss"] = check_tensors(
        lambda: bce_dice_loss(logits, target), {"logits": logits}, max_entries=64
    )["logits"]
    torch.manual_seed(0)
    errors["tiny_model"] = check_sample(MDNet(ModelConfig.tiny()), (rnd(1, 3, 32, 32),), n=50)
    elapsed = time.perf_counter() - tic
    worst = max(errors.values())
    ok = worst < 1e-3 and elapsed < 600
    criterion(ok, f"max rel. error {worst:.1e} ({max(errors, key=errors.get)}), {elapsed:.0f}s")
    assert ok, errors


def test_metric_oracle_suite(criterion):
    """Metric oracle suite: HD95 and overlap metrics equal brute force; symmetry and translation hold"""
    rng = np.random.default_rng(12345)
    worst_hd = 0.0
    overlap_ok = True
    for _ in range(1000):
        a, b = random_mask_pair(rng)
        expected, got = hd_all_pairs(a, b), hd95(a, b)
        if expected is None or got is None:
            overlap_ok &= expected is None and got is None
        else:
            worst_hd = max(worst_hd, abs(got - expected))
    for _ in range(1000):
        a, b = random_mask_pair(rng)
        overlap_ok &= overlap_metrics(confusion_counts(a, b)) == overlap_loop(a, b)
    symmetric = translated = True
    for _ in range(100):
        a, b = random_mask_pair(rng)
        symmetric &= hd95(a, b) == hd95(b, a)
        symmetric &= overlap_metrics(confusion_counts(a, b))["dsc"] == overlap_metrics(confusion_counts(b, a))["dsc"]
    for _ in range(100):
        a, b = random_mask_pair(rng)
        dy, dx = rng.integers(0, 9, size=2)
        h, w = a.shape

        def place(m, y, x):
            canvas = np.zeros((h + 10, w + 10), bool)
            canvas[y:y + h, x:x + w] = m
            return canvas

        translated &= case_metrics(place(a, 1, 1), place(b, 1, 1)) == case_metrics(
            place(a, 1 + dy, 1 + dx), place(b, 1 + dy, 1 + dx)
        )
    ok = worst_hd <= 1e-9 and overlap_ok and symmetric and translated
    criterion(ok, f"max |hd95 - oracle| {worst_hd:.1e}")
    assert ok


def test_overfit_bar(criterion, overfit_run):
    """Overfit bar: tiny preset, 8 synthetic samples, M3 DSC >= 0.95 and every head >= 0.85 within 200 epochs"""
    root, elapsed = overfit_run
    model, _ = load_model(root / "run" / "best.ckpt")
    samples = load_split(read_manifest(root / "data"), "train")
    report = evaluate(model_predictor(model), samples, per_slice=True)
    dsc = [report["heads"][h]["mean"]["dsc"] for h in ("M1", "M2", "M3")]
    epochs = len((root / "run" / "history.jsonl").read_text().splitlines())
    ok = dsc[2] >= 0.95 and min(dsc) >= 0.85 and epochs <= 200 and elapsed < 15 * 60
    criterion(ok, "DSC M1/M2/M3 " + "/".join(f"{d:.4f}" for d in dsc) + f", {epochs} epochs, {elapsed:.0f}s")
    assert ok


def test_determinism(criterion, overfit_run, tmp_path):
    """Determinism: seeded training runs give identical histories; eval runs give identical reports"""
    root, _ = overfit_run
    data = str(root / "data")
    args = ["--data", data, "--preset", "tiny", "--seed", "5", "--set", "train.max_epochs=3", "--set", "train.patience=2"]
    assert cli.main(["train", *args, "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["train", *args, "--out", str(tmp_path / "b")]) == 0
    same_history = (tmp_path / "a" / "history.jsonl").read_bytes() == (tmp_path / "b" / "history.jsonl").read_bytes()
    for name in ("e1", "e2"):
        assert cli.main(["eval", "--checkpoint", str(tmp_path / "a" / "best.ckpt"), "--data", data,
                         "--out", str(tmp_path / name)]) == 0
    same_report = all(
        (tmp_path / "e1" / f).read_bytes() == (tmp_path / "e2" / f).read_bytes() for f in ("report.txt", "report.json")
    )
    ok = same_history and same_report
    criterion(ok, f"history identical: {same_history}, reports identical: {same_report}")
    assert ok


def test_mask_attention_unit_vector(criterion):
    """Mask attention unit case: identity convolutions, x=2.0, logit 0 -> 3.5 exactly"""
    ma = _identity_mask_attention()
    out = ma(torch.full((1, 1, 1, 1), 2.0, dtype=torch.float64), torch.zeros(1, 1, 1, 1, dtype=torch.float64))
    ok = out.item() == 3.5
    criterion(ok, f"output {out.item()!r}")
    assert ok


def test_split_fidelity(criterion):
    """Split fidelity: LiTS 131 ids -> (91, 20, 20); Spleen first five test, next five val, 31 train"""
    from pathlib import Path

    fixtures = Path(__file__).parent / "fixtures"
    lits = json.loads((fixtures / "lits_ids.json").read_text())["ids"]
    spleen = json.loads((fixtures / "spleen_ids.json").read_text())
    tr, va, te = split_dataset(lits, "lits", seed=0)
    lits_ok = (len(tr), len(va), len(te)) == (91, 20, 20) and sorted(tr + va + te) == sorted(lits)
    s_tr, s_va, s_te = split_dataset(spleen["ids"], "spleen")
    spleen_ok = s_te == spleen["test"] and s_va == spleen["val"] and len(s_tr) == 31
    spleen_ok &= s_tr == [i for i in spleen["ids"] if i not in s_te + s_va]
    ok = lits_ok and spleen_ok
    criterion(ok, f"lits {(len(tr), len(va), len(te))}, spleen {(len(s_tr), len(s_va), len(s_te))}")
    assert ok


def test_per_head_report(criterion, overfit_run, tmp_path):
    """Per-head eval report: three decoder rows x six metrics on the synthetic test split, with the note"""
    root, _ = overfit_run
    data = tmp_path / "heldout"
    assert cli.main(["synth", "--out", str(data), "--n", "12", "--size", "256", "--seed", "21"]) == 0
    assert cli.main(["eval", "--checkpoint", str(root / "run" / "best.ckpt"), "--data", str(data),
                     "--split", "test", "--out", str(tmp_path / "report")]) == 0
    text = (tmp_path / "report" / "report.txt").read_text()
    report = json.loads((tmp_path / "report" / "report.json").read_text())
    rows = [line for line in text.splitlines() if line.startswith("| Decoder")]
    header = next(line for line in text.splitlines() if line.startswith("| Head"))
    columns = [c.strip() for c in header.strip("|").split("|")][1:]
    ok = (
        len(rows) == 3
        and [r.split("(")[1].split(")")[0] for r in rows] == ["M1", "M2", "M3"]
        and columns == ["dsc", "miou", "recall", "precision", "f2", "hd95"]
        and all(len(r.strip("|").split("|")) == 7 for r in rows)
        and "not comparable" in text
        and all(math.isfinite(report["heads"][h]["mean"]["dsc"]) for h in ("M1", "M2", "M3"))
    )
    m3 = report["heads"]["M3"]["mean"]
    criterion(ok, f"held-out M3 DSC {m3['dsc']:.3f}, HD95 {m3['hd95']}")
    assert ok
