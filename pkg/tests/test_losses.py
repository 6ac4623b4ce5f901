import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fdcheck import check_tensors
from mdnet.config import ModelConfig
from mdnet.losses import bce_dice_loss, bce_with_logits, deep_supervision_loss, dice_loss, hard_dice
from mdnet.model import MDNet


def _bce_oracle(logits, target):
    # direct definition with p = sigmoid(x), in double precision
    total = 0.0
    for x, t in zip(logits.flatten().tolist(), target.flatten().tolist()):
        p = 1.0 / (1.0 + math.exp(-x))
        total += -(t * math.log(p) + (1 - t) * math.log(1 - p))
    return total / logits.numel()


def test_bce_at_zero_logits_is_ln2():
    target = torch.zeros(1, 1, 4, 4)
    target[..., :2, :] = 1
    assert bce_with_logits(torch.zeros(1, 1, 4, 4), target).item() == pytest.approx(math.log(2), abs=1e-7)


def test_bce_matches_definition_oracle():
    g = torch.Generator().manual_seed(0)
    logits = 4 * torch.randn(2, 1, 5, 5, generator=g, dtype=torch.float64)
    target = (torch.rand(2, 1, 5, 5, generator=g) > 0.5).double()
    assert bce_with_logits(logits, target).item() == pytest.approx(_bce_oracle(logits, target), abs=1e-12)


def test_bce_is_stable_for_huge_logits():
    logits = torch.tensor([[1e4, -1e4]])
    target = torch.tensor([[0.0, 1.0]])
    assert bce_with_logits(logits, target).item() == pytest.approx(1e4)


def test_saturated_correct_logits_give_tiny_loss():
    target = torch.zeros(1, 1, 8, 8)
    target[..., 2:6, 2:6] = 1
    logits = torch.where(target > 0, 40.0, -40.0).double()
    assert bce_dice_loss(logits, target.double()).item() < 1e-6


def test_empty_target_dice_term_vanishes():
    target = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
    logits = torch.full_like(target, -40.0)
    assert dice_loss(logits, target, smooth=1.0).item() == pytest.approx(0.0, abs=1e-15)


def test_dice_matches_formula():
    g = torch.Generator().manual_seed(1)
    logits = torch.randn(1, 1, 6, 6, generator=g, dtype=torch.float64)
    target = (torch.rand(1, 1, 6, 6, generator=g) > 0.4).double()
    p = torch.sigmoid(logits)
    expected = 1 - (2 * (p * target).sum() + 1) / (p.sum() + target.sum() + 1)
    assert dice_loss(logits, target).item() == pytest.approx(expected.item(), abs=1e-14)


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        bce_dice_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5))


def test_deep_supervision_degenerate_weights():
    g = torch.Generator().manual_seed(2)
    heads = [torch.randn(2, 1, 8, 8, generator=g) for _ in range(3)]
    target = (torch.rand(2, 1, 8, 8, generator=g) > 0.5).float()
    assert deep_supervision_loss(heads, target, (0, 0, 1)).item() == bce_dice_loss(heads[2], target).item()


def test_deep_supervision_identical_heads_triple():
    g = torch.Generator().manual_seed(3)
    head = torch.randn(1, 1, 8, 8, generator=g, dtype=torch.float64)
    target = (torch.rand(1, 1, 8, 8, generator=g) > 0.5).double()
    total = deep_supervision_loss([head, head, head], target)
    assert total.item() == pytest.approx(3 * bce_dice_loss(head, target).item(), rel=1e-14)


def test_deep_supervision_equals_hand_sum():
    g = torch.Generator().manual_seed(4)
    heads = [torch.randn(2, 1, 8, 8, generator=g, dtype=torch.float64) for _ in range(3)]
    target = (torch.rand(2, 1, 8, 8, generator=g) > 0.5).double()
    weights = (0.5, 1.0, 2.0)
    hand = 0.0
    for w, h in zip(weights, heads):
        per_sample = []
        for b in range(2):
            bce = _bce_oracle(h[b], target[b])
            p = torch.sigmoid(h[b])
            dice = 1 - (2 * (p * target[b]).sum().item() + 1) / (p.sum().item() + target[b].sum().item() + 1)
            per_sample.append((bce, dice))
        hand += w * (sum(b for b, _ in per_sample) / 2 + sum(d for _, d in per_sample) / 2)
    assert deep_supervision_loss(heads, target, weights).item() == pytest.approx(hand, rel=1e-12)


def test_loss_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(5)
    logits = torch.randn(2, 1, 8, 8, generator=g, dtype=torch.float64).requires_grad_()
    target = (torch.rand(2, 1, 8, 8, generator=g) > 0.5).double()
    errors = check_tensors(lambda: bce_dice_loss(logits, target), {"logits": logits}, max_entries=64)
    assert errors["logits"] < 1e-3


@settings(max_examples=60, deadline=None)
@given(
    arrays("float64", (1, 1, 4, 4), elements=st.floats(-50, 50)),
    arrays("bool", (1, 1, 4, 4)),
    st.floats(0.0, 5.0),
)
def test_loss_is_nonnegative_and_finite(logits, target, smooth):
    loss = bce_dice_loss(torch.from_numpy(logits), torch.from_numpy(target).double(), smooth)
    assert math.isfinite(loss.item()) and loss.item() >= 0


def test_hard_dice_conventions():
    empty = torch.zeros(2, 1, 4, 4)
    assert torch.equal(hard_dice(empty, empty), torch.ones(2, dtype=torch.float64))
    full = torch.ones(1, 1, 4, 4)
    assert hard_dice(full, full).item() == 1.0
    assert hard_dice(torch.zeros(1, 1, 4, 4), full).item() == 0.0


def test_small_step_does_not_increase_loss():
    config = ModelConfig.tiny()
    ok = 0
    for trial in range(100):
        torch.manual_seed(trial)
        model = MDNet(config).double().train()
        x = torch.randn(1, 3, 64, 64, dtype=torch.float64)
        y = (torch.rand(1, 1, 64, 64) > 0.6).double()
        opt = torch.optim.SGD(model.parameters(), lr=1e-5)
        before = deep_supervision_loss(model(x), y)
        opt.zero_grad()
        before.backward()
        opt.step()
        with torch.no_grad():
            after = deep_supervision_loss(model(x), y)
        ok += after.item() <= before.item()
    assert ok >= 95
