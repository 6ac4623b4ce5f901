import time

import pytest
import torch

from fdcheck import check_sample
from mdnet.blocks import DCBlock
from mdnet.config import ModelConfig
from mdnet.errors import ShapeError
from mdnet.losses import deep_supervision_loss
from mdnet.model import MDNet, SegOutputs, count_params_and_macs, measure, predict, profile

TINY = ModelConfig.tiny()

PUBLISHED_PARAMS = 72.33e6
PUBLISHED_MACS = 116.64e9


def test_full_preset_shapes_on_meta_device():
    with torch.device("meta"):
        model = MDNet(ModelConfig.full())
        feats = model.encoder(torch.empty(1, 3, 512, 512))
        outs = model.decode(feats)
    assert [tuple(f.shape[1:]) for f in feats] == [(64, 128, 128), (128, 64, 64), (320, 32, 32), (512, 16, 16)]
    assert all(tuple(o.shape) == (1, 1, 512, 512) for o in outs)


def test_tiny_forward_shapes_and_speed():
    model = MDNet(TINY).eval()
    tic = time.perf_counter()
    with torch.no_grad():
        out = model(torch.randn(1, 3, 256, 256))
    assert time.perf_counter() - tic < 5.0
    assert isinstance(out, SegOutputs)
    assert all(tuple(o.shape) == (1, 1, 256, 256) for o in out)


def test_rejects_non_multiple_of_32():
    with pytest.raises(ShapeError):
        MDNet(TINY)(torch.randn(1, 3, 96, 100))


def test_batch_equals_loop():
    model = MDNet(TINY).double().eval()
    x = torch.randn(3, 3, 64, 64, dtype=torch.float64)
    with torch.no_grad():
        batched = model(x)
        single = [model(x[i:i + 1]) for i in range(3)]
    for head in range(3):
        loop = torch.cat([s[head] for s in single])
        torch.testing.assert_close(batched[head], loop, rtol=1e-10, atol=1e-10)


def test_inference_is_deterministic():
    model = MDNet(TINY).eval()
    x = torch.randn(1, 3, 64, 64)
    with torch.no_grad():
        a, b = model(x), model(x)
    assert all(torch.equal(p, q) for p, q in zip(a, b))


def test_m1_ignores_deep_features():
    # batch statistics (training mode) so the perturbation is not damped by
    # untrained running statistics
    model = MDNet(TINY).train()
    with torch.no_grad():
        feats = model.encoder(torch.randn(2, 3, 64, 64))
        base = model.decode(feats)
        moved = feats[:2] + [f + torch.randn_like(f) for f in feats[2:]]
        out = model.decode(moved)
    assert torch.equal(out.m1, base.m1)
    assert not torch.equal(out.m3, base.m3)


def test_every_decoder1_tensor_receives_gradient():
    torch.manual_seed(1)
    model = MDNet(TINY)
    x = torch.randn(2, 3, 64, 64)
    target = (torch.rand(2, 1, 64, 64) > 0.7).float()
    deep_supervision_loss(model(x), target).backward()
    for name, p in model.decoder1.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name
    for head in ("decoder2", "decoder3"):
        assert getattr(model, head).head.conv.weight.grad.abs().sum() > 0


def test_heads_do_not_share_weights():
    model = MDNet(TINY)
    heads = [model.decoder1.head.conv, model.decoder2.head.conv, model.decoder3.head.conv]
    assert len({id(h.weight) for h in heads}) == 3


def test_end_to_end_gradients_on_random_parameter_sample():
    torch.manual_seed(0)
    model = MDNet(TINY)
    err = check_sample(model, (torch.randn(1, 3, 32, 32),), n=50)
    assert err < 1e-3


# ------------------------------------------------------------------- predict


class _ConstantModel(torch.nn.Module):
    def __init__(self, logit: float) -> None:
        super().__init__()
        self.logit = logit
        self.dummy = torch.nn.Parameter(torch.zeros(()))

    def forward(self, x):
        z = torch.full((x.shape[0], 1, *x.shape[-2:]), self.logit)
        return SegOutputs(z, z, z)


def test_predict_saturated_logits_give_full_mask():
    mask, probs = predict(_ConstantModel(10.0), torch.zeros(3, 32, 32))
    assert mask.shape == (1, 32, 32) and bool(mask.all())
    assert len(probs) == 3


def test_predict_threshold_is_strict():
    mask, _ = predict(_ConstantModel(0.0), torch.zeros(1, 3, 32, 32), threshold=0.5)
    assert not mask.any()


def test_predict_lower_threshold_includes_pixel():
    logit = torch.logit(torch.tensor(0.3)).item()
    mask, _ = predict(_ConstantModel(logit), torch.zeros(3, 32, 32), threshold=0.25)
    assert mask.all()


@pytest.mark.parametrize("threshold", [0.0, 1.0, -0.1])
def test_predict_threshold_range(threshold):
    with pytest.raises(ValueError):
        predict(_ConstantModel(0.0), torch.zeros(3, 32, 32), threshold=threshold)


def test_predict_restores_training_mode():
    model = MDNet(TINY).train()
    predict(model, torch.randn(3, 32, 32))
    assert model.training


# ------------------------------------------------------------------- counting


def test_measure_single_conv_closed_form():
    params, macs = measure(torch.nn.Conv2d(4, 8, 3, padding=1), torch.zeros(1, 4, 16, 16))
    assert params == 4 * 8 * 9 + 8 == 296
    assert macs == 16 * 16 * 8 * 4 * 9


def test_measure_linear_and_transpose_closed_form():
    _, macs = measure(torch.nn.Linear(5, 7), torch.zeros(1, 11, 5))
    assert macs == 11 * 7 * 5
    _, macs = measure(torch.nn.ConvTranspose2d(6, 3, 2, stride=2), torch.zeros(1, 6, 4, 4))
    assert macs == 4 * 4 * 6 * 3 * 4


def test_dc_block_macs_closed_form():
    block = DCBlock(4, 4, cbam_reduction=2)
    _, macs = measure(block, torch.zeros(1, 4, 8, 8))
    hw = 64
    branches = 4 * hw * 4 * 4 * 9
    fuse = hw * 4 * 16
    channel_mlp = 2 * (4 * 2 + 2 * 4)  # shared MLP on avg and max vectors
    spatial = hw * 2 * 49
    assert macs == branches + fuse + channel_mlp + spatial


def test_tiny_param_count_equals_registry_walk():
    model = MDNet(TINY)
    walk = 0
    for _, p in model.named_parameters():
        n = 1
        for d in p.shape:
            n *= d
        walk += n
    params, _ = count_params_and_macs(TINY, (3, 256, 256))
    assert params == walk


def test_profile_table_sums_to_totals_and_traces_strides():
    report = profile(TINY, (3, 256, 256))
    assert sum(v["params"] for v in report["modules"].values()) == report["params"]
    assert sum(v["macs"] for v in report["modules"].values()) == report["macs"]
    assert [t["stride"] for t in report["trace"][:4]] == [4, 8, 16, 32]


def test_full_preset_counts_within_band():
    params, macs = count_params_and_macs(ModelConfig.full(), (3, 512, 512))
    assert abs(params / PUBLISHED_PARAMS - 1) <= 0.20
    assert abs(macs / PUBLISHED_MACS - 1) <= 0.20
