import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fdcheck import check_module
from mdnet.config import ModelConfig
from mdnet.encoder import MixTransformer
from mdnet.errors import ShapeError
from mdnet.msfed import MSFED, pool_to

TINY = ModelConfig.tiny()


def _features(config, size, batch=1):
    return [torch.randn(batch, c, size // s, size // s) for c, s in zip(config.widths, (4, 8, 16, 32))]


def test_full_preset_shapes_and_pre_concat_width():
    config = ModelConfig.full()
    with torch.device("meta"):
        msfed = MSFED(config)
        seen = {}
        msfed.blocks[0].fuse.register_forward_hook(lambda m, i, o: seen.update(shape=i[0].shape))
        out = msfed(_features(config, 512))
    assert [tuple(p.shape[1:]) for p in out] == [(64, 128, 128), (128, 64, 64), (320, 32, 32), (512, 16, 16)]
    assert seen["shape"][1] == 128 + 128 == 256


def test_tiny_preset_shapes_preserve_encoder_shapes():
    feats = MixTransformer(TINY.encoder)(torch.randn(1, 3, 256, 256))
    out = MSFED(TINY)(feats)
    assert [p.shape for p in out] == [f.shape for f in feats]
    assert tuple(out[0].shape[1:]) == (8, 64, 64)
    assert tuple(out[3].shape[1:]) == (32, 8, 8)


def test_block4_concatenates_three_branches_and_feature():
    msfed = MSFED(TINY)
    assert len(msfed.blocks[2].branches) == 3
    seen = {}
    msfed.blocks[2].fuse.register_forward_hook(lambda m, i, o: seen.update(shape=i[0].shape))
    msfed(_features(TINY, 64))
    assert seen["shape"][1] == 4 * TINY.widths[3]


@pytest.mark.parametrize("reuse", ["pre_dc", "post_dc"])
def test_cascade_is_a_dag(reuse):
    config = ModelConfig.tiny()
    config.msfed_reuse = reuse
    msfed = MSFED(config).eval()
    feats = _features(config, 64)
    base = msfed(feats)
    for k in range(4):
        perturbed = [f.clone() for f in feats]
        perturbed[k] += torch.randn_like(perturbed[k])
        out = msfed(perturbed)
        for i in range(k):
            assert torch.equal(out[i], base[i]), (k, i)
        assert not torch.equal(out[k], base[k])


def test_reuse_modes_differ():
    torch.manual_seed(3)
    a = MSFED(ModelConfig.tiny()).eval()
    config = ModelConfig.tiny()
    config.msfed_reuse = "post_dc"
    b = MSFED(config).eval()
    b.load_state_dict(a.state_dict())
    feats = _features(config, 64)
    pa, pb = a(feats), b(feats)
    assert torch.equal(pa[1], pb[1])
    assert not torch.equal(pa[2], pb[2])


def test_pool_to_constant_map_halves():
    x = torch.full((1, 2, 8, 8), 3.25)
    assert torch.equal(pool_to(x, (4, 4)), torch.full((1, 2, 4, 4), 3.25))
    assert pool_to(x, (1, 1)).shape[-2:] == (1, 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 3), st.integers(1, 4))
def test_pool_to_equals_single_max_pool_of_matching_window(steps, base):
    x = torch.randn(1, 1, base * 2**steps, base * 2**steps)
    window = 2**steps
    expected = torch.nn.functional.max_pool2d(x, window) if window > 1 else x
    assert torch.equal(pool_to(x, (base, base)), expected)


def test_pool_to_unreachable_size():
    with pytest.raises(ShapeError):
        pool_to(torch.randn(1, 1, 12, 12), (5, 5))


def test_msfed_gradients_match_finite_differences():
    class Wrap(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.msfed = MSFED(TINY)

        def forward(self, f1, f2, f3, f4):
            return tuple(self.msfed([f1, f2, f3, f4]))

    errors = check_module(Wrap(), tuple(_features(TINY, 64)), max_entries=3)
    assert max(errors.values()) < 1e-3, {k: v for k, v in errors.items() if v >= 1e-3}
