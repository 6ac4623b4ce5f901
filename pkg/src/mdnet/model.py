"""MDNet assembly: encoder, MSFED cascade and three progressively deeper decoders."""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from mdnet.blocks import DecoderBlock, MaskAttention
from mdnet.config import FEATURE_STRIDES, ModelConfig
from mdnet.encoder import EfficientSelfAttention, MixTransformer, check_input_size
from mdnet.msfed import MSFED


class SegOutputs(NamedTuple):
    """Pre-sigmoid logits of the three decoder heads, each [B, 1, H, W]."""

    m1: torch.Tensor
    m2: torch.Tensor
    m3: torch.Tensor


class Head(nn.Module):
    def __init__(self, channels: int, scale: int = 4) -> None:
        super().__init__()
        self.scale = scale
        self.conv = nn.Conv2d(channels, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=self.scale, mode="bilinear", align_corners=False)
        return self.conv(x)


class Decoder(nn.Module):
    """``depth`` decoder blocks, each optionally followed by mask attention, and a head.

    Block ``j`` upsamples from stride ``2**(depth - j + 2)`` towards stride 4.
    ``skip_channels[j]`` is the total width of everything concatenated as skip
    at that stride (processed feature plus earlier decoders' features).
    """

    def __init__(
        self,
        in_channels: int,
        skip_channels: list[int],
        out_channels: list[int],
        config: ModelConfig,
        mask_attention: bool,
    ) -> None:
        super().__init__()
        bn = dict(bn_momentum=config.bn_momentum, bn_eps=config.bn_eps)
        self.blocks = nn.ModuleList()
        self.attention = nn.ModuleList()
        prev = in_channels
        for skip, out in zip(skip_channels, out_channels):
            self.blocks.append(DecoderBlock(prev, skip, out, **bn))
            if mask_attention:
                self.attention.append(MaskAttention(out, config.series_len, config.ma_bg_add, **bn))
            prev = out
        self.head = Head(prev)

    def forward(
        self,
        x: torch.Tensor,
        skips: list[torch.Tensor],
        mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Return (logits, per-stride features from coarsest to stride 4)."""
        stages = []
        for j, (block, skip) in enumerate(zip(self.blocks, skips)):
            x = block(x, skip)
            if len(self.attention):
                x = self.attention[j](x, mask)
            stages.append(x)
        return self.head(x), stages


class MDNet(nn.Module):
    def __init__(self, config: ModelConfig | None = None) -> None:
        super().__init__()
        self.config = config = config or ModelConfig()
        c1, c2, c3, c4 = config.widths
        self.encoder = MixTransformer(config.encoder)
        self.msfed = MSFED(config)
        self.decoder1 = Decoder(c2, [c1], [c1], config, mask_attention=False)
        self.decoder2 = Decoder(c3, [c2, 2 * c1], [c2, c1], config, mask_attention=True)
        self.decoder3 = Decoder(c4, [c3, 2 * c2, 3 * c1], [c3, c2, c1], config, mask_attention=True)
        self._init_weights()

    def _init_weights(self) -> None:
        # Small truncated-normal convs (as in the encoder). Under batch norm this
        # makes Adam's fixed-size steps relatively larger, which speeds up fitting.
        # The output heads keep PyTorch's default init.
        for name, module in self.named_modules():
            if name.startswith("encoder") or name.endswith("head.conv"):
                continue
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.trunc_normal_(module.weight, std=0.02)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)

    def decode(self, features: list[torch.Tensor]) -> SegOutputs:
        p1, p2, p3, p4 = self.msfed(features)
        m1, (d1,) = self.decoder1(p2, [p1])
        m2, (d2_8, d2_4) = self.decoder2(p3, [p2, torch.cat([p1, d1], dim=1)], m1)
        m3, _ = self.decoder3(
            p4,
            [p3, torch.cat([p2, d2_8], dim=1), torch.cat([p1, d1, d2_4], dim=1)],
            m2,
        )
        return SegOutputs(m1, m2, m3)

    def forward(self, image: torch.Tensor) -> SegOutputs:
        check_input_size(image.shape[-2], image.shape[-1])
        return self.decode(self.encoder(image))


@torch.no_grad()
def predict(model: MDNet, image: torch.Tensor, threshold: float = 0.5) -> tuple[torch.Tensor, SegOutputs]:
    """Binary mask from the final head plus per-head probability maps.

    A pixel is foreground when its probability is strictly greater than
    ``threshold``.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    squeeze = image.dim() == 3
    if squeeze:
        image = image.unsqueeze(0)
    was_training = model.training
    model.eval()
    try:
        logits = model(image)
    finally:
        model.train(was_training)
    probs = SegOutputs(*(torch.sigmoid(m) for m in logits))
    mask = (probs.m3 > threshold).to(torch.uint8)
    if squeeze:
        mask = mask[0]
        probs = SegOutputs(*(p[0] for p in probs))
    return mask, probs


def _layer_macs(m: nn.Module, inp: torch.Tensor, out: torch.Tensor) -> int:
    """Multiply-accumulates of one conv/transpose-conv/linear call (batch element 0)."""
    if isinstance(m, nn.ConvTranspose2d):
        k = m.kernel_size[0] * m.kernel_size[1]
        return inp[0].numel() * m.out_channels * k // m.groups
    if isinstance(m, nn.Conv2d):
        k = m.kernel_size[0] * m.kernel_size[1]
        return out[0].numel() * (m.in_channels // m.groups) * k
    if isinstance(m, nn.Linear):
        return out[0].numel() * m.in_features
    return 0


class MacCounter:
    """Forward hooks accumulating MACs per top-level child of a module.

    Counts every convolution, transpose convolution and linear layer, plus the
    two attention matrix products (QK^T and AV) of each encoder layer. Norms,
    activations, pooling and resizing are not counted.
    """

    def __init__(self, module: nn.Module) -> None:
        self.macs: dict[str, int] = {}
        self._hooks = []
        for name, sub in module.named_modules():
            if isinstance(sub, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                self._hooks.append(sub.register_forward_hook(self._layer_hook(name)))
            elif isinstance(sub, EfficientSelfAttention):
                self._hooks.append(sub.register_forward_hook(self._attention_hook(name)))

    def _add(self, name: str, macs: int) -> None:
        key = name.split(".")[0]
        self.macs[key] = self.macs.get(key, 0) + macs

    def _layer_hook(self, name: str):
        def hook(m, inp, out):
            self._add(name, _layer_macs(m, inp[0], out))
        return hook

    def _attention_hook(self, name: str):
        def hook(m, inp, out):
            x, h, w = inp
            n_kv = (h // m.sr_ratio) * (w // m.sr_ratio)
            self._add(name, 2 * x.shape[1] * n_kv * x.shape[2])
        return hook

    def __enter__(self) -> MacCounter:
        return self

    def __exit__(self, *exc) -> None:
        for hook in self._hooks:
            hook.remove()

    @property
    def total(self) -> int:
        return sum(self.macs.values())


def measure(module: nn.Module, *inputs: torch.Tensor) -> tuple[int, int]:
    """(learnable scalar count, MACs for one forward call on batch element 0)."""
    with MacCounter(module) as counter, torch.no_grad():
        module(*inputs)
    return sum(p.numel() for p in module.parameters()), counter.total


def profile(config: ModelConfig, input_shape: tuple[int, int, int] = (3, 512, 512)) -> dict:
    """Per-module parameter and MAC counts plus a feature-shape trace.

    Runs the network on the ``meta`` device, so only shapes are computed.
    """
    _, h, w = input_shape
    check_input_size(h, w)
    with torch.device("meta"):
        model = MDNet(config)
    model.eval()
    with MacCounter(model) as counter:
        features = model.encoder(torch.empty((1, *input_shape), device="meta"))
        model.decode(features)

    table = {name: {"params": 0, "macs": counter.macs.get(name, 0)} for name, _ in model.named_children()}
    for name, p in model.named_parameters():
        table[name.split(".")[0]]["params"] += p.numel()
    trace = [
        {"name": f"F{i + 1}", "stride": s, "shape": list(f.shape[1:])}
        for i, (f, s) in enumerate(zip(features, FEATURE_STRIDES))
    ]
    trace.append({"name": "M1/M2/M3", "stride": 1, "shape": [1, h, w]})
    return {
        "input_shape": list(input_shape),
        "modules": table,
        "params": sum(v["params"] for v in table.values()),
        "macs": sum(v["macs"] for v in table.values()),
        "trace": trace,
    }


def count_params_and_macs(config: ModelConfig, input_shape: tuple[int, int, int] = (3, 512, 512)) -> tuple[int, int]:
    report = profile(config, input_shape)
    return report["params"], report["macs"]
