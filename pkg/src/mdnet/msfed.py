"""Multi-scale feature enhancement cascade over the four encoder scales.

Scale 1 goes straight through a DC block. Every coarser scale ``k`` gathers the
features already fused at the finer scales. Each one is max-pooled down to twice
the resolution of scale ``k``, run through its own Conv-BN-ReLU series and
pooled once more by 2x2, so the series always operates one octave above the
target. The pooled branches are concatenated with the encoder feature ``F_k``,
fused by another series and refined by a DC block.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from mdnet.blocks import DCBlock, conv_series
from mdnet.config import ModelConfig
from mdnet.errors import ShapeError


def pool_to(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Repeated 2x2 max-pooling until the spatial size equals ``size``."""
    while tuple(x.shape[-2:]) != tuple(size):
        h, w = x.shape[-2:]
        if h < 2 * size[0] or w < 2 * size[1] or h % 2 or w % 2:
            raise ShapeError(f"cannot reach {tuple(size)} from {(h, w)} by 2x2 max-pooling")
        x = F.max_pool2d(x, 2)
    return x


class MSFEDBlock(nn.Module):
    """Fuse finer-scale features with the encoder feature at one coarser scale.

    Args:
        lower_channels: channel counts of the finer-scale inputs, finest first.
        channels: channel count of the encoder feature at this scale; also the
            width of every branch and of the output.
    """

    def __init__(self, lower_channels: list[int], channels: int, config: ModelConfig) -> None:
        super().__init__()
        bn = dict(bn_momentum=config.bn_momentum, bn_eps=config.bn_eps)
        self.branches = nn.ModuleList(
            conv_series(c, channels, config.series_len, **bn) for c in lower_channels
        )
        self.fuse = conv_series(channels * (len(lower_channels) + 1), channels, config.series_len, **bn)
        self.dc = DCBlock(channels, channels, cbam_reduction=config.cbam_reduction, **bn)

    def fused(self, lower: list[torch.Tensor], feature: torch.Tensor) -> torch.Tensor:
        """Representation just before the DC block."""
        size = feature.shape[-2:]
        pooled = [
            F.max_pool2d(branch(pool_to(x, (2 * size[0], 2 * size[1]))), 2)
            for branch, x in zip(self.branches, lower)
        ]
        return self.fuse(torch.cat(pooled + [feature], dim=1))

    def forward(self, lower: list[torch.Tensor], feature: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        fused = self.fused(lower, feature)
        return self.dc(fused), fused


class MSFED(nn.Module):
    """Turn encoder features F1..F4 into processed features P1..P4 (same shapes)."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        c = config.widths
        self.reuse = config.msfed_reuse
        self.dc1 = DCBlock(
            c[0], c[0], cbam_reduction=config.cbam_reduction,
            bn_momentum=config.bn_momentum, bn_eps=config.bn_eps,
        )
        self.blocks = nn.ModuleList(MSFEDBlock(list(c[:k]), c[k], config) for k in range(1, 4))

    def forward(self, features: list[torch.Tensor]) -> list[torch.Tensor]:
        p1 = self.dc1(features[0])
        processed = [p1]
        carried = [p1]
        for block, feature in zip(self.blocks, features[1:]):
            out, fused = block(carried, feature)
            processed.append(out)
            carried.append(fused if self.reuse == "pre_dc" else out)
        return processed
