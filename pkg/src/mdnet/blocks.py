"""Convolutional building blocks: DC block with CBAM, mask attention, residual and decoder blocks.

All blocks take and return NCHW tensors. Apart from :class:`DecoderBlock`, which
doubles the spatial size, every block preserves height and width.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from mdnet.config import DILATION_RATES
from mdnet.errors import ConfigError, ShapeError


def effective_kernel(kernel: int, dilation: int) -> int:
    """Receptive field of a single dilated convolution along one axis."""
    return kernel + (kernel - 1) * (dilation - 1)


class ConvBNReLU(nn.Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int = 3,
        dilation: int = 1,
        relu: bool = True,
        bn_momentum: float = 0.1,
        bn_eps: float = 1e-5,
    ) -> None:
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd, got {kernel}")
        self.in_channels = in_channels
        self.conv = nn.Conv2d(
            in_channels,
            out_channels,
            kernel,
            padding=dilation * (kernel - 1) // 2,
            dilation=dilation,
        )
        self.bn = nn.BatchNorm2d(out_channels, eps=bn_eps, momentum=bn_momentum)
        self.relu = relu

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ConfigError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        x = self.bn(self.conv(x))
        return F.relu(x) if self.relu else x


def conv_series(in_channels: int, out_channels: int, length: int, **bn) -> nn.Sequential:
    """``length`` stacked 3x3 Conv-BN-ReLU layers, the first one changing width."""
    layers = [ConvBNReLU(in_channels, out_channels, **bn)]
    layers += [ConvBNReLU(out_channels, out_channels, **bn) for _ in range(length - 1)]
    return nn.Sequential(*layers)


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 16) -> None:
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(),
            nn.Conv2d(hidden, channels, 1),
        )

    def gates(self, x: torch.Tensor) -> torch.Tensor:
        avg = F.adaptive_avg_pool2d(x, 1)
        mx = F.adaptive_max_pool2d(x, 1)
        return torch.sigmoid(self.mlp(avg) + self.mlp(mx))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gates(x)


class SpatialAttention(nn.Module):
    def __init__(self, kernel: int = 7) -> None:
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel, padding=kernel // 2)

    def gates(self, x: torch.Tensor) -> torch.Tensor:
        stacked = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(stacked))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gates(x)


class CBAM(nn.Module):
    """Channel attention followed by spatial attention."""

    def __init__(self, channels: int, reduction: int = 16) -> None:
        super().__init__()
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.spatial(self.channel(x))


class DCBlock(nn.Module):
    """Four parallel dilated 3x3 Conv-BN-ReLU branches, 1x1 fusion, then CBAM.

    Args:
        in_channels: channels of the incoming feature map.
        out_channels: width of every branch and of the fused output.
        rates: dilation rate per branch.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rates: tuple[int, ...] = DILATION_RATES,
        cbam_reduction: int = 16,
        **bn,
    ) -> None:
        super().__init__()
        self.branches = nn.ModuleList(
            ConvBNReLU(in_channels, out_channels, 3, dilation=r, **bn) for r in rates
        )
        self.fuse = ConvBNReLU(out_channels * len(rates), out_channels, kernel=1, **bn)
        self.cbam = CBAM(out_channels, cbam_reduction)

    def concat(self, x: torch.Tensor) -> torch.Tensor:
        return torch.cat([branch(x) for branch in self.branches], dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.cbam(self.fuse(self.concat(x)))


class MaskAttention(nn.Module):
    """Foreground/background gating of a feature map by the previous decoder's mask.

    The mask arrives as logits at any resolution; it is bilinearly resized to the
    feature map, then passed through a sigmoid to give the foreground map ``m_f``
    and background map ``m_b = 1 - m_f``::

        fg  = convs(x * m_f) + m_f
        bg  = convs(x * m_b) + m_f      # + m_b when bg_add == "bg"
        out = relu(fuse(cat(fg, bg)) + proj(x))

    ``fuse`` ends in Conv-BN without activation and ``proj`` is a 3x3 Conv-BN, so
    the final ReLU acts on the residual sum.
    """

    def __init__(
        self,
        channels: int,
        series_len: int = 2,
        bg_add: str = "fg",
        **bn,
    ) -> None:
        super().__init__()
        if bg_add not in ("fg", "bg"):
            raise ConfigError(f"bg_add must be 'fg' or 'bg', got {bg_add!r}")
        self.bg_add = bg_add
        self.fg_convs = conv_series(channels, channels, series_len, **bn)
        self.bg_convs = conv_series(channels, channels, series_len, **bn)
        fuse = [ConvBNReLU(2 * channels, channels, **bn)]
        fuse += [ConvBNReLU(channels, channels, **bn) for _ in range(series_len - 1)]
        fuse[-1].relu = False
        self.fuse = nn.Sequential(*fuse)
        self.proj = ConvBNReLU(channels, channels, relu=False, **bn)

    def forward(self, x: torch.Tensor, mask_logits: torch.Tensor) -> torch.Tensor:
        if mask_logits.shape[1] != 1:
            raise ConfigError(f"mask must have exactly one channel, got {mask_logits.shape[1]}")
        if mask_logits.shape[-2:] != x.shape[-2:]:
            mask_logits = F.interpolate(mask_logits, size=x.shape[-2:], mode="bilinear", align_corners=False)
        m_f = torch.sigmoid(mask_logits)
        m_b = 1.0 - m_f
        fg = self.fg_convs(x * m_f) + m_f
        bg = self.bg_convs(x * m_b) + (m_f if self.bg_add == "fg" else m_b)
        return F.relu(self.fuse(torch.cat([fg, bg], dim=1)) + self.proj(x))


class ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, **bn) -> None:
        super().__init__()
        self.conv1 = ConvBNReLU(in_channels, out_channels, **bn)
        self.conv2 = ConvBNReLU(out_channels, out_channels, relu=False, **bn)
        if in_channels == out_channels:
            self.shortcut = nn.Identity()
        else:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1),
                nn.BatchNorm2d(out_channels, eps=bn.get("bn_eps", 1e-5), momentum=bn.get("bn_momentum", 0.1)),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.conv2(self.conv1(x)) + self.shortcut(x))


class DecoderBlock(nn.Module):
    """2x2 stride-2 transpose convolution, concatenation with the skip, two residual blocks."""

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int, **bn) -> None:
        super().__init__()
        self.up = nn.ConvTranspose2d(in_channels, out_channels, kernel_size=2, stride=2)
        self.res1 = ResidualBlock(out_channels + skip_channels, out_channels, **bn)
        self.res2 = ResidualBlock(out_channels, out_channels, **bn)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        if skip.shape[-2] != 2 * x.shape[-2] or skip.shape[-1] != 2 * x.shape[-1]:
            raise ShapeError(
                f"skip spatial dims must be exactly double the input: "
                f"input {tuple(x.shape)}, skip {tuple(skip.shape)}"
            )
        x = self.up(x)
        return self.res2(self.res1(torch.cat([x, skip], dim=1)))
