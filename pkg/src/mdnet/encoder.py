"""Hierarchical Mix-Transformer encoder.

Four stages of overlapped patch embedding followed by transformer layers with
spatially-reduced self-attention and a depthwise-convolution MLP. Parameter
names follow the public MiT checkpoints (``patch_embed1.proj.weight``,
``block1.0.attn.q.weight``, ...) so converted weights can be imported directly.
"""

from __future__ import annotations

import math
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from mdnet.config import FEATURE_STRIDES, EncoderConfig
from mdnet.errors import ImportWeightsError, ShapeError


def check_input_size(h: int, w: int, multiple: int = 32) -> None:
    if h % multiple or w % multiple:
        raise ShapeError(f"input height and width must be multiples of {multiple}, got {h}x{w}")


class OverlapPatchEmbed(nn.Module):
    def __init__(self, in_channels: int, embed_dim: int, patch_size: int, stride: int) -> None:
        super().__init__()
        self.proj = nn.Conv2d(in_channels, embed_dim, patch_size, stride=stride, padding=patch_size // 2)
        self.norm = nn.LayerNorm(embed_dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, int, int]:
        x = self.proj(x)
        _, _, h, w = x.shape
        x = x.flatten(2).transpose(1, 2)
        return self.norm(x), h, w


class EfficientSelfAttention(nn.Module):
    """Multi-head self-attention whose keys/values come from a strided-conv reduced grid."""

    def __init__(self, dim: int, num_heads: int, sr_ratio: int = 1) -> None:
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        self.sr_ratio = sr_ratio
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, sr_ratio, stride=sr_ratio)
            self.norm = nn.LayerNorm(dim)

    def reduce(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        if self.sr_ratio == 1:
            return x
        b, n, c = x.shape
        grid = x.transpose(1, 2).reshape(b, c, h, w)
        return self.norm(self.sr(grid).flatten(2).transpose(1, 2))

    def attention(self, x: torch.Tensor, h: int, w: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (output before projection, attention weights [B, heads, N, N_kv])."""
        b, n, c = x.shape
        d = c // self.num_heads
        q = self.q(x).reshape(b, n, self.num_heads, d).transpose(1, 2)
        kv = self.kv(self.reduce(x, h, w)).reshape(b, -1, 2, self.num_heads, d).permute(2, 0, 3, 1, 4)
        k, v = kv[0], kv[1]
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return out, attn

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        return self.proj(self.attention(x, h, w)[0])


class MixFFN(nn.Module):
    def __init__(self, dim: int, hidden: int) -> None:
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.dwconv = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        x = self.fc1(x)
        b, n, c = x.shape
        x = self.dwconv(x.transpose(1, 2).reshape(b, c, h, w)).flatten(2).transpose(1, 2)
        return self.fc2(F.gelu(x))


class TransformerLayer(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float, sr_ratio: int) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = EfficientSelfAttention(dim, num_heads, sr_ratio)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MixFFN(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), h, w)
        return x + self.mlp(self.norm2(x), h, w)


class MixTransformer(nn.Module):
    """Four-stage encoder returning features at strides 4, 8, 16 and 32."""

    def __init__(self, config: EncoderConfig | None = None, in_channels: int = 3) -> None:
        super().__init__()
        self.config = config = config or EncoderConfig()
        prev = in_channels
        for i in range(4):
            patch, stride = (7, 4) if i == 0 else (3, 2)
            width = config.stage_widths[i]
            setattr(self, f"patch_embed{i + 1}", OverlapPatchEmbed(prev, width, patch, stride))
            layers = nn.ModuleList(
                TransformerLayer(width, config.attention_heads[i], config.mlp_ratio, config.spatial_reduction[i])
                for _ in range(config.stage_depths[i])
            )
            setattr(self, f"block{i + 1}", layers)
            setattr(self, f"norm{i + 1}", nn.LayerNorm(width))
            prev = width
        self.apply(_init_weights)

    def stage(self, i: int, x: torch.Tensor) -> torch.Tensor:
        """Run stage ``i`` (0-based) on an NCHW map and return an NCHW map."""
        tokens, h, w = getattr(self, f"patch_embed{i + 1}")(x)
        for layer in getattr(self, f"block{i + 1}"):
            tokens = layer(tokens, h, w)
        tokens = getattr(self, f"norm{i + 1}")(tokens)
        return tokens.transpose(1, 2).reshape(x.shape[0], -1, h, w)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        check_input_size(x.shape[-2], x.shape[-1])
        features = []
        for i in range(4):
            x = self.stage(i, x)
            features.append(x)
        return features

    def feature_shapes(self, h: int, w: int) -> list[tuple[int, int, int]]:
        check_input_size(h, w)
        return [(c, h // s, w // s) for c, s in zip(self.config.stage_widths, FEATURE_STRIDES)]


def _init_weights(m: nn.Module) -> None:
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.Conv2d):
        fan_out = m.kernel_size[0] * m.kernel_size[1] * m.out_channels // m.groups
        nn.init.normal_(m.weight, 0.0, math.sqrt(2.0 / fan_out))
        if m.bias is not None:
            nn.init.zeros_(m.bias)


def import_weights(encoder: MixTransformer, archive_path: str | Path, prefix: str = "") -> dict:
    """Load encoder tensors from a checkpoint archive into ``encoder``.

    ``prefix`` is stripped from archive names first, so a full-model checkpoint
    can be used with ``prefix="encoder."``. Any missing tensor, unexpected
    tensor or shape mismatch raises :class:`ImportWeightsError` listing every
    offending name. Returns the archive metadata.
    """
    from mdnet.checkpoint import load_archive

    tensors, meta = load_archive(archive_path)
    if prefix:
        tensors = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    own = encoder.state_dict()
    missing = sorted(set(own) - set(tensors))
    extra = sorted(set(tensors) - set(own))
    mismatched = sorted(
        f"{name} (archive {tuple(tensors[name].shape)} vs model {tuple(own[name].shape)})"
        for name in set(own) & set(tensors)
        if tuple(tensors[name].shape) != tuple(own[name].shape)
    )
    problems = []
    if missing:
        problems.append("missing: " + ", ".join(missing))
    if extra:
        problems.append("unexpected: " + ", ".join(extra))
    if mismatched:
        problems.append("shape mismatch: " + ", ".join(mismatched))
    if problems:
        raise ImportWeightsError("; ".join(problems))
    with torch.no_grad():
        for name, value in own.items():
            value.copy_(tensors[name].to(value.dtype))
    return meta
