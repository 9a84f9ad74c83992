"""A small conditional U-Net noise predictor for pixel-space inpainting.

Input is the channel concatenation [noisy latent (3) | mask (1) | masked
target (3)]; conditioning enters through one cross-attention block per
resolution that attends over the (rows, 768) context matrix. Timesteps feed
in as sinusoidal embeddings applied as per-channel scale/shift, so the
network can rescale features as the noise level changes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn


@dataclass
class DenoiserConfig:
    in_channels: int = 7
    out_channels: int = 3
    base_width: int = 48
    channel_mults: tuple[int, ...] = (1, 2)
    context_dim: int = 768
    # Inner width of the attention projections; None means the level width.
    attn_dim: int | None = None

    def widths(self) -> list[int]:
        return [self.base_width * m for m in self.channel_mults]


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(channels, 8), channels)


class SinusoidalTimeEmbedding(nn.Module):
    """Standard sin/cos position encoding over integer timesteps."""

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2 != 0:
            raise ValueError("time embedding dimension must be even")
        self.dim = dim

    def forward(self, t: Tensor) -> Tensor:
        half = self.dim // 2
        device = t.device
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, device=device) / max(half - 1, 1)
        )
        args = t.float().unsqueeze(-1) * freqs
        return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, 2 * out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(nn.functional.silu(self.norm1(x)))
        scale, shift = self.time_proj(nn.functional.silu(temb)).chunk(2, dim=-1)
        h = self.norm2(h) * (1 + scale[:, :, None, None]) + shift[:, :, None, None]
        h = self.conv2(nn.functional.silu(h))
        return h + self.skip(x)


class CrossAttentionBlock(nn.Module):
    """Single-head attention from spatial positions onto the context rows."""

    def __init__(self, channels: int, context_dim: int, attn_dim: int | None = None):
        super().__init__()
        inner = attn_dim or channels
        self.scale = inner**-0.5
        self.norm = _norm(channels)
        self.to_q = nn.Linear(channels, inner, bias=False)
        self.to_k = nn.Linear(context_dim, inner, bias=False)
        self.to_v = nn.Linear(context_dim, inner, bias=False)
        self.to_out = nn.Linear(inner, channels)

    def forward(self, x: Tensor, context: Tensor) -> Tensor:
        b, c, h, w = x.shape
        flat = self.norm(x).reshape(b, c, h * w).transpose(1, 2)  # (B, HW, C)
        q = self.to_q(flat)
        k = self.to_k(context)
        v = self.to_v(context)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        out = self.to_out(attn @ v)  # (B, HW, C)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(nn.functional.interpolate(x, scale_factor=2, mode="nearest"))


class CondUNet(nn.Module):
    """Encoder/decoder noise predictor with cross-attention conditioning."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        widths = config.widths()
        time_dim = 4 * config.base_width
        self.time_embed = SinusoidalTimeEmbedding(config.base_width)
        self.time_mlp = nn.Sequential(
            nn.Linear(config.base_width, time_dim),
            nn.SiLU(),
            nn.Linear(time_dim, time_dim),
        )
        self.stem = nn.Conv2d(config.in_channels, widths[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.down_attns = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        ch = widths[0]
        for i, width in enumerate(widths):
            self.down_blocks.append(ResidualBlock(ch, width, time_dim))
            self.down_attns.append(
                CrossAttentionBlock(width, config.context_dim, config.attn_dim)
            )
            ch = width
            if i < len(widths) - 1:
                self.downsamples.append(Downsample(ch))

        self.mid_block1 = ResidualBlock(ch, ch, time_dim)
        self.mid_attn = CrossAttentionBlock(ch, config.context_dim, config.attn_dim)
        self.mid_block2 = ResidualBlock(ch, ch, time_dim)

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(len(widths))):
            self.up_blocks.append(ResidualBlock(ch + widths[i], widths[i], time_dim))
            ch = widths[i]
            if i > 0:
                self.upsamples.append(Upsample(ch))

        self.out_norm = _norm(ch)
        self.out_conv = nn.Conv2d(ch, config.out_channels, 3, padding=1)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, x: Tensor, t: Tensor, context: Tensor) -> Tensor:
        """x: (B, 7, H, W); t: (B,) integer timesteps; context: (B, rows, 768)."""
        temb = self.time_mlp(self.time_embed(t).to(x.dtype))
        h = self.stem(x)
        skips = []
        for i, (block, attn) in enumerate(zip(self.down_blocks, self.down_attns)):
            h = attn(block(h, temb), context)
            skips.append(h)
            if i < len(self.downsamples):
                h = self.downsamples[i](h)

        h = self.mid_block2(self.mid_attn(self.mid_block1(h, temb), context), temb)

        for j, block in enumerate(self.up_blocks):
            h = block(torch.cat([h, skips[-1 - j]], dim=1), temb)
            if j < len(self.upsamples):
                h = self.upsamples[j](h)

        return self.out_conv(nn.functional.silu(self.out_norm(h)))


def tiny_denoiser_config() -> DenoiserConfig:
    """Sub-10k-parameter configuration used by the finite-difference checks."""
    return DenoiserConfig(base_width=4, channel_mults=(1,), attn_dim=2)
