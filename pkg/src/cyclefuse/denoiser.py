"""U-Net noise predictor conditioned on fused tokens and an identity vector.

The timestep is embedded sinusoidally, passed through a small MLP, summed
with a learned projection of the identity vector, and injected into every
residual block. Fused condition tokens enter through cross-attention layers
at the configured feature resolutions (U-Net activations as queries, tokens
as keys/values). One downsample follows every encoder level, so a config
with L channel multipliers exposes resolutions R, R/2, ..., R/2^L (the last
is the middle block).
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
import torch.nn as nn

from .config import ModelConfig
from .conditioners import norm_groups
from .fusion import cross_attention

Tensor = torch.Tensor


def timestep_embedding(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    """Sinusoidal embedding of integer timesteps, shape [B, dim] (dim even)."""
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half
    ).to(device=t.device)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(norm_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, c_out)
        self.norm2 = nn.GroupNorm(norm_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class TokenCrossAttention(nn.Module):
    """Image features attend over external condition tokens (residual)."""

    def __init__(self, channels: int, token_dim: int, head_count: int):
        super().__init__()
        if channels % head_count != 0:
            raise ValueError(f"head_count {head_count} must divide channels {channels}")
        self.head_count = head_count
        self.norm = nn.GroupNorm(norm_groups(channels), channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(token_dim, channels, bias=False)
        self.to_v = nn.Linear(token_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def _split(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        return x.view(b, n, self.head_count, c // self.head_count).transpose(1, 2)

    def forward(self, x: Tensor, tokens: Tensor) -> Tensor:
        b, c, h, w = x.shape
        q = self._split(self.to_q(self.norm(x).flatten(2).transpose(1, 2)))
        k = self._split(self.to_k(tokens))
        v = self._split(self.to_v(tokens))
        att = cross_attention(q, k, v).transpose(1, 2).reshape(b, h * w, c)
        return x + self.to_out(att).transpose(1, 2).reshape(b, c, h, w)


class UNetDenoiser(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        mults = tuple(cfg.channel_mults)
        levels = len(mults)
        resolutions = [cfg.resolution // 2**i for i in range(levels + 1)]
        if any(r < 1 for r in resolutions):
            raise ValueError("too many levels for the input resolution")
        if not set(cfg.attn_resolutions) <= set(resolutions):
            raise ValueError(
                f"attn_resolutions {cfg.attn_resolutions} not a subset of "
                f"reachable resolutions {resolutions}"
            )
        self.cfg = cfg
        ted = cfg.time_embed_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(ted, ted), nn.SiLU(), nn.Linear(ted, ted)
        )
        self.id_proj = nn.Linear(cfg.token_dim, ted)

        def attn(ch, res):
            if res in cfg.attn_resolutions:
                return TokenCrossAttention(ch, cfg.token_dim, cfg.head_count)
            return None

        chans = [cfg.base_channels * m for m in mults]
        self.conv_in = nn.Conv2d(cfg.channels, cfg.base_channels, 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        ch = cfg.base_channels
        for i, c_out in enumerate(chans):
            self.down_blocks.append(ResBlock(ch, c_out, ted))
            self.down_attn.append(attn(c_out, resolutions[i]) or nn.Identity())
            self.downsamples.append(nn.Conv2d(c_out, c_out, 3, stride=2, padding=1))
            ch = c_out

        self.mid1 = ResBlock(ch, ch, ted)
        self.mid_attn = attn(ch, resolutions[-1]) or nn.Identity()
        self.mid2 = ResBlock(ch, ch, ted)

        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(levels)):
            c_out = cfg.base_channels if i == 0 else chans[i - 1]
            self.upsamples.append(
                nn.Sequential(
                    nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(ch, ch, 3, padding=1),
                )
            )
            self.up_blocks.append(ResBlock(ch + chans[i], c_out, ted))
            self.up_attn.append(attn(c_out, resolutions[i]) or nn.Identity())
            ch = c_out

        self.norm_out = nn.GroupNorm(norm_groups(ch), ch)
        self.conv_out = nn.Conv2d(ch, cfg.channels, 3, padding=1)

    def _cond(self, x: Tensor, module: nn.Module, tokens: Tensor) -> Tensor:
        if isinstance(module, TokenCrossAttention):
            return module(x, tokens)
        return x

    def forward(self, x_t: Tensor, t, fused: Tensor, id_vector: Tensor) -> Tensor:
        cfg = self.cfg
        if x_t.shape[-1] != cfg.resolution or x_t.shape[-2] != cfg.resolution:
            raise ValueError(
                f"expected {cfg.resolution}x{cfg.resolution} input, got "
                f"{x_t.shape[-2]}x{x_t.shape[-1]}"
            )
        if fused.shape[-1] != cfg.token_dim or id_vector.shape[-1] != cfg.token_dim:
            raise ValueError("condition dims do not match config token_dim")
        t = torch.as_tensor(t, dtype=torch.long, device=x_t.device)
        if t.ndim == 0:
            t = t.reshape(1).expand(x_t.shape[0])
        emb = self.time_mlp(
            timestep_embedding(t, cfg.time_embed_dim).to(x_t.dtype)
        ) + self.id_proj(id_vector)

        h = self.conv_in(x_t)
        skips = []
        for block, att, down in zip(self.down_blocks, self.down_attn, self.downsamples):
            h = block(h, emb)
            h = self._cond(h, att, fused)
            skips.append(h)
            h = down(h)

        h = self.mid1(h, emb)
        h = self._cond(h, self.mid_attn, fused)
        h = self.mid2(h, emb)

        for up, block, att, skip in zip(
            self.upsamples, self.up_blocks, self.up_attn, reversed(skips)
        ):
            h = up(h)
            h = block(torch.cat([h, skip], dim=1), emb)
            h = self._cond(h, att, fused)

        return self.conv_out(F.silu(self.norm_out(h)))
