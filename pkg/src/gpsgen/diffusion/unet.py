"""Small pixel-space UNet with timestep embeddings and cross-attention to a token sequence."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.to(torch.float32)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Image features (queries) attend over conditioning tokens (keys/values)."""

    def __init__(self, ch: int, token_dim: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.norm = _norm(ch)
        self.q = nn.Linear(ch, ch, bias=False)
        self.k = nn.Linear(token_dim, ch, bias=False)
        self.v = nn.Linear(token_dim, ch, bias=False)
        self.out = nn.Linear(ch, ch)

    def forward(self, x, tokens, mask):
        B, C, H, W = x.shape
        h = self.norm(x).flatten(2).transpose(1, 2)  # (B, HW, C)
        q = self.q(h).view(B, H * W, self.heads, C // self.heads).transpose(1, 2)
        k = self.k(tokens).view(B, -1, self.heads, C // self.heads).transpose(1, 2)
        v = self.v(tokens).view(B, -1, self.heads, C // self.heads).transpose(1, 2)
        # mask: (B, L) True where the token is real
        attn = F.scaled_dot_product_attention(q, k, v, attn_mask=mask[:, None, None, :])
        attn = attn.transpose(1, 2).reshape(B, H * W, C)
        return x + self.out(attn).transpose(1, 2).view(B, C, H, W)


class UNet(nn.Module):
    """Two-level UNet: ``channels`` at the working resolution, ``2 * channels`` below.

    With ``patch > 1`` the image is first folded into ``patch x patch`` pixel blocks
    (pixel-unshuffle), so a 32x32 input is processed at 16x16. Cross-attention
    sits on the two coarser levels, and the masked mean of the tokens is added to
    the timestep embedding so every block sees the condition globally.
    """

    def __init__(self, in_ch: int = 3, channels: int = 48, token_dim: int = 64, heads: int = 4, patch: int = 2):
        super().__init__()
        c1, c2 = channels, 2 * channels
        temb_dim = 4 * channels
        self.channels = channels
        self.patch = patch
        self.temb = nn.Sequential(nn.Linear(channels, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.pool_proj = nn.Sequential(nn.Linear(token_dim, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.conv_in = nn.Conv2d(in_ch * patch * patch, c1, 3, padding=1)
        self.down1 = ResBlock(c1, c1, temb_dim)
        self.pool1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.down2 = ResBlock(c1, c2, temb_dim)
        self.attn2 = CrossAttention(c2, token_dim, heads)
        self.pool2 = nn.Conv2d(c2, c2, 3, stride=2, padding=1)
        self.mid1 = ResBlock(c2, c2, temb_dim)
        self.mid_attn = CrossAttention(c2, token_dim, heads)
        self.mid2 = ResBlock(c2, c2, temb_dim)
        self.up2 = ResBlock(2 * c2, c2, temb_dim)
        self.up_attn2 = CrossAttention(c2, token_dim, heads)
        self.up1 = ResBlock(c2 + c1, c1, temb_dim)
        self.norm_out = _norm(c1)
        self.conv_out = nn.Conv2d(c1, in_ch * patch * patch, 3, padding=1)

    def forward(self, x, t, tokens, mask):
        temb = self.temb(timestep_embedding(t, self.channels).to(x.dtype))
        m = mask.to(tokens.dtype)[..., None]
        pooled = (tokens * m).sum(1) / m.sum(1).clamp(min=1.0)
        temb = temb + self.pool_proj(pooled)
        if self.patch > 1:
            x = F.pixel_unshuffle(x, self.patch)
        h0 = self.down1(self.conv_in(x), temb)
        h1 = self.pool1(h0)
        h1 = self.attn2(self.down2(h1, temb), tokens, mask)
        h = self.pool2(h1)
        h = self.mid2(self.mid_attn(self.mid1(h, temb), tokens, mask), temb)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.up_attn2(self.up2(torch.cat([h, h1], 1), temb), tokens, mask)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.up1(torch.cat([h, h0], 1), temb)
        out = self.conv_out(F.silu(self.norm_out(h)))
        return F.pixel_shuffle(out, self.patch) if self.patch > 1 else out
