"""Conditional denoiser: learned text tokens, GPS or angle tokens, and a shared null token."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from ..errors import ConfigError
from ..geo import AngleHead, GpsHead
from .unet import UNet

MAX_TEXT_TOKENS = 4
GEO_TOKENS = {"gps": 2, "angle": 1}


@dataclass(frozen=True)
class ModelConfig:
    cond: str = "gps"  # "gps" or "angle"
    vocab_size: int = 12
    width: int = 64
    channels: int = 48
    image_size: int = 32
    patch: int = 2
    max_text: int = MAX_TEXT_TOKENS
    head_hidden: int = 128

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ConditioningTokens:
    """Padded token sequences; ``mask`` marks the real tokens of each row."""

    tokens: torch.Tensor  # (B, L, D)
    mask: torch.Tensor  # (B, L) bool

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def select(self, index) -> "ConditioningTokens":
        return ConditioningTokens(self.tokens[index], self.mask[index])

    @staticmethod
    def cat(parts: list["ConditioningTokens"]) -> "ConditioningTokens":
        return ConditioningTokens(torch.cat([p.tokens for p in parts]), torch.cat([p.mask for p in parts]))


def pad_text(ids: list[list[int]], max_text: int) -> tuple[torch.Tensor, torch.Tensor]:
    out = torch.zeros(len(ids), max_text, dtype=torch.long)
    mask = torch.zeros(len(ids), max_text, dtype=torch.bool)
    for i, row in enumerate(ids):
        if len(row) > max_text:
            raise ConfigError(f"{len(row)} text tokens exceed the limit of {max_text}")
        out[i, : len(row)] = torch.as_tensor(row, dtype=torch.long)
        mask[i, : len(row)] = True
    return out, mask


class GeoDiffusion(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.cond not in GEO_TOKENS:
            raise ConfigError(f"unknown conditioning {config.cond!r}")
        self.config = config
        d = config.width
        self.text = nn.Embedding(config.vocab_size, d)
        self.text_pos = nn.Parameter(0.02 * torch.randn(config.max_text, d))
        self.null = nn.Parameter(0.02 * torch.randn(d))
        if config.cond == "gps":
            self.geo_head = GpsHead(d, config.head_hidden)
        else:
            self.geo_head = AngleHead(d, config.head_hidden)
        self.unet = UNet(3, config.channels, d, patch=config.patch)
        self.max_tokens = config.max_text + GEO_TOKENS[config.cond]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (3, self.config.image_size, self.config.image_size)

    def geo_tokens(self, geo) -> torch.Tensor:
        """(B, 2) normalized GPS or (B,) angle bins -> (B, G, D)."""
        if self.config.cond == "gps":
            return self.geo_head(torch.as_tensor(geo, dtype=self.null.dtype).reshape(-1, 2))
        return self.geo_head(torch.as_tensor(geo, dtype=torch.long).reshape(-1))

    def condition(self, text_ids, text_mask, geo_tokens, keep_text, keep_geo) -> ConditioningTokens:
        """Assemble per-row sequences ``p + g``, ``p``, ``g`` or the null token.

        ``keep_text``/``keep_geo`` are (B,) bools; rows keeping neither see only the
        null token. ``geo_tokens`` may be None when no row keeps it.
        """
        keep_text = torch.as_tensor(keep_text, dtype=torch.bool)
        keep_geo = torch.as_tensor(keep_geo, dtype=torch.bool)
        B = keep_text.shape[0]
        d = self.config.width
        if text_ids is None:
            text_ids = torch.zeros(B, self.config.max_text, dtype=torch.long)
            text_mask = torch.zeros(B, self.config.max_text, dtype=torch.bool)
        if text_ids.shape[1] > self.config.max_text:
            raise ConfigError(f"{text_ids.shape[1]} text tokens exceed the limit of {self.config.max_text}")
        text = self.text(text_ids) + self.text_pos[: text_ids.shape[1]]
        t_mask = text_mask & keep_text[:, None]
        g = GEO_TOKENS[self.config.cond]
        if geo_tokens is None:
            if keep_geo.any():
                raise ConfigError("geo tokens required for rows that keep the geo condition")
            geo_tokens = torch.zeros(B, g, d)
        g_mask = keep_geo[:, None].expand(B, geo_tokens.shape[1])
        null_mask = ~(t_mask.any(1) | g_mask.any(1))
        tokens = torch.cat([text, geo_tokens, self.null.expand(B, 1, d)], dim=1)
        mask = torch.cat([t_mask, g_mask, null_mask[:, None]], dim=1)
        if int(mask.sum(1).max()) > self.max_tokens:
            raise ConfigError("token count overflow")
        return ConditioningTokens(tokens, mask)

    def null_condition(self, batch: int) -> ConditioningTokens:
        no = torch.zeros(batch, dtype=torch.bool)
        return self.condition(None, None, None, no, no)

    def forward(self, z: torch.Tensor, t: torch.Tensor, cond: ConditioningTokens) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(z.shape[0])
        return self.unet(z, t, cond.tokens, cond.mask)


def denoise(model: GeoDiffusion, z_t: torch.Tensor, tokens: ConditioningTokens, t) -> torch.Tensor:
    """Predicted noise; shape equals ``z_t``."""
    if tokens.mask.sum(1).max() > model.max_tokens:
        raise ConfigError("token count overflow")
    return model(z_t, t, tokens)


@dataclass(frozen=True)
class DropoutPolicy:
    p_text_only: float = 0.05
    p_gps_only: float = 0.05
    p_uncond: float = 0.05

    def __post_init__(self):
        ps = (self.p_text_only, self.p_gps_only, self.p_uncond)
        if any(p < 0 or p > 1 for p in ps) or sum(ps) >= 1:
            raise ConfigError(f"invalid dropout probabilities {ps}")


def dropout_flags(policy: DropoutPolicy, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-row (keep_text, keep_geo) flags."""
    u = rng.random(n)
    a = policy.p_uncond
    b = a + policy.p_text_only
    c = b + policy.p_gps_only
    null = u < a
    text_only = (u >= a) & (u < b)
    geo_only = (u >= b) & (u < c)
    return ~(null | geo_only), ~(null | text_only)


def apply_dropout(policy: DropoutPolicy, model: GeoDiffusion, text_ids, text_mask, geo_tokens,
                  rng: np.random.Generator) -> ConditioningTokens:
    keep_text, keep_geo = dropout_flags(policy, text_ids.shape[0], rng)
    return model.condition(text_ids, text_mask, geo_tokens, keep_text, keep_geo)
