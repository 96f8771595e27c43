"""Denoising objectives: reconstruction, prior preservation and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .model import ConditioningTokens, GeoDiffusion
from .schedule import NoiseSchedule, forward_diffuse


@dataclass
class TrainBatch:
    x0: torch.Tensor  # (B, 3, H, W) in [-1, 1]
    text_ids: torch.Tensor  # (B, L) long
    text_mask: torch.Tensor  # (B, L) bool
    geo: torch.Tensor | None  # (B, 2) normalized GPS or (B,) angle bins
    t: torch.Tensor  # (B,) long in [0, T)
    eps: torch.Tensor  # like x0
    keep_text: torch.Tensor  # (B,) bool
    keep_geo: torch.Tensor  # (B,) bool

    def conditioning(self, model: GeoDiffusion) -> ConditioningTokens:
        geo = model.geo_tokens(self.geo) if self.geo is not None and bool(self.keep_geo.any()) else None
        return model.condition(self.text_ids, self.text_mask, geo, self.keep_text, self.keep_geo)

    def without_geo(self) -> "TrainBatch":
        return TrainBatch(self.x0, self.text_ids, self.text_mask, None, self.t, self.eps,
                          self.keep_text, torch.zeros_like(self.keep_geo))


def recon_loss(batch: TrainBatch, model: GeoDiffusion, schedule: NoiseSchedule) -> torch.Tensor:
    """Noise-prediction MSE with unit timestep weight, averaged over batch and pixels."""
    z = forward_diffuse(batch.x0, batch.t, batch.eps, schedule)
    pred = model(z, batch.t, batch.conditioning(model))
    return torch.mean((pred - batch.eps) ** 2)


def preservation_loss(prior_batch: TrainBatch, model: GeoDiffusion, schedule: NoiseSchedule) -> torch.Tensor:
    """Same objective on prior samples, with the geo condition replaced by the null token."""
    return recon_loss(prior_batch.without_geo(), model, schedule)


def total_loss(recon: torch.Tensor, preservation: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    return recon + lam * preservation
