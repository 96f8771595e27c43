"""Discrete variance-preserving noise schedule and the forward process.

Step ``t`` (0-based) maps the previous latent to the next by
``z_t = alpha[t] * z_{t-1} + beta[t] * eps_t`` with ``z_{-1} = x0``, so
``abar[t] = prod_{s<=t} alpha[s]**2`` and ``sigma[t] = sqrt(1 - abar[t])``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ConfigError

SCHEDULE_KINDS = ("linear", "cosine")


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    kind: str
    alpha: np.ndarray
    beta: np.ndarray
    abar: np.ndarray
    sigma: np.ndarray

    def to_dict(self) -> dict:
        return {"T": self.T, "kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return build_schedule(int(d["T"]), d["kind"])

    def sqrt_abar_t(self, t: torch.Tensor) -> torch.Tensor:
        return torch.from_numpy(np.sqrt(self.abar)).to(torch.float32)[t]

    def sigma_t(self, t: torch.Tensor) -> torch.Tensor:
        return torch.from_numpy(self.sigma).to(torch.float32)[t]


def build_schedule(T: int = 1000, kind: str = "linear") -> NoiseSchedule:
    if T < 2:
        raise ConfigError(f"schedule needs T >= 2, got {T}")
    if kind == "linear":
        # DDPM endpoints, rescaled so short schedules still end near pure noise
        scale = 1000.0 / T
        var = np.linspace(1e-4 * scale, 0.02 * scale, T, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        var = 1.0 - f[1:] / f[:-1]
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    var = np.clip(var, 1e-8, 0.999)
    alpha = np.sqrt(1.0 - var)
    beta = np.sqrt(var)
    abar = np.cumprod(alpha**2)
    return NoiseSchedule(T=T, kind=kind, alpha=alpha, beta=beta, abar=abar, sigma=np.sqrt(1.0 - abar))


def _expand(coef: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    return coef.reshape(-1, *([1] * (ref.dim() - 1))) if coef.dim() else coef


def forward_diffuse(x0: torch.Tensor, t, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """Closed form ``sqrt(abar[t]) * x0 + sigma[t] * eps``; ``t`` is an int or a (B,) tensor."""
    if x0.shape != eps.shape:
        raise ConfigError(f"x0 {tuple(x0.shape)} and noise {tuple(eps.shape)} differ in shape")
    t = torch.as_tensor(t, dtype=torch.long)
    a = _expand(s.sqrt_abar_t(t).to(x0.dtype), x0)
    b = _expand(s.sigma_t(t).to(x0.dtype), x0)
    return a * x0 + b * eps


def forward_diffuse_iterated(x0: torch.Tensor, t: int, step_noises: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """Apply the one-step recursion ``t + 1`` times; ``step_noises[k]`` is the noise of step k."""
    z = x0.to(torch.float64)
    for k in range(t + 1):
        z = float(s.alpha[k]) * z + float(s.beta[k]) * step_noises[k].to(torch.float64)
    return z
