"""Reverse-process sampling with single and dual classifier-free guidance and
regional noise averaging."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import geo
from .diffusion.model import ConditioningTokens, GeoDiffusion, pad_text
from .diffusion.schedule import NoiseSchedule
from .errors import ConfigError


@dataclass(frozen=True)
class GuidanceConfig:
    omega_p: float = 3.5
    omega_g: float = 7.5
    omega: float = 7.5
    steps: int = 50
    eta: float = 0.0
    max_region: int = 64

    def __post_init__(self):
        if min(self.omega_p, self.omega_g, self.omega) < 0:
            raise ConfigError("guidance weights must be nonnegative")
        if self.steps < 1:
            raise ConfigError("sampler needs at least one step")
        if self.eta < 0:
            raise ConfigError("eta must be nonnegative")
        if self.max_region < 1:
            raise ConfigError("max_region must be positive")

    def to_dict(self) -> dict:
        return {"omega_p": self.omega_p, "omega_g": self.omega_g, "omega": self.omega,
                "steps": self.steps, "eta": self.eta, "max_region": self.max_region}


@dataclass(frozen=True)
class RegionSpec:
    tags: tuple[geo.GeoTag, ...]

    def __post_init__(self):
        if len(self.tags) == 0:
            raise ConfigError("empty region")

    def __len__(self) -> int:
        return len(self.tags)

    def normalized(self, box: geo.BoundingBox) -> list[tuple[float, float]]:
        out = []
        for tag in self.tags:
            n = geo.normalize(tag, box)
            out.append((n.u, n.v))
        return out


def _point_in_polygon(x: float, y: float, poly: Sequence[tuple[float, float]]) -> bool:
    inside = False
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        if (y1 > y) != (y2 > y) and x < x1 + (y - y1) * (x2 - x1) / (y2 - y1):
            inside = not inside
    return inside


def region_grid(nx: int, ny: int, bounds: tuple[float, float, float, float],
                polygon: Sequence[tuple[float, float]] | None = None) -> RegionSpec:
    """Cell centers of an ``nx x ny`` grid over ``bounds = (lon0, lat0, lon1, lat1)``.

    With a polygon, only centers inside it are kept. Coincident points (a
    zero-extent grid) collapse to one tag.
    """
    if nx < 1 or ny < 1:
        raise ConfigError("grid needs positive dimensions")
    lon0, lat0, lon1, lat1 = bounds
    tags, seen = [], set()
    for j in range(ny):
        for i in range(nx):
            lon = lon0 + (i + 0.5) / nx * (lon1 - lon0)
            lat = lat0 + (j + 0.5) / ny * (lat1 - lat0)
            if polygon is not None and len(polygon) >= 3 and not _point_in_polygon(lon, lat, polygon):
                continue
            if (lon, lat) not in seen:
                seen.add((lon, lat))
                tags.append(geo.GeoTag(lon, lat))
    return RegionSpec(tuple(tags))


def _check_shapes(*xs):
    shape = tuple(np.shape(xs[0]))
    for x in xs[1:]:
        if tuple(np.shape(x)) != shape:
            raise ConfigError(f"noise estimates differ in shape: {shape} vs {tuple(np.shape(x))}")


def cfg_single(eps_cond, eps_uncond, omega: float):
    _check_shapes(eps_cond, eps_uncond)
    return (1.0 + omega) * eps_cond - omega * eps_uncond


def cfg_dual(eps_nn, eps_pn, eps_pg, omega_p: float, omega_g: float):
    """Text guidance measured from the null prediction, GPS guidance measured from the text-only one."""
    _check_shapes(eps_nn, eps_pn, eps_pg)
    return eps_nn + omega_p * (eps_pn - eps_nn) + omega_g * (eps_pg - eps_pn)


def combine_averaged(eps_nn, eps_pn, eps_pg_list, omega_p: float, omega_g: float):
    """Dual guidance with the GPS-conditional term replaced by its mean over the region."""
    if len(eps_pg_list) == 0:
        raise ConfigError("empty region")
    if isinstance(eps_pg_list, torch.Tensor):
        stacked = eps_pg_list
    elif isinstance(eps_pg_list[0], torch.Tensor):
        stacked = torch.stack(list(eps_pg_list))
    else:
        stacked = np.stack([np.asarray(e, dtype=np.float64) for e in eps_pg_list])
    mean = stacked.mean(0) if len(stacked) > 1 else stacked[0]
    return cfg_dual(eps_nn, eps_pn, mean, omega_p, omega_g)


@torch.no_grad()
def averaged_noise(model: GeoDiffusion, z_t: torch.Tensor, text_ids: list[int], region_uv, cfg: GuidanceConfig, t):
    """Guided noise for one latent ``z_t`` (shape (3, H, W)) over a region of normalized tags."""
    region_uv = list(region_uv)
    if not region_uv:
        raise ConfigError("empty region")
    if len(region_uv) > cfg.max_region:
        raise ConfigError(f"region has {len(region_uv)} tags, limit is {cfg.max_region}")
    rows = _rows_for(model, text_ids, region_uv)
    z = z_t.unsqueeze(0).expand(len(rows), *z_t.shape)
    eps = model(z, torch.full((len(rows),), int(t), dtype=torch.long), rows)
    return combine_averaged(eps[0], eps[1], eps[2:], cfg.omega_p, cfg.omega_g)


def _rows_for(model: GeoDiffusion, text_ids: list[int], region) -> ConditioningTokens:
    """Conditioning rows [null, text-only, text+geo_1, ..., text+geo_M]."""
    m = 0 if region is None else len(region)
    ids, mask = pad_text([list(text_ids)] * (2 + m), model.config.max_text)
    keep_text = torch.tensor([False] + [True] * (1 + m))
    keep_geo = torch.tensor([False, False] + [True] * m)
    geo_tokens = None
    if m:
        if model.config.cond == "gps":
            vals = torch.tensor([[0.0, 0.0]] * 2 + [list(g) for g in region], dtype=torch.float32)
        else:
            vals = torch.tensor([0, 0] + [int(g) for g in region], dtype=torch.long)
        geo_tokens = model.geo_tokens(vals)
    return model.condition(ids, mask, geo_tokens, keep_text, keep_geo)


@dataclass
class SampleRequest:
    """One image to generate. ``geo`` holds M >= 1 normalized tags (or angle bins);
    None drops the geo condition entirely."""

    text_ids: list[int]
    geo: list | None = None
    seed: int = 0
    tags: list = field(default_factory=list)  # raw tags, recorded in sidecars only


def timesteps(steps: int, T: int) -> np.ndarray:
    if steps > T:
        raise ConfigError(f"{steps} sampler steps exceed the schedule length {T}")
    return np.unique(np.round(np.linspace(T - 1, 0, steps)).astype(np.int64))[::-1].copy()


def initial_noise(seed: int, shape) -> torch.Tensor:
    g = torch.Generator().manual_seed(int(seed))
    return torch.randn(tuple(shape), generator=g)


@torch.no_grad()
def sample(model: GeoDiffusion, schedule: NoiseSchedule, requests: Sequence[SampleRequest],
           cfg: GuidanceConfig = GuidanceConfig(), chunk: int = 256) -> np.ndarray:
    """Deterministic (eta=0) DDIM sampling; returns (B, H, W, 3) float32 images in [0, 1]."""
    ts = timesteps(cfg.steps, schedule.T)
    model.eval()
    shape = model.image_shape
    gens = [torch.Generator().manual_seed(int(r.seed)) for r in requests]
    z = torch.stack([torch.randn(shape, generator=g) for g in gens])

    # conditioning rows never change across steps, so build them once
    parts, owner, spans = [], [], []
    for i, r in enumerate(requests):
        if r.geo is not None and len(r.geo) > cfg.max_region:
            raise ConfigError(f"region has {len(r.geo)} tags, limit is {cfg.max_region}")
        if r.geo is not None and len(r.geo) == 0:
            raise ConfigError("empty region")
        rows = _rows_for(model, r.text_ids, r.geo)
        spans.append((len(owner), len(rows)))
        owner.extend([i] * len(rows))
        parts.append(rows)
    rows = ConditioningTokens.cat(parts)
    owner = torch.tensor(owner)

    abar = schedule.abar
    for k, t in enumerate(ts):
        zin = z[owner]
        tt = torch.full((len(owner),), int(t), dtype=torch.long)
        eps_rows = torch.cat([model(zin[s:s + chunk], tt[s:s + chunk], rows.select(slice(s, s + chunk)))
                              for s in range(0, len(owner), chunk)])
        eps = torch.empty_like(z)
        for i, (start, n) in enumerate(spans):
            e = eps_rows[start:start + n]
            if n == 2:
                eps[i] = e[0] + cfg.omega_p * (e[1] - e[0])
            else:
                eps[i] = combine_averaged(e[0], e[1], e[2:], cfg.omega_p, cfg.omega_g)
        a_t = float(abar[t])
        a_prev = float(abar[ts[k + 1]]) if k + 1 < len(ts) else 1.0
        x0 = ((z - math.sqrt(1.0 - a_t) * eps) / math.sqrt(a_t)).clamp(-1.0, 1.0)
        eps = (z - math.sqrt(a_t) * x0) / math.sqrt(1.0 - a_t)
        sig = cfg.eta * math.sqrt((1.0 - a_prev) / (1.0 - a_t) * (1.0 - a_t / a_prev))
        z = math.sqrt(a_prev) * x0 + math.sqrt(max(1.0 - a_prev - sig**2, 0.0)) * eps
        if sig > 0:
            z = z + sig * torch.stack([torch.randn(shape, generator=g) for g in gens])
    img = ((z + 1.0) / 2.0).clamp(0.0, 1.0)
    return img.permute(0, 2, 3, 1).contiguous().numpy().astype(np.float32)
