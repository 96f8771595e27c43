"""Coordinate handling: box normalization, Fourier features, azimuths, angle bins,
and the small MLP heads that turn coordinates into conditioning tokens.

Angles are degrees everywhere in the public API.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, RangeError, UndefinedAzimuthError

NUM_ANGLE_BINS = 36
BIN_WIDTH_DEG = 360.0 / NUM_ANGLE_BINS
DEFAULT_FREQUENCIES = 10


@dataclass(frozen=True)
class GeoTag:
    lon: float
    lat: float

    def __post_init__(self):
        if not (math.isfinite(self.lon) and math.isfinite(self.lat)):
            raise RangeError(f"non-finite geotag ({self.lon}, {self.lat})")


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ConfigError(f"degenerate bounding box {self}")

    def contains(self, tag: GeoTag) -> bool:
        return self.x_min <= tag.lon <= self.x_max and self.y_min <= tag.lat <= self.y_max

    @property
    def center(self) -> GeoTag:
        return GeoTag(0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def to_dict(self) -> dict:
        return {"x_min": self.x_min, "x_max": self.x_max, "y_min": self.y_min, "y_max": self.y_max}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundingBox":
        return cls(float(d["x_min"]), float(d["x_max"]), float(d["y_min"]), float(d["y_max"]))


@dataclass(frozen=True)
class NormalizedGeo:
    u: float
    v: float


def normalize(tag: GeoTag, box: BoundingBox) -> NormalizedGeo:
    """Affine map of the box onto [-1, 1]^2, one axis at a time."""
    if not box.contains(tag):
        raise RangeError(f"{tag} lies outside {box}")
    u = 2.0 * (tag.lon - box.x_min) / (box.x_max - box.x_min) - 1.0
    v = 2.0 * (tag.lat - box.y_min) / (box.y_max - box.y_min) - 1.0
    # the affine map can overshoot by an ulp at the corners
    return NormalizedGeo(min(1.0, max(-1.0, u)), min(1.0, max(-1.0, v)))


def denormalize(n: NormalizedGeo, box: BoundingBox) -> GeoTag:
    lon = box.x_min + 0.5 * (n.u + 1.0) * (box.x_max - box.x_min)
    lat = box.y_min + 0.5 * (n.v + 1.0) * (box.y_max - box.y_min)
    return GeoTag(lon, lat)


def normalize_array(lonlat: np.ndarray, box: BoundingBox) -> np.ndarray:
    """Vectorized :func:`normalize` for an (N, 2) array of (lon, lat)."""
    lonlat = np.asarray(lonlat, dtype=np.float64)
    lo = np.array([box.x_min, box.y_min])
    hi = np.array([box.x_max, box.y_max])
    if np.any(lonlat < lo) or np.any(lonlat > hi):
        raise RangeError("geotag outside bounding box")
    return np.clip(2.0 * (lonlat - lo) / (hi - lo) - 1.0, -1.0, 1.0)


def positional_encode(v, num_frequencies: int = DEFAULT_FREQUENCIES):
    """Fourier features ``[v, sin(2^0 pi v), cos(2^0 pi v), ..., cos(2^(F-1) pi v)]``.

    Works elementwise and appends a trailing axis of size ``2F + 1``. Torch input
    stays torch (and differentiable); anything else comes back as a numpy array.
    """
    if num_frequencies < 1:
        raise ConfigError("positional encoding needs at least one frequency")
    if isinstance(v, torch.Tensor):
        scales = (2.0 ** torch.arange(num_frequencies, dtype=v.dtype, device=v.device)) * math.pi
        arg = v.unsqueeze(-1) * scales
        pairs = torch.stack([torch.sin(arg), torch.cos(arg)], dim=-1).flatten(-2)
        return torch.cat([v.unsqueeze(-1), pairs], dim=-1)
    v = np.asarray(v, dtype=np.float64)
    arg = v[..., None] * (2.0 ** np.arange(num_frequencies)) * np.pi
    pairs = np.stack([np.sin(arg), np.cos(arg)], axis=-1).reshape(*v.shape, 2 * num_frequencies)
    return np.concatenate([v[..., None], pairs], axis=-1)


def azimuth(tag: GeoTag, center: GeoTag) -> float:
    """Compass bearing of ``tag`` seen from ``center``: north 0, east 90, in (-180, 180]."""
    dx = tag.lon - center.lon
    dy = tag.lat - center.lat
    if dx == 0.0 and dy == 0.0:
        raise UndefinedAzimuthError(f"azimuth undefined at the center {center}")
    a = math.degrees(math.atan2(dx, dy))
    return 180.0 if a <= -180.0 else a


def azimuth_array(dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    a = np.degrees(np.arctan2(dx, dy))
    return np.where(a <= -180.0, 180.0, a)


def discretize_angle(a) -> int | np.ndarray:
    """``round(a / 10) mod 36``: bin k is centered on 10k degrees, so 0 maps to bin 0,
    90 to bin 9, and 180 and -180 share bin 18. Halves round up."""
    k = np.floor(np.asarray(a, dtype=np.float64) / BIN_WIDTH_DEG + 0.5).astype(np.int64)
    k = np.mod(k, NUM_ANGLE_BINS)
    return int(k) if k.ndim == 0 else k


def bin_center(index) -> float | np.ndarray:
    """Center of bin ``index`` in degrees, wrapped into (-180, 180]."""
    c = BIN_WIDTH_DEG * np.asarray(index, dtype=np.float64)
    c = np.where(c > 180.0, c - 360.0, c)
    return float(c) if c.ndim == 0 else c


def normalized_bin(index) -> float | np.ndarray:
    """Bin center rescaled from degrees to (-1, 1]."""
    return bin_center(index) / 180.0


def bin_from_normalized(value) -> int | np.ndarray:
    return discretize_angle(np.asarray(value, dtype=np.float64) * 180.0)


class GpsHead(nn.Module):
    """Two-layer MLP shared by both axes, producing one token per coordinate.

    The axis identity enters as a one-hot suffix on the Fourier features, otherwise
    swapped (lon, lat) pairs would give the same token set.
    """

    def __init__(self, width: int, hidden: int = 128, num_frequencies: int = DEFAULT_FREQUENCIES):
        super().__init__()
        self.num_frequencies = num_frequencies
        self.width = width
        in_dim = 2 * num_frequencies + 1 + 2
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.SiLU(), nn.Linear(hidden, width))

    def forward(self, uv: torch.Tensor) -> torch.Tensor:
        # uv: (B, 2) normalized coordinates -> (B, 2, width)
        enc = positional_encode(uv, self.num_frequencies)
        axis = torch.eye(2, dtype=uv.dtype, device=uv.device).expand(uv.shape[0], 2, 2)
        return self.net(torch.cat([enc, axis], dim=-1))


class AngleHead(nn.Module):
    """Two-layer MLP over the Fourier features of the normalized bin center."""

    def __init__(self, width: int, hidden: int = 128, num_frequencies: int = DEFAULT_FREQUENCIES):
        super().__init__()
        self.num_frequencies = num_frequencies
        self.width = width
        in_dim = 2 * num_frequencies + 1
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.SiLU(), nn.Linear(hidden, width))

    def forward(self, bins: torch.Tensor) -> torch.Tensor:
        # bins: (B,) integer indices -> (B, 1, width)
        deg = BIN_WIDTH_DEG * bins.to(torch.float32)
        centers = torch.where(deg > 180.0, deg - 360.0, deg) / 180.0
        return self.net(positional_encode(centers, self.num_frequencies)).unsqueeze(1)


def _check_width(head: nn.Module, width: int | None) -> None:
    if width is not None and head.width != width:
        raise ConfigError(f"head emits width {head.width}, tokens need {width}")


def embed_gps(n: NormalizedGeo | torch.Tensor, head: GpsHead, width: int | None = None) -> torch.Tensor:
    """GPS tokens for one normalized tag (shape (2, D)) or a batch (shape (B, 2, D))."""
    _check_width(head, width)
    if isinstance(n, NormalizedGeo):
        uv = torch.tensor([[n.u, n.v]], dtype=torch.float32)
        return head(uv)[0]
    return head(n)


def embed_angle(b: int | torch.Tensor, head: AngleHead, width: int | None = None) -> torch.Tensor:
    """Angle token for one bin (shape (1, D)) or a batch of bins (shape (B, 1, D))."""
    _check_width(head, width)
    if isinstance(b, torch.Tensor):
        return head(b)
    if not 0 <= int(b) < NUM_ANGLE_BINS:
        raise RangeError(f"angle bin {b} outside 0..{NUM_ANGLE_BINS - 1}")
    return head(torch.tensor([int(b)]))[0]
