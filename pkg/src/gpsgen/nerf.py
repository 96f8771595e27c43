"""Tiny radiance field, quadrature volume rendering, the two regularizers used by
score distillation, and occupancy / turntable exports."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from . import worldgen
from .errors import ConfigError, DataError
from .geo import positional_encode

DEFAULT_THRESHOLD = 10.0
OCC_MAGIC = b"GPSGENOC"


@dataclass(frozen=True)
class CameraPose:
    azimuth: float
    elevation: float
    radius: float = 3.2
    fov_deg: float = 34.0
    resolution: int = 64

    def rays(self, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        rig = worldgen.CameraRig(radius=self.radius, fov_deg=self.fov_deg)
        o, d = worldgen.camera_rays(self.azimuth, self.elevation, self.resolution, rig)
        return torch.from_numpy(o).to(dtype), torch.from_numpy(d).to(dtype)


@dataclass
class RenderOutput:
    rgb: torch.Tensor  # (H, W, 3)
    depth: torch.Tensor  # (H, W)
    opacity: torch.Tensor  # (H, W)
    weights: torch.Tensor  # (H * W, S)


class RadianceField(nn.Module):
    """Maps points (N, 3) to density (N,) >= 0 and color (N, 3) in [0, 1]; zero density outside ``bound``."""

    bound: float = 1.0

    def density(self, x: torch.Tensor) -> torch.Tensor:
        return self.query(x)[0]

    def query(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        raise NotImplementedError

    def _inside(self, x: torch.Tensor) -> torch.Tensor:
        return (x.abs() <= self.bound).all(-1).to(x.dtype)


class CoordinateField(RadianceField):
    """MLP over per-axis Fourier features, with a density blob at the origin to start from."""

    def __init__(self, num_frequencies: int = 6, hidden: int = 64, layers: int = 3, bound: float = 1.0,
                 blob_density: float = 10.0, blob_radius: float = 0.5):
        super().__init__()
        self.num_frequencies = num_frequencies
        self.bound = bound
        self.blob_density = blob_density
        self.blob_radius = blob_radius
        dims = [3 * (2 * num_frequencies + 1)] + [hidden] * layers
        mods = []
        for a, b in zip(dims[:-1], dims[1:]):
            mods += [nn.Linear(a, b), nn.SiLU()]
        self.trunk = nn.Sequential(*mods)
        self.head = nn.Linear(hidden, 4)
        nn.init.normal_(self.head.weight, std=0.01)
        nn.init.zeros_(self.head.bias)

    def config(self) -> dict:
        return {"num_frequencies": self.num_frequencies, "hidden": self.head.in_features,
                "layers": len(self.trunk) // 2, "bound": self.bound,
                "blob_density": self.blob_density, "blob_radius": self.blob_radius}

    def query(self, x):
        enc = positional_encode(x / self.bound, self.num_frequencies).flatten(-2)
        out = self.head(self.trunk(enc))
        blob = self.blob_density * (1.0 - x.norm(dim=-1) / self.blob_radius)
        sigma = F.softplus(out[..., 0] + blob) * self._inside(x)
        return sigma, torch.sigmoid(out[..., 1:])


class SphereField(RadianceField):
    """Analytic soft sphere: ``scale * sigmoid(sharpness * (radius - |x|))`` with a flat color.

    ``radius`` and ``scale`` are the two trainable parameters.
    """

    def __init__(self, radius: float = 0.5, scale: float = 20.0, sharpness: float = 40.0,
                 color=(0.8, 0.3, 0.2), dtype=torch.float32):
        super().__init__()
        self.radius = nn.Parameter(torch.tensor(radius, dtype=dtype))
        self.scale = nn.Parameter(torch.tensor(scale, dtype=dtype))
        self.sharpness = sharpness
        self.register_buffer("rgb", torch.tensor(color, dtype=dtype))

    def query(self, x):
        sigma = self.scale * torch.sigmoid(self.sharpness * (self.radius - x.norm(dim=-1)))
        return sigma * self._inside(x), self.rgb.expand(*x.shape[:-1], 3)


class ZeroField(RadianceField):
    def query(self, x):
        return torch.zeros(x.shape[:-1], dtype=x.dtype), torch.zeros(*x.shape[:-1], 3, dtype=x.dtype)


def composite(sigma: torch.Tensor, rgb: torch.Tensor, deltas: torch.Tensor):
    """Quadrature weights ``T_i (1 - exp(-sigma_i delta_i))`` with ``T_i = prod_{j<i} exp(-sigma_j delta_j)``.

    Returns (weights (R, S), color (R, 3), opacity (R,)); opacity is the weight sum.
    """
    alpha = 1.0 - torch.exp(-sigma * deltas)
    keep = 1.0 - alpha
    trans = torch.cumprod(torch.cat([torch.ones_like(keep[..., :1]), keep[..., :-1]], -1), -1)
    w = trans * alpha
    return w, (w[..., None] * rgb).sum(-2), w.sum(-1)


def _ray_bounds(field: RadianceField, pose: CameraPose) -> tuple[float, float]:
    reach = field.bound * math.sqrt(3.0)
    near, far = max(pose.radius - reach, 1e-3), pose.radius + reach
    if not far > near:
        raise ConfigError(f"degenerate near/far ({near}, {far})")
    return near, far


def _sample_points(field, pose, samples_per_ray, generator, dtype):
    if samples_per_ray < 2:
        raise ConfigError("volume rendering needs at least two samples per ray")
    o, d = pose.rays(dtype)
    near, far = _ray_bounds(field, pose)
    width = (far - near) / samples_per_ray
    base = near + width * torch.arange(samples_per_ray, dtype=dtype)
    if generator is None:
        t = (base + 0.5 * width).expand(o.shape[0], samples_per_ray)
    else:
        t = base + width * torch.rand(o.shape[0], samples_per_ray, generator=generator).to(dtype)
    pts = o[:, None] + t[..., None] * d[:, None]
    return pts, t, d, width, far


def render(field: RadianceField, pose: CameraPose, samples_per_ray: int = 48,
           generator: torch.Generator | None = None, background: float = 1.0) -> RenderOutput:
    """Volume-render ``field`` from ``pose``; with a generator, sample positions are stratified-jittered."""
    dtype = next((p.dtype for p in field.parameters()), torch.float32)
    pts, t, d, width, far = _sample_points(field, pose, samples_per_ray, generator, dtype)
    sigma, rgb = field.query(pts.reshape(-1, 3))
    R, S = t.shape
    w, color, opacity = composite(sigma.reshape(R, S), rgb.reshape(R, S, 3), torch.full_like(t, width))
    color = color + (1.0 - opacity)[:, None] * background
    depth = (w * t).sum(-1) + (1.0 - opacity) * far
    n = pose.resolution
    return RenderOutput(color.reshape(n, n, 3), depth.reshape(n, n), opacity.reshape(n, n), w)


def orientation_reg(field: RadianceField, poses, samples_per_ray: int = 32, resolution: int = 16,
                    generator: torch.Generator | None = None) -> torch.Tensor:
    """Mean over rays of ``sum_i w_i * max(0, n_i . d)^2``, with ``n = -grad(sigma) / |grad(sigma)|``.

    A normal with a positive component along the viewing direction points away
    from the camera.
    """
    dtype = next((p.dtype for p in field.parameters()), torch.float32)
    total = torch.zeros((), dtype=dtype)
    poses = list(poses)
    for pose in poses:
        low = CameraPose(pose.azimuth, pose.elevation, pose.radius, pose.fov_deg, resolution)
        pts, t, d, width, _ = _sample_points(field, low, samples_per_ray, generator, dtype)
        pts = pts.reshape(-1, 3).detach().requires_grad_(True)
        with torch.enable_grad():
            sigma = field.density(pts)
            if sigma.requires_grad:
                (grad,) = torch.autograd.grad(sigma.sum(), pts, create_graph=True, allow_unused=True,
                                              materialize_grads=True)
            else:  # constant field
                grad = torch.zeros_like(pts)
        normal = -grad / torch.sqrt((grad * grad).sum(-1, keepdim=True) + 1e-20)
        R, S = t.shape
        w, _, _ = composite(sigma.reshape(R, S), torch.zeros(R, S, 3, dtype=dtype), torch.full_like(t, width))
        facing = (normal.reshape(R, S, 3) * d[:, None]).sum(-1).clamp(min=0.0)
        total = total + (w * facing**2).sum(-1).mean()
    return total / max(len(poses), 1)


OPACITY_EPS = 1e-6


def _binary_entropy(o: torch.Tensor) -> torch.Tensor:
    return -(o * torch.log(o) + (1 - o) * torch.log(1 - o))


def opacity_reg(out) -> torch.Tensor:
    """Binary entropy of the accumulated opacity, clamped to [eps, 1 - eps] and
    shifted so both endpoints give exactly 0; maximum ``ln 2 - H(eps)`` at 0.5."""
    o = out.opacity if isinstance(out, RenderOutput) else torch.as_tensor(out)
    # H(o) = H(1 - o); folding onto [eps, 0.5] makes o = 0 and o = 1 hit the same clamp value
    m = torch.minimum(o, 1 - o).clamp(min=OPACITY_EPS)
    floor = _binary_entropy(torch.tensor(OPACITY_EPS, dtype=o.dtype))
    return (_binary_entropy(m) - floor).clamp(min=0.0).mean()


@dataclass
class OccupancyGrid:
    occupancy: np.ndarray  # (R, R, R) bool, indexed [x, y, z]
    density: np.ndarray  # (R, R, R) float32
    resolution: int
    bound: float
    threshold: float

    def header(self) -> dict:
        return {"resolution": self.resolution, "bounds": [-self.bound, self.bound],
                "threshold": self.threshold, "order": "xyz", "dtype": "u1"}


@torch.no_grad()
def export_density(field: RadianceField, resolution: int = 32, threshold: float = DEFAULT_THRESHOLD,
                   bound: float | None = None) -> OccupancyGrid:
    """Density at voxel centers; a voxel is occupied when its density exceeds ``threshold``."""
    if resolution < 8:
        raise ConfigError("occupancy export needs resolution >= 8")
    bound = field.bound if bound is None else bound
    dtype = next((p.dtype for p in field.parameters()), torch.float32)
    pts = torch.from_numpy(worldgen.grid_points(resolution, bound)).to(dtype)
    dens = torch.cat([field.density(chunk) for chunk in pts.split(65536)]).to(torch.float32).numpy()
    dens = dens.reshape((resolution,) * 3)
    return OccupancyGrid(dens > threshold, dens, resolution, float(bound), float(threshold))


def occupancy_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


def write_occupancy(path, grid: OccupancyGrid) -> None:
    head = json.dumps(grid.header(), sort_keys=True).encode()
    data = OCC_MAGIC + struct.pack("<Q", len(head)) + head + grid.occupancy.astype(np.uint8).tobytes(order="C")
    Path(path).write_bytes(data)


def read_occupancy(path) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != OCC_MAGIC:
        raise DataError(f"{path} is not an occupancy grid")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    r = header["resolution"]
    occ = np.frombuffer(raw[16 + n:], dtype=np.uint8)
    if occ.size != r**3:
        raise DataError(f"{path}: expected {r ** 3} voxels, found {occ.size}")
    return header, occ.reshape(r, r, r).astype(bool)


@torch.no_grad()
def turntable(field: RadianceField, out_dir, views: int = 12, elevation: float = -15.0, resolution: int = 64,
              samples_per_ray: int = 64, radius: float = 3.2, fov_deg: float = 34.0, prefix: str = "view") -> list[Path]:
    """Render ``views`` evenly spaced azimuths starting at 0 and save them as PNGs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(views):
        az = -180.0 + 360.0 * (i + views // 2) / views
        az = az - 360.0 if az > 180.0 else az
        img = render(field, CameraPose(az, elevation, radius, fov_deg, resolution), samples_per_ray).rgb
        path = out_dir / f"{prefix}_{i:03d}.png"
        Image.fromarray(worldgen.to_uint8(img.float().numpy())).save(path)
        paths.append(path)
    return paths


def silhouette(field: RadianceField, pose: CameraPose, samples_per_ray: int = 64) -> np.ndarray:
    with torch.no_grad():
        return (render(field, pose, samples_per_ray).opacity > 0.5).numpy()
