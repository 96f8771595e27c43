"""Deterministic synthetic geotagged photo world.

Two modes:

* ``city``: a bounding box sliced into K rectangular districts. An image taken at a
  tag shows a sky band holding a skyline of the city's landmark markers (placed at
  their compass bearing from the tag, taller when closer) above a street band
  textured in the district palette, with one glyph per caption token drawn in the
  district's accent color.
* ``landmark``: a composite of boxes and spheres rendered by ray casting from a
  camera placed at the tag's azimuth around the landmark center.

Everything is a pure function of ``(WorldSpec, tag, caption, seed)``.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import geo
from .errors import ConfigError, DataError, RangeError, VocabularyError
from .geo import BoundingBox, GeoTag

CITY_VOCAB = (
    "statue", "tree", "bus", "car", "person", "fountain",
    "tower", "bridge", "sign", "bench", "boat", "building",
)
LANDMARK_PROMPT = "a photo of landmark"
LANDMARK_VOCAB = tuple(LANDMARK_PROMPT.split())
TEXTURES = ("stripes", "checker", "dots", "solid")
MARKERS = {  # skyline marker id -> color; these colors are kept out of district palettes
    "obelisk": (1.0, 1.0, 1.0),
    "dome": (0.0, 0.0, 0.0),
    "spire": (1.0, 0.0, 1.0),
    "arch": (0.0, 1.0, 1.0),
}
CITY_BOX = BoundingBox(-74.02, -73.93, 40.70, 40.80)
LANDMARK_CENTER = GeoTag(2.2945, 48.8584)
LANDMARK_EXTENT = 0.01
LANDMARK_RING = (0.004, 0.009)

JITTER_SHIFT_PX = 2
JITTER_BRIGHTNESS = 0.05
SKY_FRACTION = 0.25
SUPERSAMPLE = 3


@dataclass(frozen=True)
class District:
    index: int
    rect: tuple[float, float, float, float]  # x0, x1, y0, y1
    palette: tuple[tuple[float, float, float], ...]  # sky, street, accent
    texture: str
    glyph: str | None = None

    @property
    def polygon(self) -> list[tuple[float, float]]:
        x0, x1, y0, y1 = self.rect
        return [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]

    @property
    def center(self) -> GeoTag:
        x0, x1, y0, y1 = self.rect
        return GeoTag(0.5 * (x0 + x1), 0.5 * (y0 + y1))


@dataclass(frozen=True)
class SkylineMarker:
    glyph: str
    tag: GeoTag
    color: tuple[float, float, float]


@dataclass(frozen=True)
class Primitive:
    kind: str  # "box" or "sphere"
    center: tuple[float, float, float]
    size: tuple[float, ...]  # box half-extents, or (radius,)
    color: tuple[float, float, float]


@dataclass(frozen=True)
class CameraRig:
    radius: float = 3.2
    fov_deg: float = 34.0
    elevation_range: tuple[float, float] = (-30.0, 0.0)


@dataclass(frozen=True)
class WorldSpec:
    mode: str
    seed: int
    image_size: int
    box: BoundingBox
    vocabulary: tuple[str, ...]
    districts: tuple[District, ...] = ()
    markers: tuple[SkylineMarker, ...] = ()
    palette_separation: float = 0.0
    center: GeoTag | None = None
    primitives: tuple[Primitive, ...] = ()
    camera: CameraRig = field(default_factory=CameraRig)

    def to_dict(self) -> dict:
        d = {
            "mode": self.mode,
            "seed": self.seed,
            "image_size": self.image_size,
            "box": self.box.to_dict(),
            "vocabulary": list(self.vocabulary),
        }
        if self.mode == "city":
            d["districts"] = [
                {"index": k.index, "polygon": k.polygon, "palette": k.palette, "texture": k.texture, "glyph": k.glyph}
                for k in self.districts
            ]
            d["markers"] = [{"glyph": m.glyph, "lon": m.tag.lon, "lat": m.tag.lat} for m in self.markers]
            d["palette_separation"] = self.palette_separation
        else:
            d["center"] = {"lon": self.center.lon, "lat": self.center.lat}
            d["primitives"] = [
                {"kind": p.kind, "center": p.center, "size": p.size, "color": p.color} for p in self.primitives
            ]
            d["camera"] = {
                "radius": self.camera.radius,
                "fov_deg": self.camera.fov_deg,
                "elevation_range": list(self.camera.elevation_range),
            }
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def token_ids(self, caption) -> list[int]:
        tokens = caption.split() if isinstance(caption, str) else list(caption)
        try:
            return [self.vocabulary.index(tok) for tok in tokens]
        except ValueError as exc:
            raise VocabularyError(f"caption {tokens} has tokens outside {self.vocabulary}") from exc


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    tag: GeoTag
    caption: list[str]
    azimuth_bin: int | None = None


def make_world(mode: str = "city", seed: int = 0, image_size: int = 32) -> WorldSpec:
    if image_size % 16:
        raise ConfigError(f"image_size must be a multiple of 16, got {image_size}")
    if mode == "city":
        return _make_city(seed, image_size)
    if mode == "landmark":
        return _make_landmark(seed, image_size)
    raise ConfigError(f"unknown world mode {mode!r}")


def world_from_manifest(manifest: dict) -> WorldSpec:
    w = manifest["world"]
    spec = make_world(w["mode"], int(w["seed"]), int(w["image_size"]))
    if spec.hash() != manifest["world_spec_hash"]:
        raise DataError("manifest world hash does not match the regenerated world")
    return spec


# --------------------------------------------------------------------------- city


def _palette_candidates() -> np.ndarray:
    levels = np.linspace(0.1, 0.9, 5)
    grid = np.stack(np.meshgrid(levels, levels, levels, indexing="ij"), -1).reshape(-1, 3)
    markers = np.array(list(MARKERS.values()))
    far = np.min(np.linalg.norm(grid[:, None] - markers[None], axis=-1), axis=1) > 0.3
    return grid[far]


def _make_city(seed: int, size: int) -> WorldSpec:
    rng = np.random.default_rng([seed, 101])
    box = CITY_BOX
    n_cols = n_rows = 3
    xs = _jittered_cuts(rng, box.x_min, box.x_max, n_cols)
    rects = []
    for c in range(n_cols):
        ys = _jittered_cuts(rng, box.y_min, box.y_max, n_rows)
        for r in range(n_rows):
            rects.append((xs[c], xs[c + 1], ys[r], ys[r + 1]))
    k = len(rects)

    cands = _palette_candidates()
    textures = [TEXTURES[i % len(TEXTURES)] for i in rng.permutation(k)]
    # greedy farthest-point colors, then reshuffle until district means are well apart
    chosen = [int(rng.integers(len(cands)))]
    while len(chosen) < 3 * k:
        d = np.min(np.linalg.norm(cands[:, None] - cands[chosen][None], axis=-1), axis=1)
        chosen.append(int(np.argmax(d)))
    colors = cands[chosen]
    best = None
    for _ in range(200):
        perm = rng.permutation(3 * k)
        palettes = [tuple(tuple(float(c) for c in colors[perm[3 * i + j]]) for j in range(3)) for i in range(k)]
        means = np.array([_canonical_mean(p, t, size) for p, t in zip(palettes, textures)])
        gap = np.min([np.linalg.norm(means[i] - means[j]) for i in range(k) for j in range(i + 1, k)])
        if best is None or gap > best[0]:
            best = (gap, palettes)
        if gap >= 0.15:
            break
    gap, palettes = best

    marker_districts = sorted(rng.choice(k, size=len(MARKERS), replace=False).tolist())
    glyph_of = dict(zip(marker_districts, MARKERS))
    districts = tuple(
        District(i, tuple(float(v) for v in rects[i]), palettes[i], textures[i], glyph_of.get(i))
        for i in range(k)
    )
    markers = []
    for i in marker_districts:
        x0, x1, y0, y1 = rects[i]
        fx, fy = rng.uniform(0.3, 0.7, size=2)
        markers.append(SkylineMarker(glyph_of[i], GeoTag(x0 + fx * (x1 - x0), y0 + fy * (y1 - y0)), MARKERS[glyph_of[i]]))
    return WorldSpec(
        mode="city",
        seed=seed,
        image_size=size,
        box=box,
        vocabulary=CITY_VOCAB,
        districts=districts,
        markers=tuple(markers),
        palette_separation=round(0.5 * float(gap), 6),
    )


def _jittered_cuts(rng, lo: float, hi: float, n: int) -> list[float]:
    inner = (np.arange(1, n) + rng.uniform(-0.2, 0.2, size=n - 1)) / n
    return [lo] + [float(lo + f * (hi - lo)) for f in inner] + [hi]


def district_of(spec: WorldSpec, tag: GeoTag) -> int:
    """Exact ground-truth district lookup (half-open cells, closed on the box's max edges)."""
    if not spec.box.contains(tag):
        raise RangeError(f"{tag} lies outside {spec.box}")
    for d in spec.districts:
        x0, x1, y0, y1 = d.rect
        in_x = x0 <= tag.lon < x1 or (x1 == spec.box.x_max and tag.lon == x1)
        in_y = y0 <= tag.lat < y1 or (y1 == spec.box.y_max and tag.lat == y1)
        if in_x and in_y:
            return d.index
    raise RangeError(f"{tag} fell between districts")


def _texture_mask(texture: str, size: int, dx: int, dy: int) -> np.ndarray:
    """1 where the street band shows the sky color, 0 where it shows the street color."""
    s = max(1, size // 32)
    yy, xx = np.mgrid[0:size, 0:size]
    xx = xx - dx
    yy = yy - dy
    if texture == "stripes":
        return ((xx // (3 * s)) % 2 == 0).astype(np.float32)
    if texture == "checker":
        return (((xx // (4 * s)) + (yy // (4 * s))) % 2 == 0).astype(np.float32)
    if texture == "dots":
        return (((xx % (6 * s)) < 2 * s) & ((yy % (6 * s)) < 2 * s)).astype(np.float32)
    return np.zeros((size, size), np.float32)


def _background(palette, texture: str, size: int, dx: int, dy: int) -> np.ndarray:
    sky = np.asarray(palette[0], np.float32)
    street = np.asarray(palette[1], np.float32)
    horizon = int(round(SKY_FRACTION * size))
    m = _texture_mask(texture, size, dx, dy)[..., None]
    img = m * sky + (1.0 - m) * street
    img[:horizon] = sky
    return img


def _canonical_mean(palette, texture: str, size: int) -> np.ndarray:
    return _background(palette, texture, size, 0, 0).reshape(-1, 3).mean(0)


def _supersampled(fn, cx: float, cy: float, half: float, size: int) -> np.ndarray:
    """Anti-aliased coverage of a shape given in glyph-local coords ``[-1, 1]^2``."""
    n = SUPERSAMPLE
    offs = (np.arange(n) + 0.5) / n
    py = (np.arange(size)[:, None] + offs[None, :]).reshape(-1)
    u = (py[None, :] - cx) / half
    v = (py[:, None] - cy) / half
    cover = fn(np.broadcast_to(u, (len(py), len(py))), np.broadcast_to(v, (len(py), len(py)))).astype(np.float32)
    return cover.reshape(size, n, size, n).mean(axis=(1, 3))


def _rect(u, v, x0, x1, y0, y1):
    return (u >= x0) & (u <= x1) & (v >= y0) & (v <= y1)


def _disc(u, v, cx, cy, r):
    return (u - cx) ** 2 + (v - cy) ** 2 <= r * r


# glyph shapes in local coords: u right, v down, both in [-1, 1]
GLYPHS = {
    "statue": lambda u, v: _rect(u, v, -0.6, 0.6, 0.6, 1.0) | _rect(u, v, -0.2, 0.2, -0.4, 0.6) | _disc(u, v, 0, -0.65, 0.3),
    "tree": lambda u, v: ((v <= 0.4) & (v >= -1.0) & (np.abs(u) <= (v + 1.0) * 0.55)) | _rect(u, v, -0.15, 0.15, 0.4, 1.0),
    "bus": lambda u, v: _rect(u, v, -1.0, 1.0, -0.4, 0.6) & ~(_rect(u, v, -0.8, 0.8, -0.25, 0.05) & ((u * 5).astype(int) % 2 == 0)),
    "car": lambda u, v: _rect(u, v, -1.0, 1.0, 0.0, 0.6) | _rect(u, v, -0.5, 0.5, -0.4, 0.0) | _disc(u, v, -0.55, 0.7, 0.25) | _disc(u, v, 0.55, 0.7, 0.25),
    "person": lambda u, v: _disc(u, v, 0, -0.7, 0.28) | _rect(u, v, -0.2, 0.2, -0.4, 0.3) | _rect(u, v, -0.45, -0.2, 0.3, 1.0) | _rect(u, v, 0.2, 0.45, 0.3, 1.0),
    "fountain": lambda u, v: (_disc(u, v, 0, 0.3, 0.8) & (v >= 0.3)) | _rect(u, v, -0.12, 0.12, -1.0, 0.3),
    "tower": lambda u, v: _rect(u, v, -0.3, 0.3, -1.0, 1.0),
    "bridge": lambda u, v: _rect(u, v, -1.0, 1.0, -0.2, 0.8) & ~(_disc(u, v, 0, 0.8, 0.6)),
    "sign": lambda u, v: _rect(u, v, -0.6, 0.6, -1.0, 0.0) | _rect(u, v, -0.1, 0.1, 0.0, 1.0),
    "bench": lambda u, v: _rect(u, v, -1.0, 1.0, -0.1, 0.2) | _rect(u, v, -0.9, -0.7, 0.2, 0.8) | _rect(u, v, 0.7, 0.9, 0.2, 0.8),
    "boat": lambda u, v: ((v >= 0.3) & (v <= 0.9) & (np.abs(u) <= 1.0 - 0.6 * (v - 0.3))) | _rect(u, v, -0.08, 0.08, -1.0, 0.3),
    "building": lambda u, v: _rect(u, v, -0.7, 0.7, -0.9, 1.0) & ~(_rect(u, v, -0.5, 0.5, -0.7, 0.8) & (((u + 1.0) * 3.5).astype(int) % 2 == 1) & (((v + 1.0) * 3.5).astype(int) % 2 == 1)),
}


def _skyline(spec: WorldSpec, img: np.ndarray, tag: GeoTag) -> None:
    size = spec.image_size
    horizon = SKY_FRACTION * size
    n = geo.normalize(tag, spec.box)
    n_sub = SUPERSAMPLE
    offs = (np.arange(n_sub) + 0.5) / n_sub
    xs = (np.arange(size)[:, None] + offs).reshape(-1)
    ys = (np.arange(int(horizon))[:, None] + offs).reshape(-1)
    # nearer markers are drawn last so they occlude farther ones
    order = []
    for m in spec.markers:
        nm = geo.normalize(m.tag, spec.box)
        du, dv = nm.u - n.u, nm.v - n.v
        order.append((math.hypot(du, dv), du, dv, m))
    for dist, du, dv, m in sorted(order, key=lambda o: -o[0]):
        bearing = 0.0 if dist == 0 else math.degrees(math.atan2(du, dv))
        col = (bearing + 180.0) / 360.0 * size
        height = horizon * (0.25 + 0.75 * max(0.0, 1.0 - dist / 2.0))
        half_w = 1.0 * size / 32
        dx = np.abs(((xs - col + size / 2) % size) - size / 2)
        inside = (dx[None, :] <= half_w) & (ys[:, None] >= horizon - height)
        cover = inside.astype(np.float32).reshape(int(horizon), n_sub, size, n_sub).mean(axis=(1, 3))[..., None]
        band = img[: int(horizon)]
        img[: int(horizon)] = band * (1 - cover) + cover * np.asarray(m.color, np.float32)


def _jitter(seed: int) -> tuple[int, int, float]:
    rng = np.random.default_rng([seed, 7])
    dx, dy = rng.integers(-JITTER_SHIFT_PX, JITTER_SHIFT_PX + 1, size=2)
    return int(dx), int(dy), float(rng.uniform(-JITTER_BRIGHTNESS, JITTER_BRIGHTNESS))


def render_city_sample(spec: WorldSpec, tag: GeoTag, caption, seed: int) -> Sample:
    if spec.mode != "city":
        raise ConfigError("render_city_sample needs a city world")
    tokens = caption.split() if isinstance(caption, str) else list(caption)
    spec.token_ids(tokens)
    if not 1 <= len(tokens) <= 3:
        raise VocabularyError(f"captions carry 1-3 tokens, got {tokens}")
    district = spec.districts[district_of(spec, tag)]
    size = spec.image_size
    dx, dy, bright = _jitter(seed)
    img = _background(district.palette, district.texture, size, dx, dy)
    _skyline(spec, img, tag)
    accent = np.asarray(district.palette[2], np.float32)
    half = 0.15 * size
    cy = 0.64 * size + dy
    for i, tok in enumerate(tokens):
        cx = size * (i + 1) / (len(tokens) + 1) + dx
        cover = _supersampled(GLYPHS[tok], cx, cy, half, size)[..., None]
        img = img * (1 - cover) + cover * accent
    img = np.clip(img * (1.0 + bright), 0.0, 1.0).astype(np.float32)
    return Sample(img, tag, tokens)


def classify_district(spec: WorldSpec, image: np.ndarray) -> int:
    """Nearest-palette classifier: mean per-pixel distance to each district's palette."""
    return int(np.argmin(palette_costs(spec, image)))


def palette_costs(spec: WorldSpec, image: np.ndarray) -> np.ndarray:
    px = np.asarray(image, np.float64).reshape(-1, 3)
    pal = np.array([d.palette for d in spec.districts])  # (K, 3, 3)
    dist = np.linalg.norm(px[None, :, None, :] - pal[:, None, :, :], axis=-1)  # (K, P, 3)
    return dist.min(axis=2).mean(axis=1)


# ----------------------------------------------------------------------- landmark


def _make_landmark(seed: int, size: int) -> WorldSpec:
    prims = (
        Primitive("box", (0.0, 0.0, -0.48), (0.6, 0.5, 0.12), (0.55, 0.55, 0.62)),
        Primitive("box", (0.28, 0.22, 0.18), (0.14, 0.14, 0.55), (0.85, 0.25, 0.2)),
        Primitive("sphere", (-0.28, -0.18, -0.06), (0.3,), (0.95, 0.75, 0.15)),
        Primitive("box", (-0.12, 0.32, -0.2), (0.32, 0.09, 0.09), (0.2, 0.35, 0.85)),
    )
    box = BoundingBox(
        LANDMARK_CENTER.lon - LANDMARK_EXTENT,
        LANDMARK_CENTER.lon + LANDMARK_EXTENT,
        LANDMARK_CENTER.lat - LANDMARK_EXTENT,
        LANDMARK_CENTER.lat + LANDMARK_EXTENT,
    )
    spec = WorldSpec(
        mode="landmark",
        seed=seed,
        image_size=size,
        box=box,
        vocabulary=LANDMARK_VOCAB,
        center=LANDMARK_CENTER,
        primitives=prims,
    )
    _assert_asymmetric(spec)
    return spec


def _assert_asymmetric(spec: WorldSpec, min_diff: float = 0.01) -> None:
    views = [render_view(spec, geo.bin_center(k), -15.0)[0] for k in range(geo.NUM_ANGLE_BINS)]
    flat = np.stack(views).reshape(len(views), -1)
    diff = np.abs(flat[:, None] - flat[None]).mean(-1)
    np.fill_diagonal(diff, np.inf)
    if diff.min() < min_diff:
        raise ConfigError("landmark composite looks rotationally symmetric")


def camera_frame(azimuth_deg: float, elevation_deg: float, radius: float):
    """Camera origin and orthonormal (right, up, forward) basis looking at the origin."""
    a, e = math.radians(azimuth_deg), math.radians(elevation_deg)
    origin = radius * np.array([math.cos(e) * math.sin(a), math.cos(e) * math.cos(a), math.sin(e)])
    forward = -origin / np.linalg.norm(origin)
    right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    return origin, right, up, forward


def camera_rays(azimuth_deg: float, elevation_deg: float, size: int, rig: CameraRig, supersample: int = 1):
    """Pinhole rays for a ``size x size`` image; returns origins and unit directions (N, 3), row-major."""
    origin, right, up, forward = camera_frame(azimuth_deg, elevation_deg, rig.radius)
    n = size * supersample
    focal = 0.5 * n / math.tan(math.radians(rig.fov_deg) / 2)
    coords = np.arange(n) + 0.5 - n / 2
    px, py = np.meshgrid(coords, coords, indexing="xy")
    dirs = forward[None] * focal + right[None] * px.reshape(-1, 1) - up[None] * py.reshape(-1, 1)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return np.broadcast_to(origin, dirs.shape).copy(), dirs


def _intersect(prim: Primitive, o: np.ndarray, d: np.ndarray):
    """Nearest positive hit distance (inf if none) and the surface normal there."""
    c = np.asarray(prim.center)
    if prim.kind == "sphere":
        r = prim.size[0]
        oc = o - c
        b = np.sum(oc * d, axis=1)
        disc = b * b - (np.sum(oc * oc, axis=1) - r * r)
        sq = np.sqrt(np.maximum(disc, 0.0))
        t = np.where(-b - sq > 0, -b - sq, -b + sq)
        t = np.where((disc >= 0) & (t > 0), t, np.inf)
        normal = (o + np.where(np.isfinite(t), t, 0)[:, None] * d - c) / r
        return t, normal
    h = np.asarray(prim.size)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (c - h - o) * inv
        t1 = (c + h - o) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    t_near = np.nanmax(tmin, axis=1)
    t_far = np.nanmin(tmax, axis=1)
    hit = (t_near <= t_far) & (t_far > 0)
    t = np.where(hit, np.where(t_near > 0, t_near, t_far), np.inf)
    axis = np.nanargmax(tmin, axis=1)
    normal = np.zeros_like(o)
    normal[np.arange(len(o)), axis] = -np.sign(d[np.arange(len(o)), axis])
    return t, normal


LIGHT_DIR = np.array([0.35, -0.55, 0.76]) / np.linalg.norm([0.35, -0.55, 0.76])


def render_view(spec: WorldSpec, azimuth_deg: float, elevation_deg: float, size: int | None = None,
                supersample: int = SUPERSAMPLE):
    """Ray-cast the composite; returns (rgb (H, W, 3) on white, coverage (H, W)) in [0, 1]."""
    size = size or spec.image_size
    o, d = camera_rays(azimuth_deg, elevation_deg, size, spec.camera, supersample)
    best = np.full(len(o), np.inf)
    color = np.ones((len(o), 3))
    for prim in spec.primitives:
        t, normal = _intersect(prim, o, d)
        closer = t < best
        shade = 0.6 + 0.4 * np.clip(normal @ LIGHT_DIR, 0.0, 1.0)
        color[closer] = np.asarray(prim.color)[None] * shade[closer, None]
        best = np.where(closer, t, best)
    hit = np.isfinite(best).astype(np.float64)
    n = size * supersample
    rgb = color.reshape(size, supersample, size, supersample, 3).mean(axis=(1, 3))
    cover = hit.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
    return rgb.astype(np.float32), cover.astype(np.float32)


def landmark_elevation(spec: WorldSpec, seed: int) -> float:
    lo, hi = spec.camera.elevation_range
    return float(np.random.default_rng([seed, 13]).uniform(lo, hi))


def render_landmark_sample(spec: WorldSpec, tag: GeoTag, seed: int = 0, elevation: float | None = None) -> Sample:
    if spec.mode != "landmark":
        raise ConfigError("render_landmark_sample needs a landmark world")
    a = geo.azimuth(tag, spec.center)
    e = landmark_elevation(spec, seed) if elevation is None else elevation
    rgb, _ = render_view(spec, a, e)
    return Sample(rgb, tag, list(LANDMARK_VOCAB), geo.discretize_angle(a))


def inside_primitives(spec: WorldSpec, points: np.ndarray) -> np.ndarray:
    """Boolean mask of points (N, 3) lying inside any primitive."""
    inside = np.zeros(len(points), bool)
    for p in spec.primitives:
        c = np.asarray(p.center)
        if p.kind == "sphere":
            inside |= np.sum((points - c) ** 2, axis=1) <= p.size[0] ** 2
        else:
            inside |= np.all(np.abs(points - c) <= np.asarray(p.size), axis=1)
    return inside


def grid_points(resolution: int, bound: float = 1.0) -> np.ndarray:
    """Voxel centers of a ``resolution^3`` grid over ``[-bound, bound]^3``, indexed [x, y, z]."""
    c = (np.arange(resolution) + 0.5) / resolution * 2 * bound - bound
    return np.stack(np.meshgrid(c, c, c, indexing="ij"), -1).reshape(-1, 3)


def occupancy_grid(spec: WorldSpec, resolution: int = 32, bound: float = 1.0) -> np.ndarray:
    return inside_primitives(spec, grid_points(resolution, bound)).reshape((resolution,) * 3)


# ------------------------------------------------------------------------ dataset


def _sample_tag(spec: WorldSpec, rng: np.random.Generator) -> GeoTag:
    if spec.mode == "city":
        b = spec.box
        return GeoTag(float(rng.uniform(b.x_min, b.x_max)), float(rng.uniform(b.y_min, b.y_max)))
    a = math.radians(rng.uniform(-180.0, 180.0))
    r = rng.uniform(*LANDMARK_RING)
    return GeoTag(spec.center.lon + r * math.sin(a), spec.center.lat + r * math.cos(a))


def _sample_caption(spec: WorldSpec, rng: np.random.Generator) -> list[str]:
    if spec.mode == "landmark":
        return list(LANDMARK_VOCAB)
    n = int(rng.integers(1, 4))
    return [spec.vocabulary[i] for i in rng.choice(len(spec.vocabulary), size=n, replace=False)]


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def generate_dataset(spec: WorldSpec, n: int, root, start: int = 0) -> dict:
    """Render ``n`` samples under ``root``; the manifest is written last, atomically.

    Sample ``i`` draws from the stream ``(spec.seed, start + i)``, so disjoint
    ``start`` ranges give disjoint splits of the same world.
    """
    if n < 1:
        raise ConfigError("dataset needs at least one sample")
    root = Path(root)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        manifest_path = root / "manifest.json"
        if manifest_path.exists():
            manifest_path.unlink()
    except OSError as exc:
        raise DataError(f"cannot write dataset to {root}: {exc}") from exc
    files, lines = [], []
    for i in range(n):
        rng = np.random.default_rng([spec.seed, start + i])
        tag = _sample_tag(spec, rng)
        caption = _sample_caption(spec, rng)
        seed = int(rng.integers(2**31))
        if spec.mode == "city":
            sample = render_city_sample(spec, tag, caption, seed)
        else:
            sample = render_landmark_sample(spec, tag, seed)
        rel = f"images/{i:06d}.png"
        Image.fromarray(to_uint8(sample.image)).save(root / rel)
        rec = {"file": rel, "lon": tag.lon, "lat": tag.lat, "caption": " ".join(caption)}
        if sample.azimuth_bin is not None:
            rec["azimuth_bin"] = sample.azimuth_bin
        files.append(rel)
        lines.append(json.dumps(rec, sort_keys=True))
    (root / "samples.jsonl").write_text("\n".join(lines) + "\n")
    manifest = {
        "world_spec_hash": spec.hash(),
        "world": {"mode": spec.mode, "seed": spec.seed, "image_size": spec.image_size},
        "bounding_box": spec.box.to_dict(),
        "count": n,
        "start": start,
        "files": files,
        "vocabulary": list(spec.vocabulary),
    }
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, manifest_path)
    return manifest


@dataclass
class Dataset:
    """A generated dataset loaded into memory."""

    root: Path
    manifest: dict
    spec: WorldSpec
    images: np.ndarray  # (N, H, W, 3) uint8
    tags: np.ndarray  # (N, 2) lon, lat
    captions: list[list[str]]
    azimuth_bins: np.ndarray | None

    def __len__(self) -> int:
        return len(self.images)

    @property
    def normalized_tags(self) -> np.ndarray:
        return geo.normalize_array(self.tags, self.spec.box)


def load_dataset(root) -> Dataset:
    root = Path(root)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
        records = [json.loads(line) for line in (root / "samples.jsonl").read_text().splitlines() if line]
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"no readable dataset at {root}: {exc}") from exc
    spec = world_from_manifest(manifest)
    if len(records) != manifest["count"]:
        raise DataError("samples.jsonl length disagrees with the manifest count")
    images = np.stack([np.asarray(Image.open(root / r["file"]).convert("RGB")) for r in records])
    tags = np.array([[r["lon"], r["lat"]] for r in records], dtype=np.float64)
    captions = [r["caption"].split() for r in records]
    bins = None
    if spec.mode == "landmark":
        bins = np.array([r["azimuth_bin"] for r in records], dtype=np.int64)
    return Dataset(root, manifest, spec, images, tags, captions, bins)
