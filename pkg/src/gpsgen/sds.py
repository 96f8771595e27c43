"""Score distillation of the angle-conditioned denoiser into a radiance field.

Each step renders a random view, noises it, and asks the frozen denoiser (with
the view's azimuth bin as the angle token) for a guided noise estimate. The
residual against the injected noise, weighted by ``sigma_t**2``, is pushed back
through the renderer only; the denoiser never receives gradients.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from . import geo, nerf, worldgen
from .diffusion.model import GeoDiffusion, pad_text
from .diffusion.schedule import NoiseSchedule, forward_diffuse
from .errors import CheckpointError, ConfigError, NumericError

log = logging.getLogger(__name__)

VIEW_BINS = (0, 9, 18, 27)  # 0, 90, 180 and -90 degrees


@dataclass(frozen=True)
class SdsConfig:
    omega: float = 30.0
    steps: int = 2000
    lr: float = 0.01
    t_start: tuple[float, float] = (0.98, 0.98)
    t_end: tuple[float, float] = (0.02, 0.50)
    elevation_range: tuple[float, float] = (-30.0, 0.0)
    radius: float = 3.2
    fov_deg: float = 34.0
    render_size: int = 64
    samples_per_ray: int = 48
    lambda_orient: float = 0.01
    lambda_opacity: float = 0.001
    orient_resolution: int = 16
    orient_samples: int = 32
    seed: int = 0
    null_angle: bool = False
    view_prompt: bool = False
    snapshot_every: int = 500
    turntable_views: int = 12
    num_frequencies: int = 6
    hidden: int = 64
    layers: int = 3
    blob_density: float = 10.0
    blob_radius: float = 0.5
    threshold: float = nerf.DEFAULT_THRESHOLD

    def __post_init__(self):
        for lo, hi in (self.t_start, self.t_end):
            if not (0 < lo <= 1 and 0 < hi <= 1 and lo <= hi):
                raise ConfigError(f"timestep interval ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")
        if self.t_end[0] > self.t_start[0] or self.t_end[1] > self.t_start[1]:
            raise ConfigError("timestep interval must shrink toward its end values")
        lo, hi = self.elevation_range
        if not lo <= hi <= 0:
            raise ConfigError("camera elevations must lie at or below the horizon")
        if self.steps < 0 or self.lr <= 0 or self.omega < 0:
            raise ConfigError("steps >= 0, lr > 0 and omega >= 0 required")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("t_start", "t_end", "elevation_range"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SdsConfig":
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ConfigError(f"unknown sds config keys {sorted(set(d) - known)}")
        d = dict(d)
        for k in ("t_start", "t_end", "elevation_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def anneal_interval(step: int, total: int, start=(0.98, 0.98), end=(0.02, 0.50)) -> tuple[float, float]:
    """Linear interpolation of both interval endpoints from ``start`` (step 0) to ``end`` (step total)."""
    if total <= 0:
        return float(start[0]), float(start[1])
    if not 0 <= step <= total:
        raise ConfigError(f"step {step} outside [0, {total}]")
    f = step / total
    return (1 - f) * start[0] + f * end[0], (1 - f) * start[1] + f * end[1]


def timestep_index(frac: float, T: int) -> int:
    return int(min(T - 1, max(0, round(frac * (T - 1)))))


def sample_camera(rng: np.random.Generator, config: SdsConfig) -> nerf.CameraPose:
    a = float(rng.uniform(-180.0, 180.0))
    if a == -180.0:
        a = 180.0
    e = float(rng.uniform(*config.elevation_range))
    return nerf.CameraPose(a, e, config.radius, config.fov_deg, config.render_size)


def cfg_3d(eps_cond, eps_uncond, omega: float):
    """Guidance against the prediction with both text and angle nulled."""
    if tuple(np.shape(eps_cond)) != tuple(np.shape(eps_uncond)):
        raise ConfigError("noise estimates differ in shape")
    return (1.0 + omega) * eps_cond - omega * eps_uncond


def sds_weight(schedule: NoiseSchedule, t: int) -> float:
    return float(schedule.sigma[t]) ** 2


def sds_surrogate(x: torch.Tensor, eps_hat: torch.Tensor, eps: torch.Tensor, weight: float) -> torch.Tensor:
    """Scalar whose gradient w.r.t. anything upstream of ``x`` is ``weight * (eps_hat - eps) . dx``."""
    return weight * ((eps_hat - eps).detach() * x).sum()


@dataclass
class SdsState:
    field: nerf.CoordinateField
    optimizer: torch.optim.Optimizer
    config: SdsConfig
    prompt_ids: list[int]
    step: int = 0
    trace: list[dict] = field(default_factory=list)


def init_state(config: SdsConfig, prompt_ids: list[int]) -> SdsState:
    torch.manual_seed(config.seed)
    f = nerf.CoordinateField(config.num_frequencies, config.hidden, config.layers,
                             blob_density=config.blob_density, blob_radius=config.blob_radius)
    opt = torch.optim.Adam(f.parameters(), lr=config.lr)
    return SdsState(f, opt, config, list(prompt_ids))


def conditioning_bin(pose: nerf.CameraPose, config: SdsConfig) -> int:
    b = geo.discretize_angle(pose.azimuth)
    if config.view_prompt:
        # coarse view labels: snap to the nearest of four canonical directions
        return min(VIEW_BINS, key=lambda v: min((b - v) % 36, (v - b) % 36))
    return b


def sds_step(state: SdsState, model: GeoDiffusion, schedule: NoiseSchedule, rng: np.random.Generator) -> SdsState:
    cfg = state.config
    fld = state.field
    pose = sample_camera(rng, cfg)
    gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
    out = nerf.render(fld, pose, cfg.samples_per_ray, generator=gen)
    size = model.config.image_size
    img = out.rgb.permute(2, 0, 1)[None]
    if img.shape[-1] != size:
        img = F.interpolate(img, size=(size, size), mode="area")
    x = img * 2.0 - 1.0

    lo, hi = anneal_interval(state.step, cfg.steps, cfg.t_start, cfg.t_end)
    t = timestep_index(float(rng.uniform(lo, hi)), schedule.T)
    eps = torch.randn(x.shape, generator=gen)
    b = conditioning_bin(pose, cfg)
    with torch.no_grad():
        z = forward_diffuse(x.detach(), t, eps, schedule)
        ids, mask = pad_text([state.prompt_ids] * 2, model.config.max_text)
        keep_geo = torch.tensor([False, not cfg.null_angle])
        rows = model.condition(ids, mask, model.geo_tokens(torch.tensor([0, b])),
                               torch.tensor([False, True]), keep_geo)
        pred = model(z.expand(2, -1, -1, -1), torch.full((2,), t, dtype=torch.long), rows)
        eps_hat = cfg_3d(pred[1:2], pred[0:1], cfg.omega)
    w = sds_weight(schedule, t)
    if not torch.isfinite(eps_hat).all():
        raise NumericError(f"non-finite guided noise at step {state.step} (t={t}, azimuth {pose.azimuth:.1f})")

    loss_sds = sds_surrogate(x, eps_hat, eps, w)
    loss = loss_sds
    orient = torch.zeros(())
    if cfg.lambda_orient > 0:
        orient = nerf.orientation_reg(fld, [pose], cfg.orient_samples, cfg.orient_resolution, generator=gen)
        loss = loss + cfg.lambda_orient * orient
    opac = nerf.opacity_reg(out)
    loss = loss + cfg.lambda_opacity * opac

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    for name, p in fld.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient for {name} at step {state.step} (t={t})")
    state.optimizer.step()
    state.trace.append({"step": state.step, "t": t, "azimuth": round(pose.azimuth, 6), "bin": int(b),
                        "sds": float(loss_sds.detach()), "orient": float(orient.detach()),
                        "opacity": float(opac.detach())})
    state.step += 1
    return state


def save_field(path, state: SdsState, extra: dict | None = None) -> str:
    names = {id(p): n for n, p in state.field.named_parameters()}
    tensors = ckpt.state_tensors(state.field)
    opt_t, opt_steps = ckpt.optimizer_tensors(state.optimizer, names)
    tensors.update(opt_t)
    header = {"kind": "field", "field": state.field.config(), "config": state.config.to_dict(),
              "config_hash": ckpt.config_hash(state.config.to_dict()), "step": state.step,
              "optimizer_steps": opt_steps, "prompt_ids": state.prompt_ids}
    header.update(extra or {})
    return ckpt.save_checkpoint(path, header, tensors)


def load_field(path) -> tuple[nerf.CoordinateField, dict]:
    header, tensors = ckpt.load_checkpoint(path)
    if header.get("kind") != "field":
        raise CheckpointError(f"{path} does not hold a radiance field")
    f = nerf.CoordinateField(**header["field"])
    ckpt.load_module(f, tensors)
    return f, header


def _resume_state(path, config: SdsConfig) -> SdsState:
    header, tensors = ckpt.load_checkpoint(path)
    old = SdsConfig.from_dict(header["config"])
    if {**old.to_dict(), "steps": config.steps} != config.to_dict():
        raise CheckpointError("resume config differs from the snapshot beyond the step budget")
    state = init_state(config, header["prompt_ids"])
    ckpt.load_module(state.field, tensors)
    names = {id(p): n for n, p in state.field.named_parameters()}
    ckpt.restore_optimizer(state.optimizer, names, tensors, header["optimizer_steps"])
    state.step = int(header["step"])
    return state


@dataclass
class FieldMetrics:
    occupancy_iou: float
    silhouette_iou: float

    def to_dict(self) -> dict:
        return {"occupancy_iou": self.occupancy_iou, "silhouette_iou": self.silhouette_iou}


def evaluate_field(fld: nerf.RadianceField, spec: worldgen.WorldSpec, threshold: float = nerf.DEFAULT_THRESHOLD,
                   resolution: int = 32, azimuth: float = 0.0, elevation: float = -15.0,
                   render_size: int = 64) -> FieldMetrics:
    """Occupancy IoU at ``resolution^3`` and silhouette IoU of one view against the analytic landmark."""
    grid = nerf.export_density(fld, resolution, threshold)
    occ = nerf.occupancy_iou(grid.occupancy, worldgen.occupancy_grid(spec, resolution))
    pose = nerf.CameraPose(azimuth, elevation, spec.camera.radius, spec.camera.fov_deg, render_size)
    _, cover = worldgen.render_view(spec, azimuth, elevation, size=render_size)
    sil = nerf.occupancy_iou(nerf.silhouette(fld, pose), cover > 0.5)
    return FieldMetrics(occ, sil)


@dataclass
class DistillResult:
    field: nerf.CoordinateField
    occupancy: nerf.OccupancyGrid
    trace: list[dict]
    denoiser_hash_before: str
    denoiser_hash_after: str
    run_dir: Path | None


def distill(model: GeoDiffusion, schedule: NoiseSchedule, config: SdsConfig, prompt_ids: list[int],
            run_dir=None, resume=None) -> DistillResult:
    if model.config.cond != "angle":
        raise ConfigError("distillation needs an angle-conditioned denoiser")
    model.eval()
    model.requires_grad_(False)
    before = ckpt.module_hash(model)
    state = _resume_state(resume, config) if resume is not None else init_state(config, prompt_ids)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(ckpt.canonical_json(config.to_dict()) + "\n")
        (run_dir / "snapshots").mkdir(exist_ok=True)
    trace_lines = []
    while state.step < config.steps:
        rng = np.random.default_rng([config.seed, state.step])
        sds_step(state, model, schedule, rng)
        trace_lines.append(state.trace[-1])
        if state.step % 100 == 0:
            recent = state.trace[-100:]
            log.info("sds step %d  sds %.3f  orient %.4f  opacity %.4f", state.step,
                     np.mean([r["sds"] for r in recent]), np.mean([r["orient"] for r in recent]),
                     np.mean([r["opacity"] for r in recent]))
        if run_dir is not None and config.snapshot_every and state.step % config.snapshot_every == 0:
            snap = run_dir / "snapshots" / f"step_{state.step:06d}"
            save_field(snap.with_suffix(".ckpt"), state)
            nerf.turntable(state.field, snap, config.turntable_views, radius=config.radius, fov_deg=config.fov_deg)
    after = ckpt.module_hash(model)
    grid = nerf.export_density(state.field, 32, config.threshold)
    if run_dir is not None:
        save_field(run_dir / "field.ckpt", state, {"denoiser_hash": after})
        nerf.write_occupancy(run_dir / "occupancy.bin", grid)
        nerf.turntable(state.field, run_dir / "turntable", config.turntable_views,
                       radius=config.radius, fov_deg=config.fov_deg)
        with open(run_dir / "trace.jsonl", "a" if resume is not None else "w") as fh:
            for rec in trace_lines:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return DistillResult(state.field, grid, state.trace, before, after, run_dir)
