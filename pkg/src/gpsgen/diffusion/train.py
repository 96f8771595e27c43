"""Resumable training for the city (text + GPS) and landmark (text + angle) denoisers.

Landmark training runs in two stages. ``landmark-base`` fits a text-only model
(angle always dropped); ``angle`` starts from those weights, adds the angle
token, and regularizes with a preservation loss on images the base model
generated with the angle nulled.

Every random draw of step ``k`` comes from generators seeded by ``(seed, k)``,
so a resumed run replays the uninterrupted one exactly without any stored RNG
state.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .. import checkpoint as ckpt
from ..errors import CheckpointError, ConfigError, NumericError
from ..worldgen import Dataset, LANDMARK_PROMPT
from .losses import TrainBatch, preservation_loss, recon_loss, total_loss
from .model import DropoutPolicy, GeoDiffusion, ModelConfig, dropout_flags, pad_text
from .schedule import NoiseSchedule, build_schedule

log = logging.getLogger(__name__)

MODES = ("city", "landmark-base", "angle")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "city"
    steps: int = 6000
    batch_size: int = 32
    lr: float = 1e-3
    min_lr_ratio: float = 0.1
    warmup: int = 200
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    T: int = 1000
    schedule: str = "linear"
    channels: int = 48
    width: int = 64
    p_text_only: float = 0.05
    p_gps_only: float = 0.05
    p_uncond: float = 0.05
    lambda_preservation: float = 1.0
    preservation_size: int = 256
    preservation_omega_p: float = 3.5
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown training mode {self.mode!r}; expected one of {MODES}")
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("steps >= 0, batch_size >= 1 and lr > 0 required")
        DropoutPolicy(self.p_text_only, self.p_gps_only, self.p_uncond)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys {sorted(unknown)}")
        return cls(**d)

    @property
    def policy(self) -> DropoutPolicy:
        return DropoutPolicy(self.p_text_only, self.p_gps_only, self.p_uncond)


@dataclass
class TrainData:
    images: torch.Tensor  # (N, 3, H, W) in [-1, 1]
    text_ids: torch.Tensor
    text_mask: torch.Tensor
    geo: torch.Tensor  # (N, 2) float or (N,) long

    def __len__(self) -> int:
        return self.images.shape[0]


def images_to_model(images_uint8: np.ndarray) -> torch.Tensor:
    x = torch.from_numpy(np.ascontiguousarray(images_uint8)).permute(0, 3, 1, 2).to(torch.float32)
    return x / 127.5 - 1.0


def prepare_data(dataset: Dataset, cond: str, max_text: int) -> TrainData:
    ids, mask = pad_text([dataset.spec.token_ids(c) for c in dataset.captions], max_text)
    if cond == "gps":
        geo = torch.from_numpy(dataset.normalized_tags.astype(np.float32))
    else:
        geo = torch.from_numpy(dataset.azimuth_bins.astype(np.int64))
    return TrainData(images_to_model(dataset.images), ids, mask, geo)


def model_config_for(config: TrainConfig, dataset: Dataset) -> ModelConfig:
    return ModelConfig(
        cond="gps" if config.mode == "city" else "angle",
        vocab_size=len(dataset.spec.vocabulary),
        width=config.width,
        channels=config.channels,
        image_size=dataset.spec.image_size,
    )


def lr_at(config: TrainConfig, step: int) -> float:
    """Linear warmup then cosine decay to ``min_lr_ratio * lr``."""
    if config.warmup and step < config.warmup:
        return config.lr * (step + 1) / config.warmup
    span = max(1, config.steps - config.warmup)
    frac = min(1.0, (step - config.warmup) / span)
    return config.lr * (config.min_lr_ratio + (1 - config.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * frac)))


def _step_generators(seed: int, step: int) -> tuple[np.random.Generator, torch.Generator]:
    seq = np.random.SeedSequence([seed, step])
    g = torch.Generator().manual_seed(int(seq.generate_state(1, np.uint64)[0] >> 1))
    return np.random.default_rng(seq), g


def make_batch(data: TrainData, config: TrainConfig, schedule: NoiseSchedule, step: int,
               stream: int = 0) -> TrainBatch:
    rng, g = _step_generators(config.seed * 2 + stream, step)
    idx = torch.randint(len(data), (config.batch_size,), generator=g)
    x0 = data.images[idx]
    # low-discrepancy timesteps: one uniform offset, evenly spaced across the batch
    u = (torch.rand((), generator=g, dtype=torch.float64) + torch.arange(config.batch_size) / config.batch_size) % 1.0
    t = (u * schedule.T).long().clamp(max=schedule.T - 1)
    eps = torch.randn(x0.shape, generator=g)
    keep_text, keep_geo = dropout_flags(config.policy, config.batch_size, rng)
    if config.mode == "landmark-base":
        # text-only base model: the angle is never shown, drop-outs fall back to null
        keep_geo = np.zeros_like(keep_geo)
    return TrainBatch(x0, data.text_ids[idx], data.text_mask[idx], data.geo[idx], t, eps,
                      torch.from_numpy(keep_text), torch.from_numpy(keep_geo))


def build_preservation_set(base: GeoDiffusion, schedule: NoiseSchedule, text_ids: list[int], n: int,
                           seed: int, omega_p: float) -> torch.Tensor:
    """Images sampled from the base model with the angle nulled, in model range [-1, 1]."""
    from ..sampler import GuidanceConfig, SampleRequest, sample

    cfg = GuidanceConfig(omega_p=omega_p, omega_g=0.0)
    reqs = [SampleRequest(text_ids, None, seed=int(s)) for s in np.random.default_rng([seed, 99]).integers(2**31, size=n)]
    out = []
    for i in range(0, n, 64):
        out.append(torch.from_numpy(sample(base, schedule, reqs[i:i + 64], cfg)))
    imgs = torch.cat(out).permute(0, 3, 1, 2)
    return imgs * 2.0 - 1.0


@dataclass
class TrainResult:
    model: GeoDiffusion
    schedule: NoiseSchedule
    losses: list[float]
    checkpoint: Path
    checkpoint_sha256: str


def _param_names(model: torch.nn.Module) -> dict[int, str]:
    return {id(p): n for n, p in model.named_parameters()}


def save_training_checkpoint(path, model, opt, config: TrainConfig, schedule, step: int, losses,
                             dataset_hash: str, extra: dict | None = None) -> str:
    names = _param_names(model)
    opt_t, opt_steps = ckpt.optimizer_tensors(opt, names)
    tensors = ckpt.state_tensors(model)
    tensors.update(opt_t)
    header = {
        "kind": "diffusion",
        "config": config.to_dict(),
        "config_hash": ckpt.config_hash(config.to_dict()),
        "model": model.config.to_dict(),
        "schedule": schedule.to_dict(),
        "step": step,
        "losses": [float(x) for x in losses],
        "dataset_hash": dataset_hash,
        "optimizer_steps": opt_steps,
    }
    if extra:
        header.update(extra)
    return ckpt.save_checkpoint(path, header, tensors)


def load_model(path) -> tuple[GeoDiffusion, NoiseSchedule, dict]:
    """Frozen denoiser from a checkpoint, in eval mode."""
    header, tensors = ckpt.load_checkpoint(path)
    if header.get("kind") != "diffusion":
        raise CheckpointError(f"{path} does not hold a diffusion model")
    model = GeoDiffusion(ModelConfig(**header["model"]))
    ckpt.load_module(model, tensors)
    model.eval()
    return model, NoiseSchedule.from_dict(header["schedule"]), header


def _dataset_hash(dataset: Dataset) -> str:
    return ckpt.config_hash({"world": dataset.manifest["world_spec_hash"], "count": len(dataset)})


def train(dataset: Dataset, config: TrainConfig, run_dir, resume=None, init=None) -> TrainResult:
    """Train (or continue training) and write checkpoints under ``run_dir``.

    ``resume`` continues from a checkpoint of the same run; ``init`` seeds the
    weights of an ``angle`` run from a ``landmark-base`` checkpoint.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    mode_world = "city" if config.mode == "city" else "landmark"
    if dataset.spec.mode != mode_world:
        raise ConfigError(f"training mode {config.mode!r} needs a {mode_world} dataset, got {dataset.spec.mode}")
    if config.mode == "angle" and init is None and resume is None:
        raise ConfigError("angle training starts from a landmark-base checkpoint (init)")

    torch.manual_seed(config.seed)
    mcfg = model_config_for(config, dataset)
    model = GeoDiffusion(mcfg)
    schedule = build_schedule(config.T, config.schedule)
    data = prepare_data(dataset, mcfg.cond, mcfg.max_text)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    names = _param_names(model)
    dhash = _dataset_hash(dataset)
    losses: list[float] = []
    start = 0
    extra = {"world": dataset.manifest["world"], "world_spec_hash": dataset.manifest["world_spec_hash"],
             "bounding_box": dataset.manifest["bounding_box"], "vocabulary": dataset.manifest["vocabulary"]}

    if resume is not None:
        header, tensors = ckpt.load_checkpoint(resume)
        if header.get("kind") != "diffusion":
            raise CheckpointError(f"{resume} does not hold a diffusion model")
        if header["model"] != mcfg.to_dict() or header["schedule"] != schedule.to_dict():
            raise CheckpointError("checkpoint architecture or schedule differs from the config")
        if header["dataset_hash"] != dhash:
            raise CheckpointError("checkpoint was trained on a different dataset")
        old = TrainConfig.from_dict(header["config"])
        if {**old.to_dict(), "steps": config.steps} != config.to_dict():
            raise CheckpointError("resume config differs from the checkpoint beyond the step budget")
        ckpt.load_module(model, tensors)
        ckpt.restore_optimizer(opt, names, tensors, header["optimizer_steps"])
        start = int(header["step"])
        losses = list(header["losses"])
        if start > config.steps:
            raise ConfigError(f"checkpoint is at step {start}, beyond the requested {config.steps}")
        if "init_sha256" in header:
            extra["init_sha256"] = header["init_sha256"]
    elif init is not None:
        header, tensors = ckpt.load_checkpoint(init)
        base_cfg = ModelConfig(**header["model"])
        if base_cfg != mcfg:
            raise CheckpointError("init checkpoint architecture differs from the config")
        ckpt.load_module(model, tensors)
        extra["init_sha256"] = ckpt.file_sha256(init)

    preservation = None
    prompt_ids = None
    if config.mode == "angle":
        prompt_ids = dataset.spec.token_ids(LANDMARK_PROMPT)
        pres_path = run_dir / "preservation.npy"
        if pres_path.exists():
            preservation = torch.from_numpy(np.load(pres_path))
        else:
            if init is None:
                raise ConfigError("preservation set missing from the run directory and no init checkpoint given")
            base, _, _ = load_model(init)
            preservation = build_preservation_set(base, schedule, prompt_ids, config.preservation_size,
                                                  config.seed, config.preservation_omega_p)
            np.save(pres_path, preservation.numpy())
        pids, pmask = pad_text([prompt_ids] * len(preservation), mcfg.max_text)
        pres_data = TrainData(preservation, pids, pmask, torch.zeros(len(preservation), dtype=torch.long))
        extra["preservation_sha256"] = ckpt.file_sha256(pres_path)

    config_path = run_dir / "config.json"
    config_path.write_text(ckpt.canonical_json(config.to_dict()) + "\n")

    model.train()
    for step in range(start, config.steps):
        for group in opt.param_groups:
            group["lr"] = lr_at(config, step)
        batch = make_batch(data, config, schedule, step)
        loss = recon_loss(batch, model, schedule)
        if preservation is not None:
            pb = make_batch(pres_data, config, schedule, step, stream=1)
            loss = total_loss(loss, preservation_loss(pb, model, schedule), config.lambda_preservation)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        opt.step()
        losses.append(float(loss.detach()))
        done = step + 1
        if done % 100 == 0:
            log.info("step %d loss %.4f", done, np.mean(losses[-100:]))
        if config.checkpoint_every and done % config.checkpoint_every == 0 and done < config.steps:
            save_training_checkpoint(run_dir / f"ckpt_{done:06d}.ckpt", model, opt, config, schedule, done,
                                     losses, dhash, extra)

    final = run_dir / "model.ckpt"
    sha = save_training_checkpoint(final, model, opt, config, schedule, config.steps, losses, dhash, extra)
    model.eval()
    return TrainResult(model, schedule, losses, final, sha)
