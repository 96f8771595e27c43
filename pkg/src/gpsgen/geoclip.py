"""Contrastive GPS-image embeddings (GPS Score, retrieval) and the azimuth-bin
classifier, plus the two generation-fidelity protocols built on them."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint as ckpt
from . import geo, worldgen
from .errors import CheckpointError, ConfigError, DataError
from .geo import NUM_ANGLE_BINS, positional_encode
from .sampler import GuidanceConfig, SampleRequest, sample

log = logging.getLogger(__name__)

CHANCE_PERCENT = round(100.0 / NUM_ANGLE_BINS, 2)


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.GroupNorm(8, cout), nn.GELU(), nn.AvgPool2d(2))


class ConvEncoder(nn.Module):
    """Four conv blocks, each halving the resolution, then a linear projection."""

    def __init__(self, out_dim: int, image_size: int = 32, channels=(32, 64, 128, 128)):
        super().__init__()
        blocks, cin = [], 3
        for c in channels:
            blocks.append(_conv_block(cin, c))
            cin = c
        self.blocks = nn.Sequential(*blocks)
        side = image_size // 2 ** len(channels)
        self.proj = nn.Linear(cin * side * side, out_dim)

    def forward(self, x):
        return self.proj(self.blocks(x).flatten(1))


class CoordEncoder(nn.Module):
    """One MLP shared by longitude and latitude; the two outputs are concatenated and projected."""

    def __init__(self, out_dim: int, hidden: int = 128, depth: int = 6, num_frequencies: int = 10):
        super().__init__()
        self.num_frequencies = num_frequencies
        layers, din = [], 2 * num_frequencies + 1
        for _ in range(depth):
            layers += [nn.Linear(din, hidden), nn.GELU()]
            din = hidden
        self.shared = nn.Sequential(*layers)
        self.proj = nn.Linear(2 * hidden, out_dim)

    def forward(self, uv):
        h = self.shared(positional_encode(uv, self.num_frequencies))  # (B, 2, hidden)
        return self.proj(h.flatten(1))


@dataclass(frozen=True)
class ClipConfig:
    steps: int = 3000
    batch_size: int = 128
    lr: float = 1e-3
    warmup: int = 100
    weight_decay: float = 1e-4
    embed_dim: int = 128
    tau: float = 0.07
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class GpsClipModel(nn.Module):
    def __init__(self, embed_dim: int = 128, image_size: int = 32, tau: float = 0.07):
        super().__init__()
        if tau <= 0:
            raise ConfigError("temperature must be positive")
        self.embed_dim = embed_dim
        self.image_size = image_size
        self.tau = tau
        self.image_encoder = ConvEncoder(embed_dim, image_size)
        self.gps_encoder = CoordEncoder(embed_dim)
        self.register_buffer("pixel_mean", torch.zeros(3))
        self.register_buffer("pixel_std", torch.ones(3))
        self.register_buffer("trained", torch.zeros(()))

    def image_features(self, images) -> torch.Tensor:
        """Raw (unnormalized) embeddings of (B, H, W, 3) images in [0, 1]."""
        x = torch.as_tensor(np.asarray(images, dtype=np.float32)).permute(0, 3, 1, 2)
        x = (x - self.pixel_mean[:, None, None]) / self.pixel_std[:, None, None]
        return self.image_encoder(x)

    def gps_features(self, uv) -> torch.Tensor:
        return self.gps_encoder(torch.as_tensor(np.asarray(uv, dtype=np.float32)).reshape(-1, 2))

    def encode_images(self, images) -> torch.Tensor:
        return F.normalize(self.image_features(images), dim=-1)

    def encode_gps(self, uv) -> torch.Tensor:
        return F.normalize(self.gps_features(uv), dim=-1)


def contrastive_loss(img: torch.Tensor, gps: torch.Tensor, tau: float = 0.07) -> torch.Tensor:
    """Symmetric cross-entropy over ``img @ gps.T / tau`` with matching pairs on the diagonal."""
    n = img.shape[0]
    if n < 2:
        raise ConfigError("contrastive loss needs a batch of at least two pairs")
    if img.shape != gps.shape:
        raise ConfigError("image and GPS embeddings differ in shape")
    logits = img @ gps.T / tau
    target = torch.arange(n)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def _warmup_cosine(step: int, total: int, warmup: int) -> float:
    if step < warmup:
        return (step + 1) / warmup
    return 0.5 * (1 + math.cos(math.pi * min(1.0, (step - warmup) / max(1, total - warmup))))


def train_gps_clip(images: np.ndarray, uv: np.ndarray, config: ClipConfig = ClipConfig()):
    """Fit on (N, H, W, 3) uint8 images and their (N, 2) normalized tags; returns (model, loss history)."""
    if uv is None or len(uv) != len(images):
        raise DataError("GPS-CLIP training needs one tag per image")
    torch.manual_seed(config.seed)
    model = GpsClipModel(config.embed_dim, images.shape[1], config.tau)
    x_all = torch.from_numpy(images).to(torch.float32) / 255.0
    model.pixel_mean.copy_(x_all.mean(dim=(0, 1, 2)))
    model.pixel_std.copy_(x_all.std(dim=(0, 1, 2)).clamp(min=1e-3))
    uv_all = torch.from_numpy(np.asarray(uv, dtype=np.float32))
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    history = []
    for step in range(config.steps):
        g = torch.Generator().manual_seed(config.seed * 1_000_003 + step)
        idx = torch.randperm(len(images), generator=g)[: config.batch_size]
        for group in opt.param_groups:
            group["lr"] = config.lr * _warmup_cosine(step, config.steps, config.warmup)
        loss = contrastive_loss(model.encode_images(x_all[idx].numpy()), model.encode_gps(uv_all[idx]), config.tau)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
        if (step + 1) % 200 == 0:
            log.info("clip step %d loss %.4f", step + 1, np.mean(history[-200:]))
    model.trained.fill_(1.0 if config.steps > 0 else 0.0)
    model.eval()
    return model, history


def save_clip(path, model: GpsClipModel, config: ClipConfig, extra: dict | None = None) -> str:
    header = {"kind": "gps_clip", "config": config.to_dict(), "config_hash": ckpt.config_hash(config.to_dict()),
              "embed_dim": model.embed_dim, "image_size": model.image_size, "tau": model.tau}
    header.update(extra or {})
    return ckpt.save_checkpoint(path, header, ckpt.state_tensors(model))


def load_clip(path) -> GpsClipModel:
    header, tensors = ckpt.load_checkpoint(path)
    if header.get("kind") != "gps_clip":
        raise CheckpointError(f"{path} does not hold a GPS-CLIP model")
    model = GpsClipModel(header["embed_dim"], header["image_size"], header["tau"])
    ckpt.load_module(model, tensors)
    model.eval()
    return model


@torch.no_grad()
def gps_score(images, uv, model: GpsClipModel, allow_untrained: bool = False) -> float:
    """100 x mean cosine similarity between each image and its own tag."""
    if not allow_untrained and float(model.trained) == 0.0:
        raise ConfigError("GPS score needs a trained GPS-CLIP model")
    return float(100.0 * cosine_scores(images, uv, model).mean())


@torch.no_grad()
def cosine_scores(images, uv, model: GpsClipModel) -> np.ndarray:
    return (model.encode_images(images) * model.encode_gps(uv)).sum(-1).numpy()


@torch.no_grad()
def retrieval_top1(images, uv, model: GpsClipModel) -> float:
    """Fraction of images whose own tag is the most similar among all tags given."""
    sim = model.encode_images(images) @ model.encode_gps(uv).T
    return float((sim.argmax(1) == torch.arange(len(sim))).float().mean())


# ------------------------------------------------------------------ angle classifier


class AngleClassifier(nn.Module):
    def __init__(self, image_size: int = 32):
        super().__init__()
        self.image_size = image_size
        self.net = ConvEncoder(NUM_ANGLE_BINS, image_size)
        self.register_buffer("class_mask", torch.ones(NUM_ANGLE_BINS, dtype=torch.bool))

    def forward(self, x):
        logits = self.net(x)
        return logits.masked_fill(~self.class_mask, float("-inf"))

    @torch.no_grad()
    def predict(self, images, batch: int = 256) -> np.ndarray:
        self.eval()
        x = torch.as_tensor(np.asarray(images, dtype=np.float32)).permute(0, 3, 1, 2) * 2.0 - 1.0
        return torch.cat([self(c).argmax(1) for c in x.split(batch)]).numpy()


@dataclass(frozen=True)
class ClassifierConfig:
    steps: int = 1500
    batch_size: int = 64
    lr: float = 2e-3
    weight_decay: float = 1e-4
    holdout: float = 0.1
    seed: int = 0
    augment: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierConfig":
        return cls(**{k: v for k, v in d.items() if k in {f.name for f in fields(cls)}})


def _augment(x: torch.Tensor, g: torch.Generator) -> torch.Tensor:
    # small shifts, brightness changes and pixel noise so generated images are not out of distribution
    B = x.shape[0]
    shifts = torch.randint(-2, 3, (B, 2), generator=g)
    out = torch.stack([torch.roll(x[i], (int(shifts[i, 0]), int(shifts[i, 1])), dims=(1, 2)) for i in range(B)])
    out = out * (1.0 + 0.1 * (torch.rand(B, 1, 1, 1, generator=g) - 0.5) * 2)
    return out + 0.05 * torch.randn(out.shape, generator=g)


@dataclass
class ClassifierResult:
    model: AngleClassifier
    holdout_accuracy: float
    missing_bins: list[int]


def train_angle_classifier(images: np.ndarray, bins: np.ndarray, config: ClassifierConfig = ClassifierConfig()
                           ) -> ClassifierResult:
    """Train on (N, H, W, 3) uint8 renders; the last ``holdout`` fraction is kept out for accuracy."""
    if bins is None:
        raise DataError("angle classifier needs a dataset with azimuth bins")
    bins = np.asarray(bins, dtype=np.int64)
    n_hold = max(1, int(round(len(images) * config.holdout)))
    x_all = torch.from_numpy(images).to(torch.float32).permute(0, 3, 1, 2) / 127.5 - 1.0
    y_all = torch.from_numpy(bins)
    x_tr, y_tr = x_all[:-n_hold], y_all[:-n_hold]
    x_ho, y_ho = x_all[-n_hold:], y_all[-n_hold:]
    torch.manual_seed(config.seed)
    model = AngleClassifier(images.shape[1])
    present = torch.bincount(y_tr, minlength=NUM_ANGLE_BINS) > 0
    missing = [int(k) for k in torch.nonzero(~present).flatten()]
    if missing:
        warnings.warn(f"angle bins without training samples are masked out: {missing}", RuntimeWarning)
        model.class_mask.copy_(present)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    model.train()
    for step in range(config.steps):
        g = torch.Generator().manual_seed(config.seed * 1_000_003 + step)
        idx = torch.randint(len(x_tr), (config.batch_size,), generator=g)
        xb = _augment(x_tr[idx], g) if config.augment else x_tr[idx]
        for group in opt.param_groups:
            group["lr"] = config.lr * _warmup_cosine(step, config.steps, 50)
        loss = F.cross_entropy(model(xb), y_tr[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    model.eval()
    with torch.no_grad():
        acc = float((model(x_ho).argmax(1) == y_ho).float().mean())
    return ClassifierResult(model, acc, missing)


def save_classifier(path, result: ClassifierResult, config: ClassifierConfig, extra: dict | None = None) -> str:
    header = {"kind": "angle_classifier", "config": config.to_dict(), "config_hash": ckpt.config_hash(config.to_dict()),
              "image_size": result.model.image_size, "holdout_accuracy": result.holdout_accuracy,
              "missing_bins": result.missing_bins}
    header.update(extra or {})
    tensors = ckpt.state_tensors(result.model)
    tensors["model.class_mask"] = result.model.class_mask.to(torch.float32)
    return ckpt.save_checkpoint(path, header, tensors)


def load_classifier(path) -> AngleClassifier:
    header, tensors = ckpt.load_checkpoint(path)
    if header.get("kind") != "angle_classifier":
        raise CheckpointError(f"{path} does not hold an angle classifier")
    model = AngleClassifier(header["image_size"])
    tensors = dict(tensors)
    tensors["model.class_mask"] = tensors["model.class_mask"] > 0.5
    ckpt.load_module(model, tensors)
    model.eval()
    return model


# ------------------------------------------------------------------ protocols


@dataclass
class AngleAccuracy:
    accuracy: float  # percent
    chance: float
    correct: int
    total: int
    predictions: list[int]

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "chance": self.chance, "correct": self.correct, "total": self.total}


def protocol_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.default_rng([seed, 2024]).integers(2**31, size=n)]


def angle_accuracy(model, schedule, classifier: AngleClassifier, prompt_ids: list[int], images_per_bin: int = 10,
                   seed: int = 0, drop_angle: bool = False, guidance: GuidanceConfig = GuidanceConfig()) -> AngleAccuracy:
    """Generate ``images_per_bin`` images for each of the 36 bins and score the classifier's recovery of the bin.

    Every bin reuses the same seeds, so differences between bins come only from the angle token.
    """
    seeds = protocol_seeds(seed, images_per_bin)
    reqs, labels = [], []
    for b in range(NUM_ANGLE_BINS):
        for s in seeds:
            reqs.append(SampleRequest(prompt_ids, None if drop_angle else [b], seed=s))
            labels.append(b)
    images = np.concatenate([sample(model, schedule, reqs[i:i + 60], guidance) for i in range(0, len(reqs), 60)])
    pred = classifier.predict(images)
    return _score(pred, np.asarray(labels))


def _score(pred: np.ndarray, labels: np.ndarray) -> AngleAccuracy:
    correct = int((pred == labels).sum())
    return AngleAccuracy(100.0 * correct / len(labels), CHANCE_PERCENT, correct, len(labels), [int(p) for p in pred])


def noise_accuracy(classifier: AngleClassifier, images_per_bin: int = 10, seed: int = 0, size: int = 32) -> AngleAccuracy:
    rng = np.random.default_rng([seed, 77])
    images = rng.random((NUM_ANGLE_BINS * images_per_bin, size, size, 3), dtype=np.float32)
    labels = np.repeat(np.arange(NUM_ANGLE_BINS), images_per_bin)
    return _score(classifier.predict(images), labels)


@dataclass
class FidelityReport:
    gps_score_conditioned: float
    gps_score_unconditioned: float
    batch_wins: int
    batches: int
    district_accuracy_conditioned: float
    district_accuracy_unconditioned: float
    districts: int

    @property
    def win_fraction(self) -> float:
        return self.batch_wins / self.batches

    def to_dict(self) -> dict:
        d = asdict(self)
        d["win_fraction"] = self.win_fraction
        return d


def city_fidelity(model, schedule, clip: GpsClipModel, spec: worldgen.WorldSpec, batches: int = 20,
                  batch_size: int = 8, per_district: int = 10, seed: int = 0,
                  guidance: GuidanceConfig = GuidanceConfig()) -> FidelityReport:
    """Paired comparison of GPS-conditioned and text-only samples.

    GPS Score: ``batches`` batches of random tags; each tag gets one conditioned
    and one text-only sample from the same seed and caption, and a batch is a
    win when its conditioned mean score is higher. District accuracy: samples at
    every district center, classified by the analytic nearest-palette rule; the
    seeds and captions are shared across districts.
    """
    rng = np.random.default_rng([seed, 31])
    box = spec.box
    wins, cond_scores, unc_scores = 0, [], []
    for _ in range(batches):
        uv = rng.uniform(-1.0, 1.0, size=(batch_size, 2))
        caps = [_caption_ids(spec, rng) for _ in range(batch_size)]
        seeds = [int(s) for s in rng.integers(2**31, size=batch_size)]
        cond = sample(model, schedule, [SampleRequest(c, [tuple(u)], s) for c, u, s in zip(caps, uv, seeds)], guidance)
        unc = sample(model, schedule, [SampleRequest(c, None, s) for c, s in zip(caps, seeds)], guidance)
        sc, su = gps_score(cond, uv, clip), gps_score(unc, uv, clip)
        wins += sc > su
        cond_scores.append(sc)
        unc_scores.append(su)

    caps = [_caption_ids(spec, rng) for _ in range(per_district)]
    seeds = protocol_seeds(seed, per_district)
    hits_c = hits_u = 0
    unc = sample(model, schedule, [SampleRequest(c, None, s) for c, s in zip(caps, seeds)], guidance)
    unc_pred = [worldgen.classify_district(spec, im) for im in unc]
    for k, d in enumerate(spec.districts):
        n = geo.normalize(d.center, box)
        imgs = sample(model, schedule, [SampleRequest(c, [(n.u, n.v)], s) for c, s in zip(caps, seeds)], guidance)
        hits_c += sum(worldgen.classify_district(spec, im) == k for im in imgs)
        hits_u += sum(p == k for p in unc_pred)
    total = per_district * len(spec.districts)
    return FidelityReport(float(np.mean(cond_scores)), float(np.mean(unc_scores)), int(wins), batches,
                          hits_c / total, hits_u / total, len(spec.districts))


def _caption_ids(spec: worldgen.WorldSpec, rng: np.random.Generator) -> list[int]:
    n = int(rng.integers(1, 4))
    return [int(i) for i in rng.choice(len(spec.vocabulary), size=n, replace=False)]
