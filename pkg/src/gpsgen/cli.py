"""Command-line entry point: ``gpsgen <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
Relative output paths resolve against ``$GPSGEN_OUTPUT_ROOT`` when it is set.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import checkpoint as ckpt
from . import geo, worldgen
from .errors import ConfigError, DataError, GpsGenError

OUTPUT_ROOT_ENV = "GPSGEN_OUTPUT_ROOT"
log = logging.getLogger("gpsgen")


def output_path(p) -> Path:
    p = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return p if p.is_absolute() or not root else Path(root) / p


@contextlib.contextmanager
def run_lock(directory: Path):
    """Exclusive lock file guarding a run directory against concurrent writers."""
    try:
        directory.mkdir(parents=True, exist_ok=True)
        fd = os.open(directory / ".lock", os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise ConfigError(f"{directory} is locked by another run (remove .lock if stale)") from exc
    except OSError as exc:
        raise DataError(f"cannot use {directory}: {exc}") from exc
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield directory
    finally:
        with contextlib.suppress(OSError):
            os.unlink(directory / ".lock")


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_png(path: Path, image: np.ndarray) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(worldgen.to_uint8(image)).save(path)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def _override(cfg_cls, base: dict, args, names: dict):
    d = dict(base)
    for flag, key in names.items():
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    return cfg_cls(**d)


# ------------------------------------------------------------------ gen-data


def cmd_gen_data(args) -> int:
    spec = worldgen.make_world(args.mode, args.seed, args.image_size)
    out = output_path(args.out)
    manifest = worldgen.generate_dataset(spec, args.n, out, start=args.start)
    print(f"wrote {manifest['count']} samples to {out}")
    return 0


# ------------------------------------------------------------------ train


def cmd_train(args) -> int:
    from .diffusion.train import TrainConfig, train

    data = worldgen.load_dataset(args.data)
    out = output_path(args.out)
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
    with run_lock(out):
        if args.mode in ("gps-clip", "angle-classifier"):
            return _train_aux(args, data, out, base)
        if args.resume and not args.config and (out / "config.json").exists():
            base = json.loads((out / "config.json").read_text())
        cfg = _override(TrainConfig, {**base, "mode": args.mode}, args, {
            "steps": "steps", "batch_size": "batch_size", "lr": "lr", "seed": "seed",
            "checkpoint_every": "checkpoint_every", "channels": "channels", "width": "width",
            "lambda_preservation": "lambda_preservation"})
        result = train(data, cfg, out, resume=args.resume, init=args.init)
        print(f"checkpoint {result.checkpoint} sha256 {result.checkpoint_sha256}")
    return 0


def _train_aux(args, data, out: Path, base: dict) -> int:
    from . import geoclip

    if args.mode == "gps-clip":
        if data.spec.mode != "city":
            raise ConfigError("gps-clip training needs a city dataset")
        cfg = _override(geoclip.ClipConfig, base, args, {"steps": "steps", "batch_size": "batch_size",
                                                         "lr": "lr", "seed": "seed"})
        write_json(out / "config.json", cfg.to_dict())
        model, history = geoclip.train_gps_clip(data.images, data.normalized_tags, cfg)
        sha = geoclip.save_clip(out / "model.ckpt", model, cfg, {"losses": history,
                                                                 "world_spec_hash": data.manifest["world_spec_hash"]})
    else:
        if data.spec.mode != "landmark":
            raise ConfigError("angle-classifier training needs a landmark dataset")
        cfg = _override(geoclip.ClassifierConfig, base, args, {"steps": "steps", "batch_size": "batch_size",
                                                               "lr": "lr", "seed": "seed"})
        write_json(out / "config.json", cfg.to_dict())
        result = geoclip.train_angle_classifier(data.images, data.azimuth_bins, cfg)
        sha = geoclip.save_classifier(out / "model.ckpt", result, cfg)
        print(f"held-out accuracy {100 * result.holdout_accuracy:.2f}%")
    print(f"checkpoint {out / 'model.ckpt'} sha256 {sha}")
    return 0


# ------------------------------------------------------------------ sample / average


def _guidance(args):
    from .sampler import GuidanceConfig

    return GuidanceConfig(omega_p=args.omega_p, omega_g=args.omega_g, steps=args.steps, eta=args.eta,
                          max_region=args.max_region)


def _load_denoiser(path):
    from .diffusion.train import load_model

    model, schedule, header = load_model(path)
    spec = worldgen.world_from_manifest(header)
    return model, schedule, spec


def _run_sampler(args, model, schedule, spec, geo_values, tags: list, kind: str) -> int:
    from .sampler import SampleRequest, sample

    cfg = _guidance(args)
    prompt = args.prompt if args.prompt is not None else (
        worldgen.LANDMARK_PROMPT if spec.mode == "landmark" else "")
    text_ids = spec.token_ids(prompt) if prompt else []
    img = sample(model, schedule, [SampleRequest(text_ids, geo_values, args.seed)], cfg)[0]
    out = output_path(args.out)
    save_png(out, img)
    sidecar = {
        "command": kind,
        "seed": args.seed,
        "guidance": cfg.to_dict(),
        "prompt": prompt,
        "tags": tags,
        "geo": geo_values,
        "checkpoint_sha256": ckpt.file_sha256(args.ckpt),
    }
    write_json(out.with_suffix(".json"), sidecar)
    print(f"wrote {out}")
    return 0


def cmd_sample(args) -> int:
    model, schedule, spec = _load_denoiser(args.ckpt)
    if args.no_geo:
        return _run_sampler(args, model, schedule, spec, None, [], "sample")
    if model.config.cond == "gps":
        if args.lon is None or args.lat is None:
            raise ConfigError("a GPS model needs --lon and --lat (or --no-geo)")
        tag = geo.GeoTag(args.lon, args.lat)
        n = geo.normalize(tag, spec.box)
        return _run_sampler(args, model, schedule, spec, [(n.u, n.v)], [[tag.lon, tag.lat]], "sample")
    if args.angle_bin is not None:
        b = args.angle_bin
    elif args.azimuth is not None:
        b = geo.discretize_angle(args.azimuth)
    elif args.lon is not None and args.lat is not None:
        b = geo.discretize_angle(geo.azimuth(geo.GeoTag(args.lon, args.lat), spec.center))
    else:
        raise ConfigError("an angle model needs --angle-bin, --azimuth or --lon/--lat")
    if not 0 <= b < geo.NUM_ANGLE_BINS:
        raise ConfigError(f"angle bin {b} outside 0..35")
    return _run_sampler(args, model, schedule, spec, [int(b)], [], "sample")


def parse_region(args, spec) -> list[geo.GeoTag]:
    from .sampler import region_grid

    if args.tags:
        tags = []
        for item in args.tags.split(";"):
            lon, lat = (float(v) for v in item.split(","))
            tags.append(geo.GeoTag(lon, lat))
        return tags
    region = args.region or "grid:4x4"
    if not region.startswith("grid:"):
        raise ConfigError(f"unknown region {region!r}; use grid:NxM or --tags")
    try:
        nx, ny = (int(v) for v in region[5:].lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"bad grid size in {region!r}") from exc
    polygon = None
    if args.polygon:
        polygon = [tuple(float(v) for v in pt.split(",")) for pt in args.polygon.split(";")]
        xs, ys = [p[0] for p in polygon], [p[1] for p in polygon]
        bounds = (min(xs), min(ys), max(xs), max(ys))
    elif args.bounds:
        bounds = tuple(float(v) for v in args.bounds.split(","))
        if len(bounds) != 4:
            raise ConfigError("--bounds takes lon0,lat0,lon1,lat1")
    else:
        b = spec.box
        bounds = (b.x_min, b.y_min, b.x_max, b.y_max)
    return list(region_grid(nx, ny, bounds, polygon).tags)


def cmd_average(args) -> int:
    model, schedule, spec = _load_denoiser(args.ckpt)
    if model.config.cond != "gps":
        raise ConfigError("regional averaging needs a GPS-conditioned checkpoint")
    tags = parse_region(args, spec)
    if not tags:
        raise ConfigError("the region contains no grid points")
    uv = []
    for t in tags:
        n = geo.normalize(t, spec.box)
        uv.append((n.u, n.v))
    return _run_sampler(args, model, schedule, spec, uv, [[t.lon, t.lat] for t in tags], "average")


# ------------------------------------------------------------------ distill


def cmd_distill(args) -> int:
    from . import sds

    model, schedule, spec = _load_denoiser(args.ckpt)
    if model.config.cond != "angle":
        raise ConfigError("distillation needs an angle-conditioned checkpoint")
    out = output_path(args.out)
    base = json.loads(Path(args.config).read_text()) if args.config else {}
    cfg = sds.SdsConfig.from_dict({**base, **{k: v for k, v in {
        "steps": args.steps, "omega": args.omega, "lr": args.lr, "seed": args.seed,
        "render_size": args.render_size, "snapshot_every": args.snapshot_every,
        "null_angle": args.null_angle or None, "view_prompt": args.view_prompt or None,
    }.items() if v is not None}})
    prompt_ids = spec.token_ids(args.prompt or worldgen.LANDMARK_PROMPT)
    with run_lock(out):
        res = sds.distill(model, schedule, cfg, prompt_ids, out, resume=args.resume)
        metrics = sds.evaluate_field(res.field, spec, cfg.threshold)
        write_json(out / "metrics.json", {**metrics.to_dict(), "denoiser_hash_before": res.denoiser_hash_before,
                                          "denoiser_hash_after": res.denoiser_hash_after,
                                          "checkpoint_sha256": ckpt.file_sha256(args.ckpt)})
    print(json.dumps(metrics.to_dict()))
    return 0


# ------------------------------------------------------------------ eval


def cmd_eval(args) -> int:
    from . import geoclip, sds

    report: dict = {"suite": args.suite, "seed": args.seed}
    cfg = _guidance(args)
    if args.suite == "table1":
        model, schedule, spec = _load_denoiser(args.ckpt)
        clip = geoclip.load_clip(_need(args.clip, "--clip"))
        fid = geoclip.city_fidelity(model, schedule, clip, spec, batches=args.batches, batch_size=args.batch_size,
                                    per_district=args.per_district, seed=args.seed, guidance=cfg)
        report.update(fid.to_dict())
        report["district_chance"] = 1.0 / len(spec.districts)
        report["checkpoint_sha256"] = ckpt.file_sha256(args.ckpt)
        if args.holdout:
            ho = worldgen.load_dataset(args.holdout)
            n = min(256, len(ho))
            report["retrieval_top1"] = geoclip.retrieval_top1(ho.images[:n] / 255.0, ho.normalized_tags[:n], clip)
            report["retrieval_candidates"] = n
    elif args.suite == "table2":
        model, schedule, spec = _load_denoiser(args.ckpt)
        clf = geoclip.load_classifier(_need(args.classifier, "--classifier"))
        prompt = spec.token_ids(worldgen.LANDMARK_PROMPT)
        cond = geoclip.angle_accuracy(model, schedule, clf, prompt, args.images_per_bin, args.seed, False, cfg)
        drop = geoclip.angle_accuracy(model, schedule, clf, prompt, args.images_per_bin, args.seed, True, cfg)
        noise = geoclip.noise_accuracy(clf, args.images_per_bin, args.seed, model.config.image_size)
        report.update({"chance": geoclip.CHANCE_PERCENT, "angle_accuracy": cond.accuracy,
                       "angle_accuracy_dropped": drop.accuracy, "noise_accuracy": noise.accuracy,
                       "images": cond.total, "checkpoint_sha256": ckpt.file_sha256(args.ckpt)})
    elif args.suite == "geometry":
        fld, header = sds.load_field(_need(args.field, "--field"))
        spec = worldgen.make_world("landmark", args.world_seed)
        report.update(sds.evaluate_field(fld, spec, header["config"]["threshold"]).to_dict())
    elif args.suite == "clip":
        clip = geoclip.load_clip(_need(args.clip, "--clip"))
        ho = worldgen.load_dataset(_need(args.holdout, "--holdout"))
        n = min(256, len(ho))
        imgs, uv = ho.images[:n] / 255.0, ho.normalized_tags[:n]
        report.update({"retrieval_top1": geoclip.retrieval_top1(imgs, uv, clip), "retrieval_candidates": n,
                       "gps_score": geoclip.gps_score(imgs, uv, clip)})
    out = output_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(out, report)
    print(json.dumps(report, sort_keys=True))
    return 0


def _need(value, flag: str):
    if value is None:
        raise ConfigError(f"{flag} is required for this suite")
    return value


# ------------------------------------------------------------------ parser


def _add_guidance(p):
    p.add_argument("--omega-p", type=float, default=3.5, help="text guidance weight (default 3.5)")
    p.add_argument("--omega-g", type=float, default=7.5, help="GPS / angle guidance weight (default 7.5)")
    p.add_argument("--steps", type=int, default=50, help="DDIM steps (default 50)")
    p.add_argument("--eta", type=float, default=0.0, help="DDIM stochasticity; 0 is deterministic")
    p.add_argument("--max-region", type=int, default=64, help="cap on averaged locations (default 64)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gpsgen", description="GPS-conditioned diffusion on a synthetic world")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    p.add_argument("--mode", choices=("city", "landmark"), required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0, help="world seed")
    p.add_argument("--start", type=int, default=0, help="first sample index (use disjoint ranges for splits)")
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a denoiser, GPS-CLIP or the angle classifier")
    p.add_argument("--mode", choices=("city", "landmark-base", "angle", "gps-clip", "angle-classifier"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", help="JSON file with config overrides")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--width", type=int, help="token width D (default 64)")
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--lambda-preservation", type=float, help="preservation weight (default 1.0)")
    p.add_argument("--init", help="landmark-base checkpoint to start angle training from")
    p.add_argument("--resume", help="checkpoint of this run to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt")
    p.add_argument("--lon", type=float)
    p.add_argument("--lat", type=float)
    p.add_argument("--angle-bin", type=int)
    p.add_argument("--azimuth", type=float, help="degrees, binned to the nearest 10")
    p.add_argument("--no-geo", action="store_true", help="drop the GPS / angle condition")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_guidance(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("average", help="one image whose GPS term is averaged over a region")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt")
    p.add_argument("--region", default="grid:4x4", help="grid:NxM over --polygon / --bounds / the whole box")
    p.add_argument("--polygon", help="lon,lat;lon,lat;... (write --polygon=... for negative longitudes)")
    p.add_argument("--bounds", help="lon0,lat0,lon1,lat1 (write --bounds=... when it starts with a minus)")
    p.add_argument("--tags", help="explicit tag list lon,lat;lon,lat;... (write --tags=... for negative longitudes)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_guidance(p)
    p.set_defaults(func=cmd_average)

    p = sub.add_parser("distill", help="score-distill a radiance field from an angle model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", help="JSON file with config overrides")
    p.add_argument("--prompt")
    p.add_argument("--steps", type=int, help="optimization steps (default 2000)")
    p.add_argument("--omega", type=float, help="3D guidance weight (default 30)")
    p.add_argument("--lr", type=float, help="learning rate (default 0.01)")
    p.add_argument("--seed", type=int)
    p.add_argument("--render-size", type=int, help="render resolution (default 64)")
    p.add_argument("--snapshot-every", type=int)
    p.add_argument("--null-angle", action="store_true", help="ablation: drop the angle token for every view")
    p.add_argument("--view-prompt", action="store_true", help="baseline: coarse four-way view conditioning")
    p.add_argument("--resume", help="snapshot to continue from")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="evaluation suites, written as a JSON report")
    p.add_argument("--suite", choices=("table1", "table2", "geometry", "clip"), required=True)
    p.add_argument("--ckpt")
    p.add_argument("--clip")
    p.add_argument("--classifier")
    p.add_argument("--field")
    p.add_argument("--holdout", help="held-out dataset for retrieval")
    p.add_argument("--world-seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batches", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--per-district", type=int, default=10)
    p.add_argument("--images-per-bin", type=int, default=10)
    p.add_argument("--out", required=True)
    _add_guidance(p)
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except GpsGenError as exc:
        print(f"gpsgen: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
