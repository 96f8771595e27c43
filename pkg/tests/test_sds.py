import math

import numpy as np
import pytest
import torch

from gpsgen import checkpoint as ckpt
from gpsgen import geo, nerf, sds
from gpsgen.diffusion import model as dm, schedule as sch
from gpsgen.errors import CheckpointError, ConfigError, NumericError


def tiny_angle_model(seed=0):
    torch.manual_seed(seed)
    cfg = dm.ModelConfig(cond="angle", vocab_size=4, width=16, channels=8, image_size=16, head_hidden=16)
    return dm.GeoDiffusion(cfg).eval()


def tiny_config(**kw):
    base = dict(steps=3, render_size=16, samples_per_ray=8, hidden=16, layers=2, orient_resolution=8,
                orient_samples=8, snapshot_every=0, turntable_views=2)
    base.update(kw)
    return sds.SdsConfig(**base)


def test_anneal_endpoints_exact():
    assert sds.anneal_interval(0, 2000) == (0.98, 0.98)
    assert sds.anneal_interval(2000, 2000) == (0.02, 0.50)
    lo, hi = sds.anneal_interval(1000, 2000)
    assert lo == pytest.approx(0.50, abs=1e-12) and hi == pytest.approx(0.74, abs=1e-12)
    with pytest.raises(ConfigError):
        sds.anneal_interval(2001, 2000)


def test_anneal_monotone():
    vals = np.array([sds.anneal_interval(s, 777) for s in range(778)])
    assert np.all(np.diff(vals[:, 0]) <= 0) and np.all(np.diff(vals[:, 1]) <= 0)
    assert np.all(vals[:, 0] <= vals[:, 1])


def test_config_validation():
    with pytest.raises(ConfigError):
        sds.SdsConfig(t_end=(0.6, 0.5))
    with pytest.raises(ConfigError):
        sds.SdsConfig(elevation_range=(-10.0, 5.0))
    cfg = sds.SdsConfig(omega=12.0)
    assert sds.SdsConfig.from_dict(cfg.to_dict()) == cfg


def test_camera_distribution():
    cfg = sds.SdsConfig()
    rng = np.random.default_rng(1)
    poses = [sds.sample_camera(rng, cfg) for _ in range(10_000)]
    az = np.array([p.azimuth for p in poses])
    el = np.array([p.elevation for p in poses])
    assert np.all(el <= 0.0) and np.all(el >= -30.0)
    assert np.all(az > -180.0) and np.all(az <= 180.0)
    counts = np.bincount(geo.discretize_angle(az), minlength=36)
    n, p = len(az), 1 / 36
    assert np.all(np.abs(counts - n * p) <= 3 * math.sqrt(n * p * (1 - p)))
    assert all(p.radius == cfg.radius for p in poses[:10])


@pytest.mark.parametrize("seed", [0, 2, 3, 4])
def test_camera_azimuth_chi_square(seed):
    rng = np.random.default_rng(seed)
    az = np.array([sds.sample_camera(rng, sds.SdsConfig()).azimuth for _ in range(10_000)])
    counts = np.bincount(geo.discretize_angle(az), minlength=36)
    expected = len(az) / 36
    # 0.999 quantile of chi-square with 35 degrees of freedom
    assert np.sum((counts - expected) ** 2 / expected) < 66.6


def test_pose_bin_round_trip():
    cfg = sds.SdsConfig()
    rng = np.random.default_rng(4)
    for _ in range(200):
        pose = sds.sample_camera(rng, cfg)
        b = sds.conditioning_bin(pose, cfg)
        assert b == geo.discretize_angle(pose.azimuth)
        d = (pose.azimuth - geo.bin_center(b) + 180.0) % 360.0 - 180.0
        assert abs(d) <= 5.0 + 1e-9


def test_cfg_3d():
    assert sds.cfg_3d(1.0, 0.0, 30.0) == 31.0
    x, y = torch.randn(3, 4), torch.randn(3, 4)
    assert torch.equal(sds.cfg_3d(x, y, 0.0), x)
    assert torch.allclose(sds.cfg_3d(x, x, 30.0), x, atol=1e-5)
    with pytest.raises(ConfigError):
        sds.cfg_3d(x, y[:2], 1.0)


def test_sds_weight():
    s = sch.build_schedule(1000)
    t = int(np.argmin(np.abs(s.sigma - 0.5)))
    assert sds.sds_weight(s, t) == pytest.approx(float(s.sigma[t]) ** 2, abs=0)
    abar = np.array([0.99, 0.75, 0.1])
    toy = sch.NoiseSchedule(3, "custom", np.ones(3), np.zeros(3), abar, np.sqrt(1 - abar))
    assert sds.sds_weight(toy, 1) == pytest.approx(0.25, abs=1e-12)


def _sphere_image(f, pose):
    return nerf.render(f, pose, samples_per_ray=16).rgb.permute(2, 0, 1)[None] * 2 - 1


def test_zero_residual_zero_gradient():
    f = nerf.SphereField(dtype=torch.float64)
    x = _sphere_image(f, nerf.CameraPose(10.0, -10.0, resolution=12))
    eps = torch.randn(x.shape, dtype=torch.float64)
    sds.sds_surrogate(x, eps.clone(), eps, 0.7).backward()
    assert f.radius.grad.item() == 0.0 and f.scale.grad.item() == 0.0


def test_surrogate_gradient_matches_finite_differences():
    f = nerf.SphereField(radius=0.55, scale=3.0, sharpness=6.0, dtype=torch.float64)
    pose = nerf.CameraPose(40.0, -20.0, resolution=12)
    g = torch.Generator().manual_seed(0)
    eps = torch.randn(1, 3, 12, 12, generator=g, dtype=torch.float64)
    eps_hat = torch.randn(1, 3, 12, 12, generator=g, dtype=torch.float64)
    w = 0.36
    x = _sphere_image(f, pose)
    sds.sds_surrogate(x, eps_hat, eps, w).backward()
    analytic = torch.stack([f.radius.grad, f.scale.grad])

    # the stated gradient: w * sum (eps_hat - eps) * dx/dtheta, with dx/dtheta by central differences
    h = 1e-6
    stated = []
    for p in (f.radius, f.scale):
        with torch.no_grad():
            p += h
            xp = _sphere_image(f, pose)
            p -= 2 * h
            xm = _sphere_image(f, pose)
            p += h
        stated.append(w * ((eps_hat - eps) * (xp - xm) / (2 * h)).sum())
    stated = torch.stack(stated)
    assert (analytic - stated).norm() / stated.norm() <= 1e-4


def test_zero_steps_returns_initial_field():
    m = tiny_angle_model()
    cfg = tiny_config(steps=0)
    res = sds.distill(m, sch.build_schedule(100), cfg, [0, 1, 2, 3])
    init = sds.init_state(cfg, [0, 1, 2, 3]).field
    assert ckpt.module_hash(res.field) == ckpt.module_hash(init)
    assert res.trace == []


def test_distill_deterministic_and_denoiser_frozen(tmp_path):
    m = tiny_angle_model()
    s = sch.build_schedule(100)
    before = ckpt.module_hash(m)
    a = sds.distill(m, s, tiny_config(), [0, 1, 2, 3], run_dir=tmp_path / "a")
    b = sds.distill(m, s, tiny_config(), [0, 1, 2, 3], run_dir=tmp_path / "b")
    assert a.denoiser_hash_before == a.denoiser_hash_after == before == ckpt.module_hash(m)
    assert np.array_equal(a.occupancy.density, b.occupancy.density)
    assert (tmp_path / "a" / "occupancy.bin").read_bytes() == (tmp_path / "b" / "occupancy.bin").read_bytes()
    assert len(a.trace) == 3 and [r["step"] for r in a.trace] == [0, 1, 2]
    assert ckpt.module_hash(a.field) != ckpt.module_hash(sds.init_state(tiny_config(), [0]).field)


def test_resume_matches_uninterrupted(tmp_path):
    m = tiny_angle_model()
    s = sch.build_schedule(100)
    full = sds.distill(m, s, tiny_config(steps=4), [0, 1, 2, 3], run_dir=tmp_path / "full")
    sds.distill(m, s, tiny_config(steps=4, snapshot_every=2), [0, 1, 2, 3], run_dir=tmp_path / "part")
    # resuming under a config that differs beyond the step budget is refused
    with pytest.raises(CheckpointError):
        sds.distill(m, s, tiny_config(steps=4), [0, 1, 2, 3], resume=tmp_path / "part/snapshots/step_000002.ckpt")
    cont = sds.distill(m, s, tiny_config(steps=4, snapshot_every=2), [0, 1, 2, 3],
                       resume=tmp_path / "part/snapshots/step_000002.ckpt")
    assert np.array_equal(cont.occupancy.density, full.occupancy.density)


def test_null_angle_uses_same_row_for_every_pose():
    m = tiny_angle_model()
    s = sch.build_schedule(100)
    state = sds.init_state(tiny_config(null_angle=True), [0, 1, 2, 3])
    sds.sds_step(state, m, s, np.random.default_rng(0))
    assert state.step == 1 and np.isfinite(state.trace[0]["sds"])


class NanModel(dm.GeoDiffusion):
    def forward(self, z, t, cond):
        return torch.full_like(z, float("nan"))


def test_non_finite_noise_aborts():
    torch.manual_seed(0)
    m = NanModel(dm.ModelConfig(cond="angle", vocab_size=4, width=16, channels=8, image_size=16,
                                head_hidden=16)).eval()
    state = sds.init_state(tiny_config(), [0, 1, 2, 3])
    with pytest.raises(NumericError):
        sds.sds_step(state, m, sch.build_schedule(100), np.random.default_rng(0))


def test_gps_model_rejected():
    torch.manual_seed(0)
    m = dm.GeoDiffusion(dm.ModelConfig(vocab_size=4, width=16, channels=8, image_size=16, head_hidden=16))
    with pytest.raises(ConfigError):
        sds.distill(m, sch.build_schedule(100), tiny_config(), [0])


def test_view_prompt_bins():
    cfg = sds.SdsConfig(view_prompt=True)
    for az, want in [(3.0, 0), (80.0, 9), (-170.0, 18), (-60.0, 27), (44.0, 0), (46.0, 9)]:
        assert sds.conditioning_bin(nerf.CameraPose(az, -10.0), cfg) == want
