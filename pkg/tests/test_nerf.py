import math

import numpy as np
import pytest
import torch

from gpsgen import nerf, worldgen
from gpsgen.errors import ConfigError, DataError

SMALL = nerf.CameraPose(30.0, -10.0, resolution=24)


def test_zero_field_renders_background():
    out = nerf.render(nerf.ZeroField(), SMALL, samples_per_ray=8)
    assert torch.equal(out.rgb, torch.ones(24, 24, 3))
    assert torch.equal(out.opacity, torch.zeros(24, 24))


def test_opaque_first_sample():
    rgb = torch.tensor([[[0.2, 0.4, 0.6], [0.9, 0.9, 0.9], [0.1, 0.1, 0.1]]])
    for big in (math.inf, 1e9):
        sigma = torch.tensor([[big, 3.0, 5.0]])
        w, color, opacity = nerf.composite(sigma, rgb, torch.full((1, 3), 0.1))
        assert torch.allclose(color, rgb[:, 0]) and opacity.item() == pytest.approx(1.0)
        assert w[0, 1:].abs().max() == 0


@pytest.mark.parametrize("s1,s2,d1,d2", [(0.5, 2.0, 0.1, 0.3), (4.0, 0.0, 0.25, 0.25), (0.0, 7.0, 1.0, 0.05)])
def test_two_sample_weights_oracle(s1, s2, d1, d2):
    sigma = torch.tensor([[s1, s2]], dtype=torch.float64)
    deltas = torch.tensor([[d1, d2]], dtype=torch.float64)
    w, _, opacity = nerf.composite(sigma, torch.zeros(1, 2, 3, dtype=torch.float64), deltas)
    w1 = 1 - math.exp(-s1 * d1)
    w2 = math.exp(-s1 * d1) * (1 - math.exp(-s2 * d2))
    assert abs(w[0, 0].item() - w1) <= 1e-6 and abs(w[0, 1].item() - w2) <= 1e-6
    assert opacity.item() == pytest.approx(w1 + w2, abs=1e-12)


def test_weights_sum_to_opacity():
    torch.manual_seed(0)
    f = nerf.CoordinateField(hidden=32)
    out = nerf.render(f, SMALL, samples_per_ray=16)
    ws = out.weights.sum(-1).reshape(24, 24)
    assert torch.allclose(ws, out.opacity, atol=1e-6)
    assert out.opacity.max() <= 1.0 and out.rgb.min() >= 0.0 and out.rgb.max() <= 1.0


def test_render_differentiable_and_validated():
    f = nerf.SphereField()
    nerf.render(f, SMALL, samples_per_ray=8).rgb.sum().backward()
    assert f.radius.grad is not None and f.radius.grad != 0
    with pytest.raises(ConfigError):
        nerf.render(f, SMALL, samples_per_ray=1)
    with pytest.raises(ConfigError):
        nerf.render(f, nerf.CameraPose(0.0, 0.0, radius=-5.0, resolution=8), samples_per_ray=8)


def test_sample_count_convergence():
    f = nerf.SphereField(sharpness=8.0, scale=6.0)
    pose = nerf.CameraPose(0.0, -15.0, resolution=32)
    with torch.no_grad():
        a = nerf.render(f, pose, samples_per_ray=64).rgb
        b = nerf.render(f, pose, samples_per_ray=128).rgb
    assert (a - b).abs().mean() <= 0.02


def test_orientation_reg_zero_and_nonnegative():
    assert nerf.orientation_reg(nerf.ZeroField(), [SMALL], samples_per_ray=8, resolution=8).item() == 0.0
    for seed in range(3):
        torch.manual_seed(seed)
        f = nerf.CoordinateField(hidden=16, blob_density=seed * 3.0)
        poses = [nerf.CameraPose(a, -10.0) for a in (0.0, 120.0)]
        assert nerf.orientation_reg(f, poses, samples_per_ray=16, resolution=8).item() >= 0.0


def test_orientation_reg_gradient_matches_finite_differences():
    f = nerf.SphereField(radius=0.6, scale=4.0, sharpness=6.0, dtype=torch.float64)
    poses = [nerf.CameraPose(20.0, -10.0), nerf.CameraPose(-100.0, -25.0)]
    val = nerf.orientation_reg(f, poses, samples_per_ray=24, resolution=8)
    assert val.item() > 0.0
    val.backward()
    analytic = torch.stack([f.radius.grad, f.scale.grad])
    h = 1e-6
    fd = []
    for p in (f.radius, f.scale):
        with torch.no_grad():
            p += h
            plus = nerf.orientation_reg(f, poses, samples_per_ray=24, resolution=8).item()
            p -= 2 * h
            minus = nerf.orientation_reg(f, poses, samples_per_ray=24, resolution=8).item()
            p += h
        fd.append((plus - minus) / (2 * h))
    fd = torch.tensor(fd, dtype=torch.float64)
    assert (analytic - fd).norm() / fd.norm() <= 1e-3


def test_opacity_reg_values():
    zero = nerf.opacity_reg(torch.zeros(8, 8))
    one = nerf.opacity_reg(torch.ones(8, 8))
    half = nerf.opacity_reg(torch.full((8, 8), 0.5, dtype=torch.float64))
    eps = nerf.OPACITY_EPS
    floor = -(eps * math.log(eps) + (1 - eps) * math.log(1 - eps))
    assert zero.item() == 0.0 and one.item() == 0.0
    assert half.item() == pytest.approx(math.log(2) - floor, abs=1e-12)
    rand = torch.rand(1000, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    vals = torch.stack([nerf.opacity_reg(r[None]) for r in rand])
    assert vals.min() >= 0.0 and vals.max() <= half


def test_export_sphere_iou_and_determinism():
    f = nerf.SphereField(radius=0.5)
    g1 = nerf.export_density(f, 64)
    g2 = nerf.export_density(f, 64)
    assert np.array_equal(g1.occupancy, g2.occupancy) and np.array_equal(g1.density, g2.density)
    pts = worldgen.grid_points(64)
    truth = (np.linalg.norm(pts, axis=1) <= 0.5).reshape(64, 64, 64)
    assert nerf.occupancy_iou(g1.occupancy, truth) >= 0.95
    assert not nerf.export_density(nerf.ZeroField(), 16).occupancy.any()
    with pytest.raises(ConfigError):
        nerf.export_density(f, 4)


def test_occupancy_file_round_trip(tmp_path):
    grid = nerf.export_density(nerf.SphereField(radius=0.4), 16)
    p = tmp_path / "occ.bin"
    nerf.write_occupancy(p, grid)
    header, occ = nerf.read_occupancy(p)
    assert header["resolution"] == 16 and header["threshold"] == grid.threshold
    assert np.array_equal(occ, grid.occupancy)
    (tmp_path / "bad.bin").write_bytes(b"nope" * 10)
    with pytest.raises(DataError):
        nerf.read_occupancy(tmp_path / "bad.bin")


def test_turntable_writes_pngs(tmp_path):
    paths = nerf.turntable(nerf.SphereField(), tmp_path, views=3, resolution=16, samples_per_ray=8)
    assert [p.name for p in paths] == ["view_000.png", "view_001.png", "view_002.png"]


def test_silhouette_of_sphere_matches_projection():
    f = nerf.SphereField(radius=0.5, scale=200.0, sharpness=4000.0)
    pose = nerf.CameraPose(0.0, -15.0, resolution=32)
    sil = nerf.silhouette(f, pose, samples_per_ray=512)
    # analytic: a ray hits the sphere when its distance to the origin is below the radius
    o, d = pose.rays(torch.float64)
    t = -(o * d).sum(-1)
    dist = (o + t[:, None] * d).norm(dim=-1)
    truth = (dist < 0.5).reshape(32, 32).numpy()
    assert np.mean(sil != truth) <= 0.01
