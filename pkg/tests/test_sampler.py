import numpy as np
import pytest
import torch

from gpsgen import sampler
from gpsgen.diffusion import model as dm, schedule as sch
from gpsgen.errors import ConfigError
from gpsgen.geo import GeoTag


def tiny_model(seed=0):
    torch.manual_seed(seed)
    cfg = dm.ModelConfig(vocab_size=5, width=16, channels=8, image_size=16, head_hidden=16)
    return dm.GeoDiffusion(cfg).eval()


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_cfg_single_identities():
    c, u = rand(3, 8, 8, seed=1), rand(3, 8, 8, seed=2)
    assert torch.equal(sampler.cfg_single(c, u, 0.0), c)
    assert torch.allclose(sampler.cfg_single(c, c, 7.5), c, atol=1e-12)
    assert sampler.cfg_single(2.0, 1.0, 7.5) == 9.5
    with pytest.raises(ConfigError):
        sampler.cfg_single(c, u[:2], 1.0)


def test_cfg_dual_identities():
    nn_, pn, pg = rand(3, 8, 8, seed=1), rand(3, 8, 8, seed=2), rand(3, 8, 8, seed=3)
    assert sampler.cfg_dual(0.0, 1.0, 2.0, 3.5, 7.5) == 11.0
    assert torch.equal(sampler.cfg_dual(nn_, pn, pg, 0.0, 0.0), nn_)
    assert torch.allclose(sampler.cfg_dual(nn_, pn, pg, 1.0, 0.0), pn, atol=1e-12)
    x = rand(3, 8, 8, seed=9)
    assert torch.allclose(sampler.cfg_dual(x, x, x, 3.5, 7.5), x, atol=1e-12)
    with pytest.raises(ConfigError):
        sampler.cfg_dual(nn_, pn, pg[:1], 1.0, 1.0)


@pytest.mark.parametrize("slot", [0, 1, 2])
def test_cfg_dual_linear_in_each_argument(slot):
    args = [rand(3, 8, 8, seed=s) for s in (1, 2, 3)]
    a, b = rand(3, 8, 8, seed=4), rand(3, 8, 8, seed=5)
    alpha, beta = 0.7, -1.3

    def f(x):
        xs = list(args)
        xs[slot] = x
        return sampler.cfg_dual(*xs, 3.5, 7.5)

    zero = torch.zeros_like(a)
    lhs = f(alpha * a + beta * b) - f(zero)
    rhs = alpha * (f(a) - f(zero)) + beta * (f(b) - f(zero))
    assert torch.allclose(lhs, rhs, atol=1e-10)


def test_combine_averaged_stub_and_reductions():
    assert sampler.combine_averaged(0.0, 1.0, [1.0, 3.0], 1.0, 2.0) == pytest.approx(3.0, abs=0)
    nn_, pn, pg = rand(3, 4, 4, seed=1), rand(3, 4, 4, seed=2), rand(3, 4, 4, seed=3)
    assert torch.equal(sampler.combine_averaged(nn_, pn, [pg], 3.5, 7.5), sampler.cfg_dual(nn_, pn, pg, 3.5, 7.5))
    same = sampler.combine_averaged(nn_, pn, [pg] * 5, 3.5, 7.5)
    assert torch.allclose(same, sampler.cfg_dual(nn_, pn, pg, 3.5, 7.5), atol=1e-12)
    with pytest.raises(ConfigError):
        sampler.combine_averaged(nn_, pn, [], 3.5, 7.5)


def test_combine_averaged_permutation_invariant():
    nn_, pn = rand(3, 4, 4, seed=1), rand(3, 4, 4, seed=2)
    pgs = [rand(3, 4, 4, seed=10 + i) for i in range(7)]
    a = sampler.combine_averaged(nn_, pn, pgs, 3.5, 7.5)
    b = sampler.combine_averaged(nn_, pn, pgs[::-1], 3.5, 7.5)
    assert torch.allclose(a, b, atol=1e-12)


def _direct_dual(m, z, text, uv, t, cfg):
    ids, mask = dm.pad_text([text], 4)
    tt = torch.tensor([t])
    no, yes = torch.tensor([False]), torch.tensor([True])
    with torch.no_grad():
        e_nn = m(z[None], tt, m.condition(ids, mask, None, no, no))[0]
        e_pn = m(z[None], tt, m.condition(ids, mask, None, yes, no))[0]
        e_pg = m(z[None], tt, m.condition(ids, mask, m.geo_tokens(torch.tensor([uv])), yes, yes))[0]
    return sampler.cfg_dual(e_nn, e_pn, e_pg, cfg.omega_p, cfg.omega_g)


def test_averaged_noise_matches_dual_for_single_tag():
    m = tiny_model()
    z = torch.randn(3, 16, 16, generator=torch.Generator().manual_seed(0))
    cfg = sampler.GuidanceConfig()
    got = sampler.averaged_noise(m, z, [1, 2], [(0.3, -0.4)], cfg, 500)
    want = _direct_dual(m, z, [1, 2], (0.3, -0.4), 500, cfg)
    assert torch.allclose(got, want, atol=1e-5)
    repeated = sampler.averaged_noise(m, z, [1, 2], [(0.3, -0.4)] * 4, cfg, 500)
    assert torch.allclose(repeated, got, atol=1e-5)


def test_averaged_noise_permutation_and_errors():
    m = tiny_model()
    z = torch.randn(3, 16, 16, generator=torch.Generator().manual_seed(1))
    cfg = sampler.GuidanceConfig(max_region=4)
    region = [(0.1, 0.2), (-0.5, 0.9), (0.7, -0.7)]
    a = sampler.averaged_noise(m, z, [3], region, cfg, 100)
    b = sampler.averaged_noise(m, z, [3], region[::-1], cfg, 100)
    assert torch.allclose(a, b, atol=1e-6)
    with pytest.raises(ConfigError):
        sampler.averaged_noise(m, z, [3], [], cfg, 100)
    with pytest.raises(ConfigError):
        sampler.averaged_noise(m, z, [3], region * 2, cfg, 100)
    with pytest.raises(ConfigError):
        sampler.RegionSpec(())


def test_region_grid():
    r = sampler.region_grid(2, 2, (0.0, 0.0, 4.0, 2.0))
    assert [(t.lon, t.lat) for t in r.tags] == [(1.0, 0.5), (3.0, 0.5), (1.0, 1.5), (3.0, 1.5)]
    tri = [(0.0, 0.0), (4.0, 0.0), (0.0, 4.0)]
    r = sampler.region_grid(4, 4, (0.0, 0.0, 4.0, 4.0), polygon=tri)
    assert all(t.lon + t.lat < 4.0 for t in r.tags) and len(r) == 6
    r = sampler.region_grid(3, 3, (1.0, 2.0, 1.0, 2.0))
    assert r.tags == (GeoTag(1.0, 2.0),)


def test_guidance_config_validation():
    with pytest.raises(ConfigError):
        sampler.GuidanceConfig(omega_g=-1.0)
    with pytest.raises(ConfigError):
        sampler.GuidanceConfig(steps=0)


def test_timesteps():
    ts = sampler.timesteps(50, 1000)
    assert ts[0] == 999 and ts[-1] == 0 and len(ts) == 50 and np.all(np.diff(ts) < 0)
    assert np.array_equal(sampler.timesteps(10, 10), np.arange(9, -1, -1))
    with pytest.raises(ConfigError):
        sampler.timesteps(11, 10)


def test_sample_deterministic_and_seed_sensitive():
    m = tiny_model()
    s = sch.build_schedule(40)
    cfg = sampler.GuidanceConfig(steps=40)
    reqs = [sampler.SampleRequest([1, 2], [(0.2, 0.1)], seed=5), sampler.SampleRequest([0], None, seed=6)]
    a = sampler.sample(m, s, reqs, cfg)
    b = sampler.sample(m, s, reqs, cfg)
    assert a.shape == (2, 16, 16, 3) and a.dtype == np.float32
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0
    c = sampler.sample(m, s, [sampler.SampleRequest([1, 2], [(0.2, 0.1)], seed=7)], cfg)
    assert not np.array_equal(a[0], c[0])
    with pytest.raises(ConfigError):
        sampler.sample(m, s, reqs, sampler.GuidanceConfig(steps=41))


def test_sample_batch_independent():
    # a request's image does not depend on what else is in the batch
    m = tiny_model()
    s = sch.build_schedule(20)
    cfg = sampler.GuidanceConfig(steps=10)
    r = sampler.SampleRequest([4], [(0.5, 0.5), (-0.5, 0.0)], seed=3)
    alone = sampler.sample(m, s, [r], cfg)[0]
    mixed = sampler.sample(m, s, [sampler.SampleRequest([1], None, seed=1), r], cfg)[1]
    assert np.abs(alone - mixed).max() < 1e-5


def test_eta_noise_is_seeded():
    m = tiny_model()
    s = sch.build_schedule(20)
    cfg = sampler.GuidanceConfig(steps=10, eta=1.0)
    r = [sampler.SampleRequest([2], [(0.0, 0.0)], seed=2)]
    assert np.array_equal(sampler.sample(m, s, r, cfg), sampler.sample(m, s, r, cfg))
    det = sampler.sample(m, s, r, sampler.GuidanceConfig(steps=10))
    assert not np.array_equal(sampler.sample(m, s, r, cfg), det)
