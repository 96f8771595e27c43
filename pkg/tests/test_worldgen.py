import json
import math
import os

import numpy as np
import pytest

from gpsgen import geo, worldgen
from gpsgen.errors import DataError, VocabularyError
from gpsgen.geo import GeoTag


@pytest.fixture(scope="module")
def city():
    return worldgen.make_world("city", seed=3)


@pytest.fixture(scope="module")
def landmark():
    return worldgen.make_world("landmark", seed=0)


def _horizon(spec):
    return int(round(worldgen.SKY_FRACTION * spec.image_size))


def test_city_render_deterministic(city):
    tag = GeoTag(-73.97, 40.75)
    a = worldgen.render_city_sample(city, tag, ["tree", "bus"], seed=11).image
    b = worldgen.render_city_sample(city, tag, ["tree", "bus"], seed=11).image
    assert a.dtype == np.float32 and a.shape == (32, 32, 3)
    assert np.array_equal(a, b)


def test_unknown_token_rejected(city):
    with pytest.raises(VocabularyError):
        worldgen.render_city_sample(city, GeoTag(-73.97, 40.75), ["dragon"], seed=0)


def test_same_district_street_band_matches(city):
    d = city.districts[4]
    x0, x1, y0, y1 = d.rect
    a = GeoTag(x0 + 0.3 * (x1 - x0), y0 + 0.4 * (y1 - y0))
    b = GeoTag(x0 + 0.7 * (x1 - x0), y0 + 0.6 * (y1 - y0))
    assert worldgen.district_of(city, a) == worldgen.district_of(city, b) == 4
    h = _horizon(city)
    for seed in range(5):
        ia = worldgen.render_city_sample(city, a, ["statue"], seed).image
        ib = worldgen.render_city_sample(city, b, ["statue"], seed).image
        assert np.abs(ia[h:] - ib[h:]).max() <= worldgen.JITTER_BRIGHTNESS


def test_jitter_bounded(city):
    tag = city.districts[0].center
    ref = worldgen.render_city_sample(city, tag, ["tower"], 0).image
    for seed in range(1, 20):
        dx, dy, bright = worldgen._jitter(seed)
        assert abs(dx) <= 2 and abs(dy) <= 2 and abs(bright) <= 0.05
        img = worldgen.render_city_sample(city, tag, ["tower"], seed).image
        # brightness jitter alone never moves the mean by more than 5% plus the shifted-texture share
        assert abs(img.mean() - ref.mean()) <= 0.05 + 0.15


def test_different_districts_separated(city):
    assert city.palette_separation > 0.0
    rng = np.random.default_rng(0)
    k = len(city.districts)
    for _ in range(60):
        i, j = rng.choice(k, size=2, replace=False)
        caption = [city.vocabulary[int(rng.integers(len(city.vocabulary)))]]
        seed = int(rng.integers(1000))
        a = worldgen.render_city_sample(city, city.districts[i].center, caption, seed).image
        b = worldgen.render_city_sample(city, city.districts[j].center, caption, seed).image
        gap = np.linalg.norm(a.reshape(-1, 3).mean(0) - b.reshape(-1, 3).mean(0))
        assert gap >= city.palette_separation


def test_palette_classifier_recovers_district(city):
    rng = np.random.default_rng(1)
    hits = 0
    for n in range(90):
        tag = GeoTag(rng.uniform(city.box.x_min, city.box.x_max), rng.uniform(city.box.y_min, city.box.y_max))
        img = worldgen.render_city_sample(city, tag, ["car"], n).image
        hits += worldgen.classify_district(city, img) == worldgen.district_of(city, tag)
    assert hits == 90


def test_district_lookup_is_exact(city):
    for d in city.districts:
        x0, x1, y0, y1 = d.rect
        assert worldgen.district_of(city, GeoTag(x0, y0)) == d.index
        assert worldgen.district_of(city, d.center) == d.index
    b = city.box
    assert worldgen.district_of(city, GeoTag(b.x_max, b.y_max)) == len(city.districts) - 1


def test_landmark_equal_azimuth_equal_images(landmark):
    c = landmark.center
    near = GeoTag(c.lon + 0.003, c.lat + 0.004)
    far = GeoTag(c.lon + 0.006, c.lat + 0.008)
    a = worldgen.render_landmark_sample(landmark, near, seed=5)
    b = worldgen.render_landmark_sample(landmark, far, seed=5)
    assert a.azimuth_bin == b.azimuth_bin
    assert np.array_equal(a.image, b.image)
    assert a.caption == ["a", "photo", "of", "landmark"]


def test_landmark_front_back_differ(landmark):
    front, _ = worldgen.render_view(landmark, 0.0, -15.0)
    back, _ = worldgen.render_view(landmark, 180.0, -15.0)
    assert np.abs(front - back).mean() > 0.01


def test_landmark_center_tag_rejected(landmark):
    from gpsgen.errors import UndefinedAzimuthError

    with pytest.raises(UndefinedAzimuthError):
        worldgen.render_landmark_sample(landmark, landmark.center)


def _marched_silhouette(spec, az, el, size):
    # independent oracle: dense point marching along each pixel ray against the inside test
    o, d = worldgen.camera_rays(az, el, size, spec.camera, supersample=1)
    ts = np.arange(spec.camera.radius - 1.8, spec.camera.radius + 1.8, 0.004)
    hit = np.zeros(len(o), bool)
    for chunk in np.array_split(np.arange(len(o)), 16):
        pts = o[chunk, None, :] + ts[None, :, None] * d[chunk, None, :]
        inside = worldgen.inside_primitives(spec, pts.reshape(-1, 3)).reshape(len(chunk), len(ts))
        hit[chunk] = inside.any(axis=1)
    return hit.reshape(size, size)


@pytest.mark.parametrize("az,el", [(0.0, -15.0), (130.0, -28.0), (-70.0, 0.0)])
def test_landmark_silhouette_matches_marching_oracle(landmark, az, el):
    _, cover = worldgen.render_view(landmark, az, el, size=48, supersample=1)
    oracle = _marched_silhouette(landmark, az, el, 48)
    assert np.mean((cover > 0.5) != oracle) <= 0.01


def test_generate_single_sample(tmp_path, city):
    m = worldgen.generate_dataset(city, 1, tmp_path / "d")
    assert m["count"] == 1 and len(m["files"]) == 1
    assert len(list((tmp_path / "d" / "images").iterdir())) == 1
    ds = worldgen.load_dataset(tmp_path / "d")
    assert ds.images.shape == (1, 32, 32, 3)


def _tree_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


def test_generate_deterministic(tmp_path, city):
    worldgen.generate_dataset(city, 12, tmp_path / "a")
    worldgen.generate_dataset(city, 12, tmp_path / "b")
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")


def test_disjoint_start_offsets(tmp_path, city):
    worldgen.generate_dataset(city, 5, tmp_path / "a")
    worldgen.generate_dataset(city, 5, tmp_path / "b", start=5)
    a = worldgen.load_dataset(tmp_path / "a").tags
    b = worldgen.load_dataset(tmp_path / "b").tags
    assert not np.any(np.all(a[:, None] == b[None], axis=-1))


def _tag_bins(spec, n):
    # tag sampling alone; rendering 3600 views is not needed for the histogram
    bins = np.zeros(36, int)
    for i in range(n):
        rng = np.random.default_rng([spec.seed, i])
        tag = worldgen._sample_tag(spec, rng)
        bins[geo.discretize_angle(geo.azimuth(tag, spec.center))] += 1
    return bins


def test_landmark_bins_uniform():
    n = 3600
    bins = _tag_bins(worldgen.make_world("landmark", seed=1), n)
    p = 1.0 / 36
    sigma = math.sqrt(n * p * (1 - p))
    assert bins.sum() == n
    assert np.all(np.abs(bins - n * p) <= 3 * sigma)


@pytest.mark.parametrize("seed", [0, 2, 3])
def test_landmark_bins_chi_square(seed):
    n = 3600
    bins = _tag_bins(worldgen.make_world("landmark", seed=seed), n)
    chi2 = float(np.sum((bins - n / 36) ** 2 / (n / 36)))
    # 35 degrees of freedom; 66.6 is the 0.999 quantile
    assert chi2 < 66.6


def test_landmark_manifest_has_bins(tmp_path, landmark):
    worldgen.generate_dataset(landmark, 3, tmp_path / "l")
    lines = (tmp_path / "l" / "samples.jsonl").read_text().splitlines()
    recs = [json.loads(x) for x in lines]
    assert all(0 <= r["azimuth_bin"] < 36 for r in recs)
    ds = worldgen.load_dataset(tmp_path / "l")
    assert ds.azimuth_bins.shape == (3,)


def test_unwritable_target(tmp_path, city):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DataError):
        worldgen.generate_dataset(city, 2, blocker / "sub")
    assert not (blocker.parent / "sub").exists()


def test_manifest_hash_checked(tmp_path, city):
    worldgen.generate_dataset(city, 2, tmp_path / "d")
    p = tmp_path / "d" / "manifest.json"
    m = json.loads(p.read_text())
    assert worldgen.world_from_manifest(m).hash() == city.hash()
    m["world_spec_hash"] = "0" * 64
    p.write_text(json.dumps(m))
    with pytest.raises(DataError):
        worldgen.load_dataset(tmp_path / "d")


def test_occupancy_grid_matches_points(landmark):
    occ = worldgen.occupancy_grid(landmark, 16)
    pts = worldgen.grid_points(16)
    assert occ.shape == (16, 16, 16)
    assert np.array_equal(occ.reshape(-1), worldgen.inside_primitives(landmark, pts))
    assert 0.02 < occ.mean() < 0.5
