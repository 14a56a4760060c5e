import itertools
import json
import warnings
from collections import Counter, defaultdict

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from deskmae.data.augment import augment_batch, crop_box, hflip, random_resized_crop, resize_bilinear
from deskmae.data.manifest import (ManifestEntry, QuotaError, SamplerQuotas, derive_season, gen_catalog, read_jsonl,
                                   sample_manifest, write_jsonl)
from deskmae.data.synthetic import BAND_ORDER, gen_synthetic
from deskmae.data.tiles import (TileFormatError, TileSample, decode_tile, encode_tile, import_png, load_dataset,
                                read_tile, write_dataset)
from oracles import check_manifest


# -- tiles -------------------------------------------------------------------
@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9), st.integers(1, 9), st.sampled_from([np.uint8, np.float32]),
       st.integers(0, 1000))
def test_tile_round_trip(bands, h, w, dtype, seed):
    rng = np.random.default_rng(seed)
    data = (rng.integers(0, 256, (bands, h, w)) if dtype == np.uint8 else rng.standard_normal((bands, h, w)))
    tile = TileSample("t", data.astype(dtype))
    back = decode_tile(encode_tile(tile), "t")
    assert back.data.dtype == tile.data.dtype and np.array_equal(back.data, tile.data)
    assert back.band_order == tile.band_order


def test_tile_header_layout():
    buf = encode_tile(TileSample("t", np.zeros((4, 2, 3), np.uint8)))
    assert buf[:4] == b"MTIL" and buf[4:6] == (1).to_bytes(2, "little")
    assert int.from_bytes(buf[6:10], "little") == 3 and int.from_bytes(buf[10:14], "little") == 2
    tag = b"B,G,R,NIR"
    assert buf[17] == len(tag) and buf[18:18 + len(tag)] == tag
    assert len(buf) == 18 + len(tag) + 24


def test_tile_format_errors():
    good = encode_tile(TileSample("t", np.zeros((1, 2, 2), np.uint8)))
    for bad in (b"XXXX" + good[4:], good[:-1], good[:5]):
        with pytest.raises(TileFormatError):
            decode_tile(bad)
    with pytest.raises(TileFormatError):
        TileSample("t", np.zeros((2, 2)))
    with pytest.raises(TileFormatError):
        TileSample("t", np.zeros((1, 2, 2), np.int32))
    with pytest.raises(TileFormatError):
        TileSample("t", np.zeros((2, 2, 2), np.uint8), ("R",))


def test_as_float_scales_u8():
    t = TileSample("t", np.array([[[0, 255]]], np.uint8))
    assert t.as_float().tolist() == [[[0.0, 1.0]]]


def test_png_import(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, (5, 7, 3)).astype(np.uint8)
    Image.fromarray(rgb).save(tmp_path / "a.png")
    t = import_png(tmp_path / "a.png")
    assert t.band_order == ("R", "G", "B") and np.array_equal(t.data, rgb.transpose(2, 0, 1))


def test_dataset_round_trip(tmp_path):
    seg = gen_synthetic("segmentation", 3, size=8, seed=1)
    write_dataset(tmp_path / "d", seg.tiles(), masks=seg.masks, meta={"kind": "segmentation"})
    images, labels, masks, ids = load_dataset(tmp_path / "d")
    assert np.array_equal(images, seg.images) and labels is None and np.array_equal(masks, seg.masks)
    assert ids == ["syn000000", "syn000001", "syn000002"]
    assert read_tile(tmp_path / "d" / "tiles" / "syn000000.mtil").band_order == BAND_ORDER[4]
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")


# -- augmentations -----------------------------------------------------------
def test_resize_identity_and_constant():
    img = np.random.default_rng(0).random((2, 5, 5)).astype(np.float32)
    assert np.array_equal(resize_bilinear(img, 5, 5), img)
    const = np.full((1, 6, 6), 0.25, np.float32)
    assert np.all(resize_bilinear(const, 11, 3) == np.float32(0.25))


def test_resize_downsample_by_two_averages_pairs():
    img = np.arange(16.0).reshape(1, 4, 4)
    out = resize_bilinear(img, 2, 2)
    np.testing.assert_allclose(out[0], [[2.5, 4.5], [10.5, 12.5]])


@settings(max_examples=50, deadline=None)
@given(st.integers(4, 64), st.integers(4, 64), st.integers(0, 1000))
def test_crop_box_inside_image(h, w, seed):
    top, left, ch, cw = crop_box(h, w, (0.2, 1.0), (3 / 4, 4 / 3), np.random.default_rng(seed))
    assert 0 <= top and 0 <= left and ch > 0 and cw > 0 and top + ch <= h and left + cw <= w


def test_crop_box_falls_back_to_centre_square():
    assert crop_box(10, 4, (5.0, 5.0), (1.0, 1.0), np.random.default_rng(0)) == (3, 0, 4, 4)


def test_random_resized_crop_seeded():
    t = TileSample("t", np.random.default_rng(0).random((3, 20, 20)).astype(np.float32))
    a = random_resized_crop(t, 8, seed=3)
    assert a.data.shape == (3, 8, 8) and np.array_equal(a.data, random_resized_crop(t, 8, seed=3).data)
    with pytest.raises(ValueError):
        random_resized_crop(t, 0)


def test_hflip():
    t = TileSample("t", np.arange(6, dtype=np.float32).reshape(1, 2, 3))
    assert hflip(t, p=1.0).data.tolist() == [[[2, 1, 0], [5, 4, 3]]]
    assert hflip(t, p=0.0) is t


def test_augment_batch_full_area_no_flip_is_identity():
    x = np.random.default_rng(0).random((3, 2, 8, 8)).astype(np.float32)
    out = augment_batch(x, 8, np.random.default_rng(0), area_range=(1.0, 1.0), aspect_range=(1.0, 1.0), flip_p=0.0)
    assert np.array_equal(out, x)


# -- synthetic ---------------------------------------------------------------
@pytest.mark.parametrize("kind", ["classification", "segmentation", "texture"])
def test_synthetic_deterministic_and_bounded(kind):
    a, b = gen_synthetic(kind, 6, size=16, seed=5), gen_synthetic(kind, 6, size=16, seed=5)
    assert np.array_equal(a.images, b.images) and a.images.dtype == np.float32
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert not np.array_equal(a.images, gen_synthetic(kind, 6, size=16, seed=6).images)


@pytest.mark.parametrize("kind", ["classification", "segmentation", "texture"])
def test_three_band_set_is_visible_part_of_four_band_set(kind):
    rgb = gen_synthetic(kind, 4, size=16, bands=3, seed=2)
    ms = gen_synthetic(kind, 4, size=16, bands=4, seed=2)
    assert np.array_equal(rgb.images, ms.images[:, :3])


def test_classification_labels_balanced():
    s = gen_synthetic("classification", 40, size=16, classes=4)
    assert sorted(Counter(s.labels.tolist()).values()) == [10, 10, 10, 10]


def test_nir_tracks_visible_mean():
    s = gen_synthetic("texture", 4, size=16, nir_weight=0.8)
    resid = s.images[:, 3] - 0.8 * s.images[:, :3].mean(axis=1)
    assert np.abs(resid).mean() < 0.05


def test_segmentation_masks_in_range():
    s = gen_synthetic("segmentation", 5, size=16, classes=3)
    assert s.masks.shape == (5, 16, 16) and set(np.unique(s.masks)) <= {0, 1, 2}


def test_synthetic_errors():
    for kw in ({"bands": 5}, {"kind": "video"}, {"n": 0}, {"classes": 5}):
        args = {"kind": "classification", "n": 4, **kw}
        with pytest.raises(ValueError):
            gen_synthetic(**args)


# -- seasons and manifest records --------------------------------------------
@pytest.mark.parametrize("date,lat,season", [
    ("2020-01-15", 45.0, "winter"), ("2020-04-01", 10.0, "spring"), ("2020-07-31", 0.0, "summer"),
    ("2020-10-10", 30.0, "fall"), ("2020-12-01", 50.0, "winter"),
    ("2020-01-15", -30.0, "summer"), ("2020-04-01", -5.0, "fall"), ("2020-07-31", -20.0, "winter"),
])
def test_derive_season(date, lat, season):
    assert derive_season(date, lat) == season


def _entry(loc, lat=10.0, date="2020-01-01", pop=0.0, lc="urban", cz="arid", v=0, **kw):
    rec = dict(location_id=loc, lat=lat, lon=0.0, sensor="WorldView-2", gsd=0.5, date=date, population=pop,
               land_cover=lc, climate_zone=cz, biome="dry-forest", path=f"{loc}/{v}.mtil")
    rec.update(kw)
    return ManifestEntry.from_dict(rec)


def test_entry_validation():
    with pytest.raises(ValueError, match="season"):
        _entry("a", season="summer")
    with pytest.raises(ValueError, match="year"):
        _entry("a", year=2019)
    with pytest.raises(ValueError, match="sensor"):
        _entry("a", sensor="Landsat")
    with pytest.raises(ValueError, match="unknown"):
        ManifestEntry.from_dict({**_entry("a").to_dict(), "cloud": 0.1})


def test_jsonl_round_trip(tmp_path):
    cat = gen_catalog(30, seed=1)
    write_jsonl(tmp_path / "c.jsonl", cat)
    assert read_jsonl(tmp_path / "c.jsonl") == cat
    (tmp_path / "bad.jsonl").write_text(json.dumps({**cat[0].to_dict(), "season": "x"}) + "\n")
    with pytest.raises(ValueError, match="bad.jsonl:1"):
        read_jsonl(tmp_path / "bad.jsonl")


# -- sampler -----------------------------------------------------------------
@pytest.mark.parametrize("seed", range(5))
def test_sampler_satisfies_quotas(seed):
    cat = gen_catalog(400, seed=seed)
    q = SamplerQuotas(target_locations=40)
    man, diag = sample_manifest(cat, q, seed=seed)
    assert check_manifest(man, cat, q) == []
    assert diag["locations"] == 40 and diag["violations"] == []
    assert diag["max_views_observed"] <= 4 and diag["duplicate_season_locations"] == 0


def test_sampler_is_deterministic_and_seed_sensitive():
    cat = gen_catalog(300, seed=0)
    q = SamplerQuotas(target_locations=20)
    assert sample_manifest(cat, q, seed=1)[0] == sample_manifest(cat, q, seed=1)[0]
    assert sample_manifest(cat, q, seed=1)[0] != sample_manifest(cat, q, seed=2)[0]


def test_sampler_uses_all_locations_without_budget():
    cat = gen_catalog(300, seed=3)
    pops = {e.location_id: e.population > 0 for e in cat}
    frac = sum(pops.values()) / len(pops)
    man, diag = sample_manifest(cat, SamplerQuotas(population_nonzero_fraction=frac))
    assert diag["locations"] == len(pops) and diag["nonzero_population_fraction"] == frac


def test_repeat_seasons_allowed_when_requested():
    cat = [_entry("a", date=f"2020-01-0{d}", v=d) for d in range(1, 4)]
    q = SamplerQuotas(distinct_seasons=False, population_nonzero_fraction=0.0)
    man, _ = sample_manifest(cat, q)
    assert len(man) == 3
    man, _ = sample_manifest(cat, SamplerQuotas(population_nonzero_fraction=0.0))
    assert len(man) == 1


def test_infeasible_population_raises_and_best_effort_warns():
    cat = [_entry(f"l{i}", pop=0.0) for i in range(10)]
    with pytest.raises(QuotaError, match="population"):
        sample_manifest(cat, SamplerQuotas(target_locations=5))
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        man, diag = sample_manifest(cat, SamplerQuotas(target_locations=5), best_effort=True)
    assert len(man) == 5 and diag["violations"] and w


def test_budget_too_small_for_strata_raises():
    cat = [_entry(f"l{i}", lc=lc, pop=float(i % 2)) for i, lc in enumerate(["urban", "forest", "cropland"] * 2)]
    with pytest.raises(QuotaError, match="stratum"):
        sample_manifest(cat, SamplerQuotas(target_locations=2, population_nonzero_fraction=0.5))


def test_duplicate_catalog_paths_rejected():
    e = _entry("a")
    with pytest.raises(ValueError, match="repeats"):
        sample_manifest([e, e])


def _brute_force_feasible(catalog, q):
    locs = defaultdict(list)
    for e in catalog:
        locs[e.location_id].append(e)
    names = sorted(locs)
    strata = {e.stratum for e in catalog}
    for combo in itertools.combinations(names, q.target_locations):
        frac = sum(locs[n][0].population > 0 for n in combo) / len(combo)
        cover = Counter(locs[n][0].stratum for n in combo)
        if (abs(frac - q.population_nonzero_fraction) <= q.population_tolerance + 1e-12
                and all(cover[s] >= q.min_stratum_coverage for s in strata)):
            return True
    return False


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["urban", "forest", "cropland"]), st.booleans()), min_size=2, max_size=9),
       st.integers(1, 9), st.sampled_from([0.3, 0.5, 0.6]), st.sampled_from([0.0, 0.1, 0.2]), st.integers(0, 50))
def test_sampler_agrees_with_brute_force_feasibility(locs, target, frac, tol, seed):
    target = min(target, len(locs))
    cat = [_entry(f"l{i}", lc=lc, pop=float(nz)) for i, (lc, nz) in enumerate(locs)]
    q = SamplerQuotas(target_locations=target, population_nonzero_fraction=frac, population_tolerance=tol)
    feasible = _brute_force_feasible(cat, q)
    try:
        man, _ = sample_manifest(cat, q, seed=seed)
    except QuotaError:
        assert not feasible
        return
    assert feasible and check_manifest(man, cat, q) == []
