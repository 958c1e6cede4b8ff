"""Pipeline tests: normalization, augmentation, blur, selection, infill,
example assembly, synthetic data, and ingest."""

import logging

import numpy as np
import pytest
from PIL import Image

from pscan import pipeline as pl
from pscan import scanpath as sp
from pscan.errors import ContractError, DataError
from pscan.filters import gaussian_kernel_5x5


# ---------------------------------------------------------------------------
# normalize


def test_normalize_endpoints():
    out = pl.normalize(np.array([[0.0, 10.0]]))
    np.testing.assert_allclose(out, [[-1.0, 1.0]])


def test_normalize_constant_crop_is_zero():
    out = pl.normalize(np.full((8, 8), 3.7))
    np.testing.assert_array_equal(out, 0.0)


def test_normalize_nan_treated_as_zero():
    crop = np.array([[np.nan, 2.0], [4.0, -2.0]])
    out = pl.normalize(crop)
    # NaN -> 0 before the min/max scan: range [-2, 4], 0 maps to -1/3
    np.testing.assert_allclose(out[0, 0], (2 * (0 - (-2)) / 6 - 1), rtol=1e-6)
    assert np.isfinite(out).all()


def test_normalize_idempotent_on_full_range_output():
    rng = np.random.default_rng(0)
    crop = rng.normal(size=(16, 16))
    once = pl.normalize(crop)
    twice = pl.normalize(once)
    np.testing.assert_allclose(twice, once, atol=1e-6)


# ---------------------------------------------------------------------------
# augment


def test_augment_code0_identity():
    img = np.random.default_rng(1).normal(size=(5, 5))
    np.testing.assert_array_equal(pl.augment(img, 0), img)


@pytest.mark.parametrize("code", range(8))
def test_augment_inverse(code):
    img = np.random.default_rng(2).normal(size=(6, 6))
    out = pl.augment(pl.augment(img, code), pl.inverse_code(code))
    np.testing.assert_array_equal(out, img)


def test_augment_eight_distinct_images():
    pattern = np.arange(9, dtype=np.float32).reshape(3, 3)
    images = [pl.augment(pattern, c) for c in range(8)]
    for i in range(8):
        for j in range(i + 1, 8):
            assert not np.array_equal(images[i], images[j])


def test_augment_code_out_of_range():
    with pytest.raises(ContractError):
        pl.augment(np.zeros((3, 3)), 8)


# ---------------------------------------------------------------------------
# gaussian blur


def test_blur_constant_unchanged():
    out = pl.gaussian_blur(np.full((12, 12), 0.6))
    np.testing.assert_allclose(out, 0.6, atol=1e-6)


def test_blur_impulse_kernel_imprint():
    img = np.zeros((11, 11), dtype=np.float32)
    img[5, 5] = 1.0
    out = pl.gaussian_blur(img)
    np.testing.assert_allclose(out[3:8, 3:8], gaussian_kernel_5x5(), atol=1e-7)


def test_kernel_center_weight_analytic():
    # independent evaluation of exp(-(x^2+y^2)/(2*2.5^2)) normalized to sum 1
    ax = np.arange(-2, 3, dtype=np.float64)
    xx, yy = np.meshgrid(ax, ax)
    raw = np.exp(-(xx ** 2 + yy ** 2) / (2 * 2.5 ** 2))
    center = raw[2, 2] / raw.sum()
    assert gaussian_kernel_5x5()[2, 2] == pytest.approx(center, rel=1e-6)


def test_blur_preserves_mean():
    rng = np.random.default_rng(5)
    img = rng.normal(size=(32, 32)).astype(np.float32)
    out = pl.gaussian_blur(img)
    assert abs(float(out.mean()) - float(img.mean())) < 1e-6


# ---------------------------------------------------------------------------
# select_partial


def full_mask(side):
    m = sp.archimedes_spiral(max(side, 32), 1 / 10)
    w = np.ones((side, side), dtype=np.float32)
    return sp.PathMask(weights=w, traversal=m.traversal, recorded=m.recorded,
                       nominal_coverage=1.0, measured_coverage=1.0, kind="spiral")


def test_select_partial_full_mask_identity():
    crop = pl.normalize(np.random.default_rng(6).normal(size=(32, 32)))
    out = pl.select_partial(crop, full_mask(32))
    np.testing.assert_array_equal(out, crop)


def test_select_partial_off_path_zero():
    m = sp.archimedes_spiral(64, 1 / 20)
    crop = pl.normalize(np.random.default_rng(7).normal(size=(64, 64)))
    out = pl.select_partial(crop, m)
    assert (out[m.weights == 0] == 0).all()


def test_select_partial_noise_formula_oracle():
    m = sp.blur_mask(sp.archimedes_spiral(64, 1 / 20))
    crop = pl.normalize(np.random.default_rng(8).normal(size=(64, 64)))
    model = sp.NoiseModel(seed=77)
    got = pl.select_partial(crop, m, model)
    u = np.random.default_rng(77).uniform(0.0, 2.0, size=(64, 64)).astype(np.float32)
    phi = m.weights
    want = (phi * crop) * (phi + (1 - phi) * u)
    np.testing.assert_allclose(got, want, rtol=1e-6)


def test_select_partial_noise_with_binary_mask_rejected():
    m = sp.archimedes_spiral(64, 1 / 20)
    with pytest.raises(ContractError):
        pl.select_partial(np.zeros((64, 64), dtype=np.float32), m, sp.NoiseModel())


# ---------------------------------------------------------------------------
# nn_infill


def test_infill_full_mask_identity():
    crop = np.random.default_rng(9).normal(size=(16, 16)).astype(np.float32)
    np.testing.assert_array_equal(pl.nn_infill(crop, full_mask(16)), crop)


def test_infill_single_pixel_constant():
    m = full_mask(16)
    m.weights[:] = 0.0
    m.weights[4, 9] = 1.0
    m._nn_sources = None
    scan = np.zeros((16, 16), dtype=np.float32)
    scan[4, 9] = 2.5
    np.testing.assert_array_equal(pl.nn_infill(scan, m), 2.5)


def test_infill_matches_bruteforce_with_lexicographic_ties():
    rng = np.random.default_rng(10)
    for trial in range(3):
        on = rng.random((16, 16)) < 0.12
        on[3, 3] = True
        m = full_mask(16)
        m.weights = on.astype(np.float32)
        m._nn_sources = None
        scan = rng.normal(size=(16, 16)).astype(np.float32) * on
        got = pl.nn_infill(scan, m)
        ys, xs = np.nonzero(on)
        want = np.empty_like(scan)
        for r in range(16):
            for c in range(16):
                keys = [((r - y) ** 2 + (c - x) ** 2, y, x) for y, x in zip(ys, xs)]
                _, y, x = min(keys)
                want[r, c] = scan[y, x]
        np.testing.assert_array_equal(got, want)


def test_infill_preserves_on_path_exactly():
    m = sp.archimedes_spiral(64, 1 / 20)
    scan = np.random.default_rng(11).normal(size=(64, 64)).astype(np.float32)
    scan = scan * m.weights
    out = pl.nn_infill(scan, m)
    on = m.weights > 0
    assert np.array_equal(out[on], scan[on])


def test_infill_empty_mask_rejected():
    m = full_mask(16)
    m.weights = np.zeros((16, 16), dtype=np.float32)
    m._nn_sources = None
    with pytest.raises(ContractError):
        pl.nn_infill(np.zeros((16, 16), dtype=np.float32), m)


# ---------------------------------------------------------------------------
# make_example


def test_make_example_full_mask_no_infill():
    crop = pl.normalize(np.random.default_rng(12).normal(size=(64, 64)))
    ex = pl.make_example(crop, full_mask(64), pl.ExampleConfig(infill=False))
    np.testing.assert_allclose(ex.input_scan, (crop + 1) / 2, atol=1e-6)


def test_make_example_half_target_consistent():
    crop = pl.normalize(np.random.default_rng(13).normal(size=(64, 64)))
    m = sp.archimedes_spiral(64, 1 / 20)
    ex = pl.make_example(crop, m, pl.ExampleConfig())
    np.testing.assert_array_equal(ex.target_half, pl.bilinear_down(ex.target_full, 32, 32))


def test_make_example_composition_oracle():
    side = 64
    src = pl.SyntheticSource(spacing=8.0, peak_width=2.0, orientation=0.4,
                             noise_level=0.0, seed=21)
    crop = pl.normalize(pl.synth_micrograph(src, side))
    mask = sp.archimedes_spiral(side, 1 / 20)
    cfg = pl.ExampleConfig(infill=True)
    ex = pl.make_example(crop, mask, cfg)
    # compose the single ops independently
    want_target = (pl.gaussian_blur(crop) + 1) / 2
    np.testing.assert_allclose(ex.target_full, want_target, atol=1e-6)
    want_scan = pl.nn_infill((mask.weights * crop + 1) / 2, mask)
    np.testing.assert_allclose(ex.input_scan, want_scan, atol=1e-6)
    np.testing.assert_array_equal(ex.path_channel, mask.weights)
    np.testing.assert_array_equal(ex.real_full, crop)


def test_pipeline_determinism():
    ds = pl.SyntheticDataset(64, {"train": 4, "validation": 2, "test": 2}, seed=3)
    mask = sp.archimedes_spiral(64, 1 / 20)
    cfg = pl.ExampleConfig()

    def build():
        crop = pl.normalize(pl.augment(ds.get("train", 1), 5))
        return pl.make_example(crop, mask, cfg)

    a, b = build(), build()
    assert np.array_equal(a.input_scan, b.input_scan)
    assert np.array_equal(a.target_full, b.target_full)


# ---------------------------------------------------------------------------
# synthetic micrographs


def test_synth_zero_peaks_background_only():
    src = pl.SyntheticSource(peak_amp=0.0, background=0.0, noise_level=0.0, seed=1)
    np.testing.assert_array_equal(pl.synth_micrograph(src, 48), 0.0)
    src_bg = pl.SyntheticSource(peak_amp=0.0, background=0.3, noise_level=0.0, seed=1)
    img = pl.synth_micrograph(src_bg, 48)
    assert np.isfinite(img).all() and img.std() > 0


def test_synth_peak_is_local_max():
    src = pl.SyntheticSource(spacing=16.0, peak_width=2.0, noise_level=0.0,
                             background=0.0, seed=4)
    img = pl.synth_micrograph(src, 64)
    sites = pl.lattice_sites(src, 64)
    inner = [s for s in sites if 4 <= s[0] <= 59 and 4 <= s[1] <= 59]
    assert inner
    r, c = int(round(inner[0][0])), int(round(inner[0][1]))
    patch = img[r - 2:r + 3, c - 2:c + 3]
    assert patch.max() == patch[2, 2]


def test_synth_peak_count_matches_lattice_sites():
    src = pl.SyntheticSource(spacing=12.0, peak_width=1.8, orientation=0.3,
                             noise_level=0.0, background=0.0, seed=8)
    side = 96
    img = pl.synth_micrograph(src, side)
    sites = pl.lattice_sites(src, side)
    margin = 6
    # a site rounds onto its pixel, so give the site filter the 0.5 px slack
    inside = [(r, c) for r, c in sites
              if margin - 0.5 <= r < side - 0.5 - margin
              and margin - 0.5 <= c < side - 0.5 - margin]
    # counting oracle: strict local maxima of the rendered image
    from scipy.ndimage import maximum_filter
    local_max = (img == maximum_filter(img, size=5)) & (img > 0.3)
    ys, xs = np.nonzero(local_max)
    interior = [(y, x) for y, x in zip(ys, xs)
                if margin <= y <= side - 1 - margin and margin <= x <= side - 1 - margin]
    assert len(interior) == len(inside)


def test_synth_determinism_and_spacing_contract():
    src = pl.SyntheticSource(seed=9)
    a = pl.synth_micrograph(src, 64)
    b = pl.synth_micrograph(src, 64)
    assert np.array_equal(a, b)
    with pytest.raises(ContractError):
        pl.synth_micrograph(pl.SyntheticSource(spacing=3.0), 64)


# ---------------------------------------------------------------------------
# ingest


def _write_split(tmp_path, split, names, side=32):
    d = tmp_path / split
    d.mkdir(parents=True, exist_ok=True)
    from pscan import imageio
    rng = np.random.default_rng(1)
    for name in names:
        imageio.write_tiff(d / name, rng.normal(size=(side, side)).astype(np.float32))


def test_ingest_counts(tmp_path):
    _write_split(tmp_path, "train", ["a.tif", "b.tif", "c.tif"])
    _write_split(tmp_path, "validation", ["d.tif"])
    _write_split(tmp_path, "test", ["e.tif"])
    idx = pl.ingest(tmp_path, side=32)
    assert idx.n("train") == 3
    assert idx.get("train", 0).shape == (32, 32)


def test_ingest_crops_large_files(tmp_path):
    from pscan import imageio
    for split, names in [("train", ["a.tif"]), ("validation", ["b.tif"]), ("test", ["c.tif"])]:
        d = tmp_path / split
        d.mkdir()
        imageio.write_tiff(d / names[0], np.zeros((64, 96), dtype=np.float32))
    idx = pl.ingest(tmp_path, side=32)
    assert idx.n("train") == 2 * 3


def test_ingest_duplicate_across_splits_rejected(tmp_path):
    _write_split(tmp_path, "train", ["a.tif"])
    _write_split(tmp_path, "validation", ["a.tif"])
    _write_split(tmp_path, "test", ["b.tif"])
    with pytest.raises(DataError):
        pl.ingest(tmp_path, side=32)


def test_ingest_empty_split_rejected(tmp_path):
    _write_split(tmp_path, "train", ["a.tif"])
    with pytest.raises(DataError):
        pl.ingest(tmp_path, side=32)


def test_ingest_16bit_tiff_converted(tmp_path, caplog):
    values = (np.arange(32 * 32, dtype=np.uint16)).reshape(32, 32)
    for split, name in [("train", "a.tif"), ("validation", "b.tif"), ("test", "c.tif")]:
        d = tmp_path / split
        d.mkdir()
        Image.fromarray(values).save(d / name, format="TIFF")
    with caplog.at_level(logging.INFO, logger="pscan.imageio"):
        idx = pl.ingest(tmp_path, side=32)
        crop = idx.get("train", 0)
    # round trip: integer sample values survive the float conversion
    np.testing.assert_array_equal(crop, values.astype(np.float32))
    assert any("float32" in r.message for r in caplog.records)


def test_ingest_skips_unreadable(tmp_path, caplog):
    _write_split(tmp_path, "train", ["a.tif", "b.tif"])
    _write_split(tmp_path, "validation", ["c.tif"])
    _write_split(tmp_path, "test", ["d.tif"])
    (tmp_path / "train" / "broken.tif").write_bytes(b"not a tiff")
    with caplog.at_level(logging.WARNING):
        idx = pl.ingest(tmp_path, side=32)
    assert idx.n("train") == 2
    assert any("skipping" in r.message for r in caplog.records)


def test_augment_group_closure():
    probe = np.arange(16, dtype=np.float32).reshape(4, 4)
    images = [pl.augment(probe, c) for c in range(8)]
    for a in range(8):
        for b in range(8):
            composed = pl.augment(pl.augment(probe, a), b)
            assert any(np.array_equal(composed, img) for img in images)


def test_make_example_pm1_domain():
    crop = pl.normalize(np.random.default_rng(31).normal(size=(64, 64)))
    m = sp.archimedes_spiral(64, 1 / 20)
    ex = pl.make_example(crop, m, pl.ExampleConfig(output_domain="pm1"))
    np.testing.assert_allclose(ex.target_full, pl.gaussian_blur(crop), atol=1e-6)


def test_export_example(tmp_path):
    from pscan import imageio
    crop = pl.normalize(np.random.default_rng(33).normal(size=(64, 64)))
    ex = pl.make_example(crop, sp.archimedes_spiral(64, 1 / 20), pl.ExampleConfig())
    pl.export_example(tmp_path, "demo", ex)
    back = imageio.read_f32(tmp_path / "demo_input.f32")
    np.testing.assert_array_equal(back, ex.input_scan)
    assert (tmp_path / "demo_target.pgm").exists()
    assert (tmp_path / "demo_target_half.f32").exists()
