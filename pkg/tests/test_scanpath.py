"""Scan-path generation, noise model, and distance-map tests.

Coverage values are checked with a pixel-count oracle (recount the mask),
distance maps against an all-pairs brute force, and the noise model against
its analytic mean.
"""

import numpy as np
import pytest

from pscan import scanpath as sp
from pscan.errors import ContractError
from pscan.filters import gaussian_kernel_5x5


def count_coverage(mask):
    return float((mask.weights > 0).sum()) / mask.weights.size


def max_step(traversal):
    return float(np.linalg.norm(np.diff(traversal, axis=0), axis=1).max())


# ---------------------------------------------------------------------------
# spiral


def test_spiral_coverage_512_at_one_twentieth():
    m = sp.archimedes_spiral(512, 1 / 20)
    assert 0.045 <= count_coverage(m) <= 0.055
    assert m.measured_coverage == pytest.approx(count_coverage(m))


def test_spiral_traversal_continuity():
    m = sp.archimedes_spiral(256, 1 / 20)
    assert max_step(m.traversal) <= 1.0 + 1e-5


def test_spiral_fig1_family():
    for nominal in (1 / 10, 1 / 20, 1 / 40, 1 / 100):
        m = sp.archimedes_spiral(512, nominal)
        assert abs(m.measured_coverage - nominal) / nominal <= 0.10


def test_spiral_determinism():
    a = sp.archimedes_spiral(128, 1 / 20, seed=5)
    b = sp.archimedes_spiral(128, 1 / 20, seed=5)
    assert np.array_equal(a.weights, b.weights)
    assert np.array_equal(a.traversal, b.traversal)


def test_spiral_rejects_bad_requests():
    with pytest.raises(ContractError):
        sp.archimedes_spiral(16, 1 / 20)
    with pytest.raises(ContractError):
        sp.archimedes_spiral(128, 0.3)
    with pytest.raises(ContractError):
        sp.archimedes_spiral(128, 1 / 300)


# ---------------------------------------------------------------------------
# jittered grid


def test_grid_zero_jitter_is_even_horizontal_lines():
    m = sp.jittered_grid(256, 1 / 16, seed=0, jitter_frac=0.0)
    interior = m.weights[:, 1:-1]
    # every interior column sees the same set of scan rows
    cols = interior.T
    assert np.array_equal(cols, np.tile(cols[0], (cols.shape[0], 1)))
    rows = np.nonzero(cols[0])[0]
    gaps = np.diff(rows)
    # as even as the pixel lattice allows for a non-integer pitch
    assert gaps.max() - gaps.min() <= 1


def test_grid_coverage_512_at_one_twentieth():
    m = sp.jittered_grid(512, 1 / 20, seed=1)
    assert 0.045 <= count_coverage(m) <= 0.055


def test_grid_determinism_and_continuity():
    a = sp.jittered_grid(256, 1 / 20, seed=9)
    b = sp.jittered_grid(256, 1 / 20, seed=9)
    assert np.array_equal(a.weights, b.weights)
    assert max_step(a.traversal) <= np.sqrt(2) + 1e-5


def test_grid_different_seeds_differ():
    a = sp.jittered_grid(256, 1 / 20, seed=0)
    b = sp.jittered_grid(256, 1 / 20, seed=1)
    assert not np.array_equal(a.weights, b.weights)


# ---------------------------------------------------------------------------
# calibration invariant at side 256


@pytest.mark.parametrize("nominal", [1 / 10, 1 / 20, 1 / 40, 1 / 100])
@pytest.mark.parametrize("kind", ["spiral", "jittered_grid"])
def test_calibration_within_ten_percent_side_256(kind, nominal):
    if kind == "spiral":
        m = sp.archimedes_spiral(256, nominal)
    else:
        m = sp.jittered_grid(256, nominal, seed=2)
    assert abs(m.measured_coverage - nominal) / nominal <= 0.10


def test_spiral_more_uniform_than_grid_side_256():
    s = sp.archimedes_spiral(256, 1 / 20)
    g = sp.jittered_grid(256, 1 / 20, seed=0)
    p_s = np.percentile(sp.distance_map(s), 95)
    p_g = np.percentile(sp.distance_map(g), 95)
    assert p_s < p_g


# ---------------------------------------------------------------------------
# blur_mask


def test_blur_all_ones_fixed_point():
    m = sp.archimedes_spiral(64, 1 / 10)
    m.weights[:] = 1.0
    b = sp.blur_mask(m)
    np.testing.assert_allclose(b.weights, 1.0, atol=1e-6)
    assert b.blurred


def test_blur_isolated_pixel_kernel_imprint():
    m = sp.archimedes_spiral(64, 1 / 10)
    m.weights[:] = 0.0
    m.weights[32, 32] = 1.0
    b = sp.blur_mask(m)
    kernel = gaussian_kernel_5x5()
    expected = kernel / kernel.max()
    np.testing.assert_allclose(b.weights[30:35, 30:35], expected, rtol=1e-5)
    assert b.weights.max() == pytest.approx(1.0)


def test_blur_bounds_and_double_blur_rejected():
    m = sp.archimedes_spiral(64, 1 / 10)
    b = sp.blur_mask(m)
    assert b.weights.min() >= 0.0 and b.weights.max() <= 1.0
    with pytest.raises(ContractError):
        sp.blur_mask(b)


# ---------------------------------------------------------------------------
# noise model


def test_noise_on_path_bit_unchanged():
    m = sp.archimedes_spiral(64, 1 / 10)
    scan = np.random.default_rng(0).normal(size=(64, 64)).astype(np.float32)
    scan *= m.weights
    noisy = sp.apply_noise(scan, m, sp.NoiseModel(seed=7))
    on = m.weights == 1.0
    assert np.array_equal(noisy[on], scan[on])


def test_noise_zero_input_stays_zero():
    m = sp.archimedes_spiral(64, 1 / 10)
    scan = np.zeros((64, 64), dtype=np.float32)
    noisy = sp.apply_noise(scan, m, sp.NoiseModel(seed=1))
    np.testing.assert_array_equal(noisy, 0.0)


def test_noise_monte_carlo_mean():
    # phi = 0.5, scan value 1: factor = 0.5 + 0.5 U, E = 1, sd = 0.5/sqrt(3)
    side = 1000   # 1e6 draws
    m = sp.archimedes_spiral(64, 1 / 10)
    half = sp.PathMask(weights=np.full((side, side), 0.5, dtype=np.float32),
                       traversal=m.traversal, recorded=m.recorded,
                       nominal_coverage=0.5, measured_coverage=1.0,
                       kind="spiral", blurred=True)
    scan = np.ones((side, side), dtype=np.float32)
    noisy = sp.apply_noise(scan, half, sp.NoiseModel(seed=123))
    se = (0.5 / np.sqrt(3.0)) / 1000.0
    assert abs(float(noisy.mean()) - 1.0) < 3 * se


def test_noise_bounds():
    m = sp.blur_mask(sp.archimedes_spiral(64, 1 / 10))
    scan = np.abs(np.random.default_rng(3).normal(size=(64, 64))).astype(np.float32)
    noisy = sp.apply_noise(scan, m, sp.NoiseModel(seed=4))
    assert (noisy >= 0).all()
    assert (noisy <= 2 * np.abs(scan) + 1e-6).all()


def test_noise_shape_mismatch():
    m = sp.archimedes_spiral(64, 1 / 10)
    with pytest.raises(ContractError):
        sp.apply_noise(np.zeros((32, 32), dtype=np.float32), m, sp.NoiseModel())


# ---------------------------------------------------------------------------
# distance map


def test_distance_all_on_is_zero():
    m = sp.archimedes_spiral(64, 1 / 10)
    m.weights[:] = 1.0
    np.testing.assert_array_equal(sp.distance_map(m), 0.0)


def test_distance_pythagorean():
    m = sp.archimedes_spiral(64, 1 / 10)
    m.weights[:] = 0.0
    m.weights[0, 0] = 1.0
    d = sp.distance_map(m)
    assert d[3, 4] == pytest.approx(5.0)
    assert d[0, 0] == 0.0


def test_distance_matches_bruteforce():
    rng = np.random.default_rng(12)
    m = sp.archimedes_spiral(64, 1 / 10)
    for trial in range(3):
        on = rng.random((32, 32)) < 0.05
        if not on.any():
            on[5, 7] = True
        m2 = sp.PathMask(weights=on.astype(np.float32)[:32, :32], traversal=m.traversal,
                         recorded=m.recorded, nominal_coverage=0.05,
                         measured_coverage=float(on.mean()), kind="spiral")
        got = sp.distance_map(m2)
        ys, xs = np.nonzero(on)
        yy, xx = np.meshgrid(np.arange(32), np.arange(32), indexing="ij")
        want = np.sqrt(np.min(
            (yy[..., None] - ys) ** 2 + (xx[..., None] - xs) ** 2, axis=-1))
        np.testing.assert_allclose(got, want, rtol=1e-5)


def test_distance_empty_mask_rejected():
    m = sp.archimedes_spiral(64, 1 / 10)
    m.weights[:] = 0.0
    with pytest.raises(ContractError):
        sp.distance_map(m)


def test_spiral_arc_step_parameter():
    fine = sp.archimedes_spiral(64, 1 / 10, arc_step=0.25)
    assert max_step(fine.traversal) <= 0.5
    with pytest.raises(ContractError):
        sp.archimedes_spiral(64, 1 / 10, arc_step=1.5)
