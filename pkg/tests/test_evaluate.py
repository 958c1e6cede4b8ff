"""Metric and baseline tests: closed forms, grouping oracles, the discrete
maximum principle, and CSV round trips."""

import numpy as np
import pytest

from pscan import evaluate as ev
from pscan import imageio
from pscan import scanpath as sp
from pscan.config import RunConfig
from pscan.errors import ContractError


def make_mask(weights):
    base = sp.archimedes_spiral(32, 1 / 10)
    w = np.asarray(weights, dtype=np.float32)
    return sp.PathMask(weights=w, traversal=base.traversal, recorded=base.recorded,
                       nominal_coverage=float(w.mean()),
                       measured_coverage=float((w > 0).mean()), kind="spiral")


# ---------------------------------------------------------------------------
# rms_error


def test_rms_equal_is_zero_and_symmetric():
    rng = np.random.default_rng(0)
    a = rng.random((16, 16))
    b = rng.random((16, 16))
    assert ev.rms_error(a, a) == 0.0
    assert ev.rms_error(a, b) == pytest.approx(ev.rms_error(b, a))
    assert ev.rms_error(a, b) > 0


def test_rms_uniform_offset():
    a = np.zeros((8, 8))
    assert ev.rms_error(a + 0.1, a) == pytest.approx(0.1, rel=1e-9)


def test_rms_matches_double_precision_oracle():
    rng = np.random.default_rng(1)
    a = rng.random((32, 32)).astype(np.float32)
    b = rng.random((32, 32)).astype(np.float32)
    want = np.sqrt(sum((float(x) - float(y)) ** 2
                       for x, y in zip(a.ravel(), b.ravel())) / a.size)
    assert ev.rms_error(a, b) == pytest.approx(want, rel=1e-12)


# ---------------------------------------------------------------------------
# histogram


def test_histogram_all_zero_in_first_bin():
    counts = ev.histogram(np.zeros(17))
    assert counts[0] == 17 and counts.sum() == 17


def test_histogram_clamp_rule():
    counts = ev.histogram([0.224, 0.3, 1e9])
    assert counts[-1] == 3


def test_histogram_uniform_approximately_flat():
    rng = np.random.default_rng(2)
    counts = ev.histogram(rng.uniform(0, 0.224, size=100000))
    assert counts.sum() == 100000
    assert counts.min() > 0.7 * counts.mean()
    assert counts.max() < 1.3 * counts.mean()


def test_histogram_csv_has_100_rows(tmp_path):
    path = tmp_path / "hist.csv"
    ev.histogram_csv(path, ev.histogram([0.01, 0.05]))
    header, rows = imageio.read_csv(path)
    assert header == ["bin_left", "count"]
    assert len(rows) == 100
    assert sum(int(r[1]) for r in rows) == 2


# ---------------------------------------------------------------------------
# per-pixel MSE


def test_per_pixel_mse_identical_pair_zero():
    img = np.random.default_rng(3).random((8, 8))
    m, mu, sigma = ev.per_pixel_mse([img], [img])
    np.testing.assert_array_equal(m, 0.0)
    assert mu == 0.0 and sigma == 0.0


def test_per_pixel_mse_two_image_hand_computed():
    p1, t1 = np.array([[1.0, 0.0]]), np.array([[0.0, 0.0]])
    p2, t2 = np.array([[0.0, 2.0]]), np.array([[0.0, 0.0]])
    m, mu, sigma = ev.per_pixel_mse([p1, p2], [t1, t2])
    np.testing.assert_allclose(m, [[0.5, 2.0]])
    assert mu == pytest.approx(1.25)
    assert m.shape == (1, 2)


def test_per_pixel_mse_is_average_of_squared_maps():
    rng = np.random.default_rng(4)
    preds = [rng.random((6, 6)) for _ in range(5)]
    truths = [rng.random((6, 6)) for _ in range(5)]
    m, _, _ = ev.per_pixel_mse(preds, truths)
    want = np.mean([(p - t) ** 2 for p, t in zip(preds, truths)], axis=0)
    np.testing.assert_allclose(m, want, rtol=1e-12)


# ---------------------------------------------------------------------------
# error vs distance


def test_error_vs_distance_flat_map():
    dist = np.tile(np.arange(64, dtype=np.float64), (64, 1))
    mse = np.full((64, 64), 0.25)
    lefts, means, counts = ev.error_vs_distance(mse, dist)
    np.testing.assert_allclose(means, 0.25)
    assert (counts >= 50).all()


def test_error_vs_distance_identity_curve():
    dist = np.tile(np.arange(64, dtype=np.float64), (64, 1))
    lefts, means, _ = ev.error_vs_distance(dist.copy(), dist)
    np.testing.assert_allclose(means, lefts, atol=1e-9)


def test_error_vs_distance_matches_grouping_oracle():
    rng = np.random.default_rng(5)
    dist = rng.uniform(0, 6, size=(40, 40))
    mse = rng.random((40, 40))
    lefts, means, counts = ev.error_vs_distance(mse, dist)
    for left, mean, count in zip(lefts, means, counts):
        sel = (dist >= left) & (dist < left + 1)
        assert count == sel.sum()
        assert mean == pytest.approx(float(mse[sel].mean()), rel=1e-12)


def test_error_vs_distance_drops_sparse_bins():
    dist = np.zeros((32, 32))
    dist[0, 0] = 40.0            # a single far pixel: bin 40 has 1 < 50 px
    lefts, _, _ = ev.error_vs_distance(np.ones((32, 32)), dist)
    assert 40.0 not in lefts


# ---------------------------------------------------------------------------
# baselines


def test_baselines_full_mask_identity():
    scan = np.random.default_rng(6).random((16, 16)).astype(np.float32)
    mask = make_mask(np.ones((16, 16)))
    np.testing.assert_array_equal(ev.baseline_complete(scan, mask, "nn"), scan)
    np.testing.assert_array_equal(ev.baseline_complete(scan, mask, "laplace"), scan)


def test_laplace_linear_ramp():
    w = np.zeros((8, 17), dtype=np.float32)
    w[:, 0] = 1.0
    w[:, -1] = 1.0
    mask = make_mask(w)
    scan = np.zeros((8, 17), dtype=np.float32)
    scan[:, 0] = 1.0
    scan[:, -1] = 3.0
    out = ev.laplace_infill(scan, mask, tol=1e-7)
    want = np.tile(np.linspace(1.0, 3.0, 17), (8, 1))
    np.testing.assert_allclose(out, want, atol=1e-3)


def test_laplace_maximum_principle():
    rng = np.random.default_rng(7)
    on = rng.random((24, 24)) < 0.08
    on[5, 5] = True
    mask = make_mask(on.astype(np.float32))
    scan = rng.random((24, 24)).astype(np.float32) * on
    out = ev.laplace_infill(scan, mask)
    on_values = scan[on]
    assert out.max() <= on_values.max() + 1e-5
    assert out.min() >= on_values.min() - 1e-5


def test_nn_baseline_equals_pipeline_infill():
    from pscan.pipeline import nn_infill
    mask = sp.archimedes_spiral(32, 1 / 10)
    scan = np.random.default_rng(8).random((32, 32)).astype(np.float32) * mask.weights
    np.testing.assert_array_equal(ev.baseline_complete(scan, mask, "nn"),
                                  nn_infill(scan, mask))


def test_unknown_baseline_rejected():
    with pytest.raises(ContractError):
        ev.baseline_complete(np.zeros((8, 8)), make_mask(np.ones((8, 8))), "cubic")


# ---------------------------------------------------------------------------
# coverage sweep + CSV round trip


def test_coverage_sweep_baselines_only(tmp_path):
    cfg = RunConfig(side=32, synthetic_train=2, synthetic_val=2, synthetic_test=2,
                    seed=3, out_dir=str(tmp_path))
    res = ev.coverage_sweep(cfg, [1 / 10], tmp_path, models=None, max_images=2)
    methods = {r[3] for r in res.rows}
    assert methods == {"nn", "laplace"}
    per_method = [r for r in res.rows if r[3] == "nn"]
    assert len(per_method) == 2
    # summary mean equals the mean of per-image rows
    mean_nn = [s[2] for s in res.summaries if s[1] == "nn"][0]
    assert mean_nn == pytest.approx(np.mean([r[4] for r in per_method]))
    header, rows = imageio.read_csv(tmp_path / "sweep_summary.csv")
    assert len(rows) == 2


def test_csv_round_trip(tmp_path):
    rows = [(0.05, 3, 0, "nn", 0.123456789012), (0.05, 3, 1, "laplace", 1e-9)]
    path = tmp_path / "х.csv"
    imageio.write_csv(path, ["coverage", "seed", "image", "method", "rms"], rows)
    _, parsed = imageio.read_csv(path)
    for row, back in zip(rows, parsed):
        assert float(back[0]) == row[0]
        assert int(back[1]) == row[1]
        assert back[3] == row[3]
        assert float(back[4]) == row[4]


def test_histogram_svg(tmp_path):
    counts = ev.histogram(np.random.default_rng(9).uniform(0, 0.2, size=500))
    path = tmp_path / "hist.svg"
    ev.histogram_svg(path, counts)
    text = path.read_text()
    assert text.startswith("<svg") and text.count("<rect") == 100
