"""Quantitative characterization: RMS error distributions, per-pixel MSE
maps, error-versus-distance curves, classical baselines, coverage sweeps.

RMS errors are measured against the blurred ground truth by default (the
image the generator was trained to output); a flag switches to the raw
normalized truth for sensitivity analysis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imageio
from .config import RunConfig
from .errors import ContractError
from .pipeline import nn_infill
from .scanpath import PathMask, distance_map

HIST_BINS = 100
HIST_RANGE = (0.0, 0.224)


def rms_error(pred: np.ndarray, truth: np.ndarray) -> float:
    """Root mean squared intensity difference (double-precision sum)."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ContractError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    d = pred - truth
    return float(np.sqrt(np.mean(d * d)))


def histogram(errors, bins: int = HIST_BINS, value_range=HIST_RANGE) -> np.ndarray:
    """Left-closed bins over the range; overshoots clamp into the last bin."""
    errors = np.asarray(list(errors), dtype=np.float64)
    lo, hi = value_range
    width = (hi - lo) / bins
    idx = np.floor((errors - lo) / width).astype(np.int64)
    idx = np.clip(idx, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    return counts.astype(np.int64)


def histogram_csv(path, counts, bins: int = HIST_BINS, value_range=HIST_RANGE):
    lo, hi = value_range
    width = (hi - lo) / bins
    rows = [(lo + i * width, int(c)) for i, c in enumerate(counts)]
    imageio.write_csv(path, ["bin_left", "count"], rows)


def histogram_svg(path, counts, bins: int = HIST_BINS, value_range=HIST_RANGE,
                  width: int = 640, height: int = 240):
    """Minimal SVG bar rendering of an error histogram."""
    counts = np.asarray(counts)
    peak = max(1, int(counts.max()))
    bar_w = width / len(counts)
    bars = []
    for i, c in enumerate(counts):
        h = height * int(c) / peak
        bars.append(f'<rect x="{i * bar_w:.2f}" y="{height - h:.2f}" '
                    f'width="{bar_w:.2f}" height="{h:.2f}" fill="#4878a8"/>')
    lo, hi = value_range
    svg = (f'<svg xmlns="http://www.w3.org/2000/svg" '
           f'width="{width}" height="{height + 20}">\n'
           + "\n".join(bars) +
           f'\n<text x="0" y="{height + 14}" font-size="11">{lo}</text>'
           f'\n<text x="{width - 40}" y="{height + 14}" font-size="11">{hi}</text>'
           f'\n</svg>\n')
    Path(path).write_text(svg)


def per_pixel_mse(preds, truths) -> tuple[np.ndarray, float, float]:
    """Elementwise mean of squared errors over an image set, plus its
    global mean and standard deviation over map pixels."""
    acc = None
    n = 0
    for pred, truth in zip(preds, truths):
        d = np.asarray(pred, np.float64) - np.asarray(truth, np.float64)
        sq = d * d
        if acc is None:
            acc = sq
        elif sq.shape != acc.shape:
            raise ContractError("inconsistent image shapes in per_pixel_mse")
        else:
            acc += sq
        n += 1
    if n == 0:
        raise ContractError("per_pixel_mse needs at least one image pair")
    mse_map = acc / n
    return mse_map, float(mse_map.mean()), float(mse_map.std())


def error_vs_distance(mse_map: np.ndarray, dist: np.ndarray, bin_width: float = 1.0,
                      min_pixels: int = 50):
    """Mean map value per integer distance bin; sparse bins are dropped.

    Returns (bin_lefts, means, counts) as arrays.
    """
    if mse_map.shape != dist.shape:
        raise ContractError("map and distance shapes differ")
    idx = np.floor(np.asarray(dist, np.float64) / bin_width).astype(np.int64)
    n_bins = int(idx.max()) + 1
    counts = np.bincount(idx.ravel(), minlength=n_bins)
    sums = np.bincount(idx.ravel(), weights=np.asarray(mse_map, np.float64).ravel(),
                       minlength=n_bins)
    keep = counts >= min_pixels
    lefts = np.nonzero(keep)[0].astype(np.float64) * bin_width
    means = sums[keep] / counts[keep]
    return lefts, means, counts[keep]


# ---------------------------------------------------------------------------
# classical baselines


def laplace_infill(scan: np.ndarray, mask: PathMask, tol: float = 1e-4,
                   max_iters: int = 10 ** 4) -> np.ndarray:
    """Solve the discrete Laplace equation off-path with on-path Dirichlet
    values (Jacobi iterations, mirrored borders)."""
    on = mask.on_path()
    if not on.any():
        raise ContractError("laplace baseline needs at least one on-path pixel")
    scan = np.asarray(scan, dtype=np.float32)
    x = nn_infill(scan, mask) if not mask.blurred else scan.copy()
    fixed = np.where(on, scan, 0.0)
    for _ in range(max_iters):
        p = np.pad(x, 1, mode="edge")
        avg = 0.25 * (p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:])
        new = np.where(on, fixed, avg)
        resid = float(np.abs(new - x).max())
        x = new
        if resid < tol:
            break
    return x.astype(np.float32)


def baseline_complete(scan: np.ndarray, mask: PathMask, method: str) -> np.ndarray:
    """Classical completion baselines sharing the network's input."""
    if method == "nn":
        return nn_infill(scan, mask)
    if method == "laplace":
        return laplace_infill(scan, mask)
    raise ContractError(f"unknown baseline {method!r}, expected 'nn' or 'laplace'")


# ---------------------------------------------------------------------------
# coverage sweep


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)      # per-image records
    summaries: list = field(default_factory=list)  # per-coverage records
    hist_paths: dict = field(default_factory=dict)


def coverage_sweep(cfg: RunConfig, coverages, out_dir, models=None, dataset=None,
                   against: str = "blurred", baselines=("nn", "laplace"),
                   max_images: int | None = None) -> SweepResult:
    """Per-coverage RMS statistics over the test split.

    Masks are regenerated per coverage with recorded seeds; emits per-image
    rows, per-coverage summaries, and one 100-bin histogram CSV per coverage.
    Runs baselines only when ``models`` is None.
    """
    from .train import build_dataset, build_example, build_mask  # lazy: no cycle
    import dataclasses

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = dataset or build_dataset(cfg)
    n_test = dataset.n("test") if max_images is None else min(max_images,
                                                              dataset.n("test"))
    result = SweepResult()
    methods = (["model"] if models is not None else []) + list(baselines)

    for coverage in coverages:
        sweep_cfg = dataclasses.replace(cfg, coverage=float(coverage))
        mask = build_mask(sweep_cfg)
        errors = {m: [] for m in methods}
        for i in range(n_test):
            ex = build_example(sweep_cfg, dataset, mask, "test", i, 0, None)
            truth = ex.target_full if against == "blurred" else (ex.real_full + 1) / 2
            for method in methods:
                if method == "model":
                    comp, _ = models.gen.forward(ex, models.norm)
                    pred = comp.data[0, 0]
                else:
                    pred = baseline_complete(ex.input_scan, mask, method)
                err = rms_error(pred, truth)
                errors[method].append(err)
                result.rows.append((float(coverage), int(mask.seed), i, method, err))
        for method in methods:
            errs = errors[method]
            result.summaries.append((float(coverage), method,
                                     float(np.mean(errs)), float(np.median(errs))))
        first = methods[0]
        hist_path = out / f"hist_{coverage:.6f}.csv"
        histogram_csv(hist_path, histogram(errors[first]))
        result.hist_paths[float(coverage)] = str(hist_path)

    imageio.write_csv(out / "sweep_rows.csv",
                      ["coverage", "mask_seed", "image", "method", "rms"],
                      result.rows)
    imageio.write_csv(out / "sweep_summary.csv",
                      ["coverage", "method", "mean_rms", "median_rms"],
                      result.summaries)
    return result


def export_error_map(out_dir, name: str, mse_map: np.ndarray):
    """Error map as 16-bit PGM preview plus exact float32 payload."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    imageio.write_map_pgm16(out / f"{name}.pgm", mse_map)
    imageio.write_f32(out / f"{name}.f32", mse_map.astype(np.float32))
