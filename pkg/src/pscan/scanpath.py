"""Scan-path generation, rasterization at calibrated coverage, dwell noise.

Two path families are supported: Archimedes spirals (radius proportional to
angle, the most spatially uniform continuous coverage) and jittered gridlike
scans (widely spaced rows of fast-scan segments with per-segment vertical
jitter, visited in serpentine order).  The beam path is continuous; the
traversal keeps every sample, including the spiral arcs that leave the
square on their way to the corners and the grid's vertical jitter hops, but
the mask rasterizes only recorded dwell positions inside the square.

Coverage is calibrated by a sweep-plus-bisection search on the spacing
parameter because paths cut by the image boundary shift the achieved
coverage away from any closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import CalibrationError, ContractError
from .filters import gaussian_blur

ARC_STEP = 0.5          # px between consecutive traversal samples
COVERAGE_TOL = 0.10     # acceptance band around nominal coverage
CALIBRATION_STEPS = 64


@dataclass
class PathMask:
    """Scan weights plus the ordered beam traversal that produced them."""

    weights: np.ndarray                # [side, side] float32 in [0, 1]
    traversal: np.ndarray              # [n, 2] float32 (row, col), continuous
    recorded: np.ndarray               # [n] bool, True where the beam dwelt
    nominal_coverage: float
    measured_coverage: float
    kind: str                          # "spiral" | "jittered_grid"
    blurred: bool = False
    seed: int = 0
    spacing: float = 0.0               # calibrated ring/row spacing, px
    _nn_sources: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def side(self) -> int:
        return self.weights.shape[0]

    def on_path(self) -> np.ndarray:
        return self.weights > 0


@dataclass(frozen=True)
class NoiseModel:
    """Multiplicative dwell noise: factor = phi + (1 - phi) * U, U ~ [low, high)."""

    seed: int = 0
    low: float = 0.0
    high: float = 2.0


def _validate_request(side: int, nominal_coverage: float):
    if side < 32:
        raise ContractError(f"side must be >= 32, got {side}")
    if not (1.0 / 200.0 < nominal_coverage <= 0.25):
        raise ContractError(f"nominal coverage must be in (1/200, 1/4], got {nominal_coverage}")


def _dwell_pixels(traversal: np.ndarray, recorded: np.ndarray) -> np.ndarray:
    """Reduce dense path samples to one dwell position per pixel.

    Samples are rounded to the pixel lattice, consecutive duplicates merged,
    and staircase corners cut so the dwell chain is the thin 8-connected
    raster walk a scan system would record (a denser chain would dwell twice
    where the path grazes a pixel corner).
    """
    pts = np.rint(traversal[recorded]).astype(np.int64)
    if len(pts) == 0:
        return pts
    change = np.any(np.diff(pts, axis=0) != 0, axis=1)
    pts = pts[np.concatenate([[True], change])]
    keep = np.ones(len(pts), dtype=bool)
    prev = 0
    for i in range(1, len(pts) - 1):
        if (np.abs(pts[i + 1] - pts[prev]) <= 1).all():
            keep[i] = False
        else:
            prev = i
    return pts[keep]


def _rasterize(side: int, traversal: np.ndarray, recorded: np.ndarray) -> np.ndarray:
    """Mark the pixel of every in-bounds dwell position."""
    pts = _dwell_pixels(traversal, recorded)
    weights = np.zeros((side, side), dtype=np.float32)
    if len(pts):
        keep = (pts[:, 0] >= 0) & (pts[:, 0] < side) & (pts[:, 1] >= 0) & (pts[:, 1] < side)
        weights[pts[keep, 0], pts[keep, 1]] = 1.0
    return weights


def _spiral_samples(side: int, ring_spacing: float,
                    arc_step: float = ARC_STEP) -> tuple[np.ndarray, np.ndarray]:
    """Archimedes spiral r = a*theta sampled at ~arc_step px increments."""
    a = ring_spacing / (2.0 * np.pi)
    center = (side - 1) / 2.0
    r_max = side / np.sqrt(2.0) + 2.0   # reaches the crop corners
    theta_max = r_max / a

    def arclen(t):
        return 0.5 * a * (t * np.sqrt(t * t + 1.0) + np.arcsinh(t))

    total = arclen(theta_max)
    s = np.arange(0.0, total, arc_step)
    theta = np.sqrt(2.0 * s / a)        # large-angle asymptote as Newton seed
    for _ in range(4):
        theta = theta - (arclen(theta) - s) / (a * np.sqrt(theta * theta + 1.0))
        theta = np.maximum(theta, 0.0)
    r = a * theta
    rows = center + r * np.sin(theta)
    cols = center + r * np.cos(theta)
    traversal = np.stack([rows, cols], axis=1).astype(np.float32)
    inside = (rows >= -0.5) & (rows < side - 0.5) & (cols >= -0.5) & (cols < side - 0.5)
    return traversal, inside


def _grid_samples(side: int, row_spacing: float, seed: int, segment_len: int,
                  jitter_frac: float) -> tuple[np.ndarray, np.ndarray]:
    """Serpentine rows of jittered fast-scan segments.

    The beam dwells continuously along the serpentine, so the slow-axis
    turnarounds at the first/last column are recorded like any other sample.
    Per-segment jitter offsets are idealized instantaneous hops: the junction
    step is traversed vertically but not recorded.
    """
    rng = np.random.default_rng(seed)
    n_rows = max(2, int(np.floor((side - 1) / row_spacing)) + 1)
    offset = (side - 1 - (n_rows - 1) * row_spacing) / 2.0
    amp = jitter_frac * row_spacing

    rows_pts: list[np.ndarray] = []
    rows_rec: list[np.ndarray] = []

    def emit(points, recorded_flag):
        pts = np.asarray(points, dtype=np.float32)
        if len(pts):
            rows_pts.append(pts)
            rows_rec.append(np.full(len(pts), recorded_flag, dtype=bool))

    prev_exit_y = None
    for k in range(n_rows):
        y0 = offset + k * row_spacing
        n_seg = -(-side // segment_len)
        jit = rng.uniform(-amp, amp, size=n_seg) if amp > 0 else np.zeros(n_seg)
        ys = np.clip(y0 + jit, 0.0, side - 1.0)
        xs_dir = np.arange(side, dtype=np.float32)
        seg_order = np.arange(n_seg)
        if k % 2 == 1:
            xs_dir = xs_dir[::-1]
            seg_order = seg_order[::-1]

        turn_x = 0.0 if k % 2 == 0 else float(side - 1)
        y_entry = float(ys[seg_order[0]])
        if prev_exit_y is not None:
            # slow-axis turnaround down the edge column, dwelling throughout
            n_step = max(1, int(np.ceil(abs(y_entry - prev_exit_y))))
            ys_conn = np.linspace(prev_exit_y, y_entry, n_step + 1)[1:]
            emit(np.stack([ys_conn, np.full_like(ys_conn, turn_x)], axis=1), True)

        prev_y = y_entry
        for x in xs_dir:
            seg = int(x) // segment_len
            y = float(ys[seg])
            if y != prev_y:
                # vertical jitter hop at the junction column, not recorded
                n_step = max(1, int(np.ceil(abs(y - prev_y))))
                ys_step = np.linspace(prev_y, y, n_step + 1)[1:]
                emit(np.stack([ys_step, np.full_like(ys_step, x)], axis=1), False)
                prev_y = y
            emit([[y, x]], True)
        prev_exit_y = prev_y

    traversal = np.concatenate(rows_pts, axis=0)
    recorded = np.concatenate(rows_rec, axis=0)
    return traversal, recorded


def _calibrate(build, side: int, nominal: float, spacing0: float, kind: str,
               seed: int) -> PathMask:
    """Search the spacing parameter until measured coverage matches nominal.

    Coverage is mostly decreasing in the spacing, but grids are a sawtooth
    (the row count drops in steps while the recorded turnaround grows inside
    each step), so a coarse sweep locates the right tooth first and bisection
    refines inside it with the tooth's own orientation.
    """

    def evaluate(spacing):
        traversal, recorded = build(spacing)
        weights = _rasterize(side, traversal, recorded)
        measured = float(weights.sum()) / (side * side)
        return PathMask(weights=weights, traversal=traversal, recorded=recorded,
                        nominal_coverage=nominal, measured_coverage=measured,
                        kind=kind, seed=seed, spacing=spacing)

    lo = max(1.5, spacing0 / 3.0)
    hi = min(side - 1.0, spacing0 * 3.0)
    sweep = [evaluate(s) for s in np.geomspace(lo, hi, 16)]
    best = min(sweep, key=lambda m: abs(m.measured_coverage - nominal))

    bracket = None
    for a, b in zip(sweep[:-1], sweep[1:]):
        ca, cb = a.measured_coverage, b.measured_coverage
        if min(ca, cb) <= nominal <= max(ca, cb):
            if bracket is None or (abs(ca - nominal) + abs(cb - nominal)
                                   < abs(bracket[0].measured_coverage - nominal)
                                   + abs(bracket[1].measured_coverage - nominal)):
                bracket = (a, b)

    if bracket is not None:
        a, b = bracket
        for _ in range(CALIBRATION_STEPS - len(sweep)):
            if abs(best.measured_coverage - nominal) / nominal <= 0.02:
                break
            mid = evaluate((a.spacing + b.spacing) / 2.0)
            if abs(mid.measured_coverage - nominal) < abs(best.measured_coverage - nominal):
                best = mid
            same_side_as_a = ((mid.measured_coverage - nominal > 0)
                              == (a.measured_coverage - nominal > 0))
            if same_side_as_a:
                a = mid
            else:
                b = mid

    if abs(best.measured_coverage - nominal) / nominal > COVERAGE_TOL:
        raise CalibrationError(
            f"{kind} calibration failed: wanted {nominal:.5f}, achieved "
            f"{best.measured_coverage:.5f}", achieved=best.measured_coverage)
    return best


def archimedes_spiral(side: int, nominal_coverage: float, seed: int = 0,
                      arc_step: float = ARC_STEP) -> PathMask:
    """Spiral path cropped to the image square at calibrated coverage.

    The spiral geometry is deterministic for a given (side, coverage); the
    seed is kept as metadata so masks stay a pure function of their inputs.
    ``arc_step`` is the traversal sampling density in px of arc length.
    """
    _validate_request(side, nominal_coverage)
    if not 0 < arc_step <= 1.0:
        raise ContractError(f"arc_step must be in (0, 1] px, got {arc_step}")
    spacing0 = 1.0 / nominal_coverage

    def build(spacing):
        return _spiral_samples(side, spacing, arc_step)

    return _calibrate(build, side, nominal_coverage, spacing0, "spiral", seed)


def jittered_grid(side: int, nominal_coverage: float, seed: int = 0,
                  segment_len: int = 16, jitter_frac: float = 0.25) -> PathMask:
    """Jittered gridlike path at calibrated coverage."""
    _validate_request(side, nominal_coverage)
    if segment_len < 1:
        raise ContractError(f"segment_len must be positive, got {segment_len}")
    spacing0 = 1.0 / nominal_coverage

    def build(spacing):
        return _grid_samples(side, spacing, seed, segment_len, jitter_frac)

    return _calibrate(build, side, nominal_coverage, spacing0, "jittered_grid", seed)


def blur_mask(mask: PathMask) -> PathMask:
    """Blur a binary mask with the shared 5x5 kernel, renormalized to max 1."""
    if mask.blurred:
        raise ContractError("mask is already blurred")
    w = gaussian_blur(mask.weights)
    peak = float(w.max())
    if peak > 0:
        w = w / peak
    measured = float((w > 0).sum()) / w.size
    return PathMask(weights=w.astype(np.float32), traversal=mask.traversal,
                    recorded=mask.recorded, nominal_coverage=mask.nominal_coverage,
                    measured_coverage=measured, kind=mask.kind, blurred=True,
                    seed=mask.seed, spacing=mask.spacing)


def apply_noise(scan: np.ndarray, mask: PathMask, model: NoiseModel) -> np.ndarray:
    """Multiply by phi + (1 - phi) * U with independent U per pixel.

    Pixels with phi == 1 pass through bit-unchanged.
    """
    scan = np.asarray(scan, dtype=np.float32)
    if scan.shape != mask.weights.shape:
        raise ContractError(f"scan {scan.shape} does not match mask {mask.weights.shape}")
    rng = np.random.default_rng(model.seed)
    u = rng.uniform(model.low, model.high, size=scan.shape).astype(np.float32)
    phi = mask.weights
    return scan * (phi + (1.0 - phi) * u)


def distance_map(mask: PathMask) -> np.ndarray:
    """Exact Euclidean distance of every pixel to the nearest on-path pixel."""
    on = mask.on_path()
    if not on.any():
        raise ContractError("distance_map needs at least one on-path pixel")
    return ndimage.distance_transform_edt(~on).astype(np.float32)
