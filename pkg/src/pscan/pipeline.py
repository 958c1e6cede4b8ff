"""Data pipeline: crops to training examples.

Source micrographs (real files or synthetic lattices) are normalized to
[-1, 1], augmented by the dihedral group of the square, blurred into
regression targets, masked into partial scans, optionally noise-modulated
and nearest-neighbour infilled, and packed into TrainingExamples.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import convops, imageio
from .errors import ContractError, DataError
from .filters import gaussian_blur, gaussian_kernel_5x5  # noqa: F401  (re-export)
from .scanpath import NoiseModel, PathMask, apply_noise

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")


# ---------------------------------------------------------------------------
# elementary transforms


def normalize(crop: np.ndarray) -> np.ndarray:
    """Zero non-finite counts, then map linearly onto [-1, 1].

    Uniform crops (max - min < 1e-6) come back identically zero.
    """
    img = np.array(crop, dtype=np.float32, copy=True)
    img[~np.isfinite(img)] = 0.0
    mn, mx = float(img.min()), float(img.max())
    if mx - mn < 1e-6:
        return np.zeros_like(img)
    return (2.0 * (img - mn) / (mx - mn) - 1.0).astype(np.float32)


def augment(crop: np.ndarray, code: int) -> np.ndarray:
    """Apply one of the 8 dihedral symmetries of the square; 0 is identity."""
    if not 0 <= code < 8:
        raise ContractError(f"augmentation code must be in [0, 8), got {code}")
    img = np.asarray(crop)
    if code >= 4:
        img = np.fliplr(img)
    return np.ascontiguousarray(np.rot90(img, code % 4))


_INVERSE_CODES: dict[int, int] = {}


def inverse_code(code: int) -> int:
    """The augmentation code that undoes ``code``."""
    if not _INVERSE_CODES:
        probe = np.arange(9, dtype=np.float32).reshape(3, 3)
        for c in range(8):
            img = augment(probe, c)
            for inv in range(8):
                if np.array_equal(augment(img, inv), probe):
                    _INVERSE_CODES[c] = inv
                    break
    return _INVERSE_CODES[code]


def select_partial(normalized: np.ndarray, mask: PathMask,
                   noise: NoiseModel | None = None) -> np.ndarray:
    """Partial scan: mask weights times the normalized crop, plus dwell noise.

    Noise applies only to blurred masks; a binary mask is the special case
    where none is applied.
    """
    normalized = np.asarray(normalized, dtype=np.float32)
    if normalized.shape != mask.weights.shape:
        raise ContractError(
            f"crop {normalized.shape} does not match mask {mask.weights.shape}")
    scan = mask.weights * normalized
    if noise is not None:
        if not mask.blurred:
            raise ContractError("noise model requested with a binary mask")
        scan = apply_noise(scan, mask, noise)
    return scan


def _nn_sources(mask: PathMask) -> np.ndarray:
    """Flat index of the nearest on-path pixel for every pixel.

    Ties resolve to the smallest row, then smallest column; exact because
    squared lattice distances are integers and the candidate ball uses a
    radius slack far below the smallest possible distance gap.
    """
    if mask._nn_sources is not None:
        return mask._nn_sources
    on = mask.on_path()
    if not on.any():
        raise ContractError("nn_infill needs at least one on-path pixel")
    h, w = on.shape
    ys, xs = np.nonzero(on)                       # row-major: lexicographic
    pts = np.column_stack([ys, xs]).astype(np.float64)
    tree = cKDTree(pts)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    queries = np.column_stack([yy.ravel(), xx.ravel()]).astype(np.float64)
    dist, _ = tree.query(queries, k=1)
    balls = tree.query_ball_point(queries, r=dist + 1e-6)
    choice = np.fromiter((min(b) for b in balls), dtype=np.int64, count=len(queries))
    flat_on = ys * w + xs
    mask._nn_sources = flat_on[choice]
    return mask._nn_sources


def nn_infill(scan: np.ndarray, mask: PathMask) -> np.ndarray:
    """Give every off-path pixel the value of its nearest on-path pixel."""
    if mask.blurred:
        raise ContractError("nn_infill expects a binary mask")
    scan = np.asarray(scan, dtype=np.float32)
    if scan.shape != mask.weights.shape:
        raise ContractError(f"scan {scan.shape} does not match mask {mask.weights.shape}")
    sources = _nn_sources(mask)
    return scan.reshape(-1)[sources].reshape(scan.shape).copy()


def bilinear_down(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resample of a plain 2-D array."""
    image = np.asarray(image, dtype=np.float32)
    if image.shape == (out_h, out_w):
        return image.copy()
    a_h = convops.bilinear_matrix(out_h, image.shape[0])
    a_w = convops.bilinear_matrix(out_w, image.shape[1])
    return convops.bilinear_fwd(image, a_h, a_w)


# ---------------------------------------------------------------------------
# training examples


@dataclass
class ExampleConfig:
    infill: bool = True
    path_channel: bool = True
    output_domain: str = "01"      # "01" or "pm1"


@dataclass
class TrainingExample:
    input_scan: np.ndarray         # network input, (x+1)/2 of the partial scan
    path_channel: np.ndarray       # mask weights
    target_full: np.ndarray        # blurred ground truth in the output domain
    target_half: np.ndarray        # bilinear downsample of target_full
    real_full: np.ndarray          # normalized crop in [-1, 1], for critics


def export_example(out_dir, name: str, example: TrainingExample):
    """Write an example as raw float32 payloads plus 8-bit PGM previews."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    planes = {"input": example.input_scan, "path": example.path_channel,
              "target": example.target_full, "target_half": example.target_half}
    for suffix, img in planes.items():
        imageio.write_f32(out / f"{name}_{suffix}.f32", img)
        lo, hi = float(img.min()), float(img.max())
        scaled = (img - lo) / (hi - lo) * 255.0 if hi > lo else np.zeros_like(img)
        imageio.write_pgm(out / f"{name}_{suffix}.pgm", np.round(scaled))


def make_example(crop: np.ndarray, mask: PathMask, cfg: ExampleConfig,
                 noise: NoiseModel | None = None) -> TrainingExample:
    """Assemble one training example from a normalized crop and a mask."""
    crop = np.asarray(crop, dtype=np.float32)
    blur = gaussian_blur(crop)
    scan = select_partial(crop, mask, noise)
    scan01 = ((scan + 1.0) / 2.0).astype(np.float32)
    if cfg.infill and not mask.blurred:
        scan01 = nn_infill(scan01, mask)
    if cfg.output_domain == "01":
        target_full = ((blur + 1.0) / 2.0).astype(np.float32)
    elif cfg.output_domain == "pm1":
        target_full = blur
    else:
        raise ContractError(f"unknown output domain {cfg.output_domain!r}")
    half = mask.side // 2
    target_half = bilinear_down(target_full, half, half)
    return TrainingExample(input_scan=scan01, path_channel=mask.weights,
                           target_full=target_full, target_half=target_half,
                           real_full=crop)


# ---------------------------------------------------------------------------
# synthetic micrographs


@dataclass(frozen=True)
class SyntheticSource:
    """Parameters of one synthetic STEM-like lattice image."""

    spacing: float = 9.0
    peak_width: float = 2.2
    orientation: float = 0.0
    noise_level: float = 0.02
    seed: int = 0
    peak_amp: float = 1.0
    background: float = 0.25


def lattice_sites(source: SyntheticSource, side: int) -> np.ndarray:
    """Site coordinates (row, col) of the rotated lattice, frame plus margin."""
    rng = np.random.default_rng(source.seed)
    phase = rng.uniform(0.0, 1.0, size=2)
    s, phi = source.spacing, source.orientation
    u = np.array([np.cos(phi), np.sin(phi)]) * s
    v = np.array([-np.sin(phi), np.cos(phi)]) * s
    center = np.array([(side - 1) / 2.0, (side - 1) / 2.0])
    reach = int(np.ceil(side / (np.sqrt(2.0) * s))) + 2
    ij = np.mgrid[-reach:reach + 1, -reach:reach + 1].reshape(2, -1).T
    sites = center + (ij[:, :1] + phase[0]) * u + (ij[:, 1:] + phase[1]) * v
    margin = 4.0 * source.peak_width
    keep = ((sites[:, 0] > -margin) & (sites[:, 0] < side - 1 + margin)
            & (sites[:, 1] > -margin) & (sites[:, 1] < side - 1 + margin))
    return sites[keep]


def synth_micrograph(source: SyntheticSource, side: int) -> np.ndarray:
    """Gaussian peaks on a rotated lattice, smooth background, shot noise."""
    if source.spacing < 4.0:
        raise ContractError(f"lattice spacing must be >= 4 px, got {source.spacing}")
    rng = np.random.default_rng(source.seed)
    rng.uniform(0.0, 1.0, size=2)                 # lattice phase, same stream
    img = np.zeros((side, side), dtype=np.float64)

    if source.peak_amp != 0.0:
        sites = lattice_sites(source, side)
        amps = source.peak_amp * rng.uniform(0.85, 1.15, size=len(sites))
        w = source.peak_width
        half = int(np.ceil(4.0 * w))
        for (r, c), amp in zip(sites, amps):
            r0, r1 = max(0, int(r) - half), min(side, int(r) + half + 1)
            c0, c1 = max(0, int(c) - half), min(side, int(c) + half + 1)
            if r0 >= r1 or c0 >= c1:
                continue
            yy = np.arange(r0, r1)[:, None] - r
            xx = np.arange(c0, c1)[None, :] - c
            img[r0:r1, c0:c1] += amp * np.exp(-(yy ** 2 + xx ** 2) / (2.0 * w ** 2))

    if source.background != 0.0:
        yy, xx = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
        for _ in range(4):
            fy, fx = rng.uniform(0.3, 2.0, size=2) / side
            ph = rng.uniform(0.0, 2.0 * np.pi)
            amp = source.background * rng.uniform(0.3, 1.0)
            img += amp * np.cos(2.0 * np.pi * (fy * yy + fx * xx) + ph)

    if source.noise_level > 0.0:
        shot = rng.standard_normal(size=img.shape)
        img += source.noise_level * shot * np.sqrt(np.clip(img, 0.0, None) + 0.1)
    return img.astype(np.float32)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DatasetIndex:
    """Crop-level index over split directories of image files."""

    side: int
    entries: dict[str, list[tuple[Path, int, int]]] = field(default_factory=dict)

    def n(self, split: str) -> int:
        return len(self.entries[split])

    def get(self, split: str, i: int) -> np.ndarray:
        path, r0, c0 = self.entries[split][i]
        img = imageio.read_image(path)
        return img[r0:r0 + self.side, c0:c0 + self.side]


def ingest(root, side: int) -> DatasetIndex:
    """Index split directories of TIFF / raw images into side x side crops.

    Files are taken in sorted order; unreadable files are skipped with a
    warning; a basename appearing in two splits or an empty split is an
    error.
    """
    root = Path(root)
    index = DatasetIndex(side=side)
    seen: dict[str, str] = {}
    for split in SPLITS:
        split_dir = root / split
        entries: list[tuple[Path, int, int]] = []
        if split_dir.is_dir():
            for path in sorted(split_dir.iterdir()):
                if path.suffix not in (".tif", ".tiff", ".f32"):
                    continue
                if path.name in seen:
                    raise DataError(
                        f"{path.name} appears in both {seen[path.name]} and {split}")
                seen[path.name] = split
                try:
                    img = imageio.read_image(path)
                except (DataError, OSError) as exc:
                    log.warning("skipping unreadable %s: %s", path, exc)
                    continue
                h, w = img.shape
                for r0 in range(0, h - side + 1, side):
                    for c0 in range(0, w - side + 1, side):
                        entries.append((path, r0, c0))
        if not entries:
            raise DataError(f"split {split!r} is empty under {root}")
        index.entries[split] = entries
    return index


class SyntheticDataset:
    """Deterministic in-memory dataset of synthetic lattice micrographs."""

    def __init__(self, side: int, counts: dict[str, int], seed: int = 0,
                 spacing_range=(7.0, 12.0), width_range=(1.8, 2.8),
                 noise_level: float = 0.02, background: float = 0.25):
        self.side = side
        self.counts = dict(counts)
        self.seed = seed
        self.spacing_range = spacing_range
        self.width_range = width_range
        self.noise_level = noise_level
        self.background = background
        self._cache: dict[tuple[str, int], np.ndarray] = {}

    def n(self, split: str) -> int:
        return self.counts[split]

    def source_for(self, split: str, i: int) -> SyntheticSource:
        split_id = SPLITS.index(split)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(split_id, i))
        rng = np.random.default_rng(ss)
        return SyntheticSource(
            spacing=float(rng.uniform(*self.spacing_range)),
            peak_width=float(rng.uniform(*self.width_range)),
            orientation=float(rng.uniform(0.0, np.pi)),
            noise_level=self.noise_level,
            seed=int(rng.integers(2 ** 31)),
            background=self.background,
        )

    def get(self, split: str, i: int) -> np.ndarray:
        if not 0 <= i < self.counts[split]:
            raise ContractError(f"index {i} out of range for split {split!r}")
        key = (split, i)
        if key not in self._cache:
            self._cache[key] = synth_micrograph(self.source_for(split, i), self.side)
        return self._cache[key]
