"""Command-line front end.

Subcommands: paths (mask artifacts), prepare (dataset trees), train, eval
(coverage sweeps and baselines), infer (single-image completion).

Exit codes: 0 success, 2 usage or contract violation, 3 data error,
4 numeric failure.  PSCN_THREADS caps worker parallelism.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluate as ev
from . import imageio
from . import model as md
from .config import RunConfig, echo_config, load_config, parse_config_text
from .errors import CalibrationError, ContractError, DataError, NumericError
from .pipeline import ExampleConfig, SPLITS, SyntheticSource, nn_infill, synth_micrograph
from .scanpath import PathMask, archimedes_spiral, blur_mask, jittered_grid
from .train import build_mask, load_models_from_checkpoint, train_loop


def _mask_from_args(kind, side, coverage, seed, blur):
    if kind == "spiral":
        mask = archimedes_spiral(side, coverage, seed=seed)
    elif kind == "jittered_grid":
        mask = jittered_grid(side, coverage, seed=seed)
    else:
        raise ContractError(f"unknown path kind {kind!r}")
    return blur_mask(mask) if blur else mask


def cmd_paths(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mask = _mask_from_args(args.kind, args.side, args.coverage, args.seed, args.blur)
    if mask.blurred:
        imageio.write_f32(out / "mask.f32", mask.weights)
    else:
        imageio.write_mask_pgm(out / "mask.pgm", mask.weights)
    imageio.write_traversal_csv(out / "traversal.csv", mask.traversal)
    report = (f"kind={mask.kind}\nside={mask.side}\nseed={mask.seed}\n"
              f"nominal_coverage={mask.nominal_coverage!r}\n"
              f"measured_coverage={mask.measured_coverage!r}\n"
              f"spacing={mask.spacing!r}\nblurred={str(mask.blurred).lower()}\n")
    (out / "coverage.txt").write_text(report)
    print(f"measured coverage {mask.measured_coverage:.5f} "
          f"(nominal {mask.nominal_coverage:.5f})")
    return 0


def cmd_prepare(args) -> int:
    out = Path(args.out)
    ratios = (0.75, 0.10, 0.15)
    if args.synthetic > 0:
        counts = [max(1, round(args.synthetic * r)) for r in ratios]
        counts[0] = max(1, args.synthetic - counts[1] - counts[2])
        rng = np.random.default_rng(args.seed)
        for split, count in zip(SPLITS, counts):
            d = out / split
            d.mkdir(parents=True, exist_ok=True)
            for i in range(count):
                src = SyntheticSource(
                    spacing=float(rng.uniform(7.0, 12.0)),
                    peak_width=float(rng.uniform(1.8, 2.8)),
                    orientation=float(rng.uniform(0.0, np.pi)),
                    noise_level=0.02,
                    seed=int(rng.integers(2 ** 31)))
                imageio.write_tiff(d / f"synthetic_{split}_{i:05d}.tif",
                                   synth_micrograph(src, args.side))
        print(f"wrote {sum(counts)} synthetic micrographs under {out}")
        return 0
    src_dir = Path(args.data)
    files = sorted(p for p in src_dir.iterdir()
                   if p.suffix in (".tif", ".tiff", ".f32"))
    if not files:
        raise DataError(f"no images found in {src_dir}")
    n = len(files)
    n_val = max(1, round(n * ratios[1]))
    n_test = max(1, round(n * ratios[2]))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise DataError(f"too few images ({n}) to build three splits")
    groups = {"train": files[:n_train],
              "validation": files[n_train:n_train + n_val],
              "test": files[n_train + n_val:]}
    for split, members in groups.items():
        d = out / split
        d.mkdir(parents=True, exist_ok=True)
        for p in members:
            (d / p.name).write_bytes(p.read_bytes())
    print(f"split {n} files into " +
          ", ".join(f"{len(v)} {k}" for k, v in groups.items()))
    return 0


def _config_from_args(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    for item in args.set or []:
        cfg = parse_config_text(item, base=cfg)
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    if getattr(args, "phase2", None):
        cfg.adversarial = args.phase2 == "on"
    return cfg


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    result = train_loop(cfg, resume_from=args.resume)
    print(f"finished at iteration {result.final_iteration}, "
          f"final validation RMS {result.final_val_rms:.5f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    coverages = [float(c) for c in args.coverages.split(",")]
    models = None
    if args.checkpoint:
        models, _ = load_models_from_checkpoint(args.checkpoint, cfg)
    out = Path(args.out or cfg.out_dir)
    result = ev.coverage_sweep(cfg, coverages, out, models=models,
                               against=args.against,
                               max_images=args.max_images)
    for coverage, method, mean_rms, median_rms in result.summaries:
        print(f"coverage {coverage:.4f} {method:8s} "
              f"mean RMS {mean_rms:.5f} median {median_rms:.5f}")
    return 0


def _load_mask_file(path, side) -> PathMask:
    p = Path(path)
    if p.suffix == ".pgm":
        weights = (imageio.read_pgm(p) > 0).astype(np.float32)
        blurred = False
    elif p.suffix == ".f32":
        weights = imageio.read_f32(p)
        blurred = bool(((weights > 0) & (weights < 1)).any())
    else:
        raise DataError(f"{path}: mask must be .pgm or .f32")
    if weights.shape != (side, side):
        raise DataError(f"mask shape {weights.shape} does not match side {side}")
    empty = np.zeros((0, 2), dtype=np.float32)
    return PathMask(weights=weights, traversal=empty,
                    recorded=np.zeros(0, dtype=bool),
                    nominal_coverage=float((weights > 0).mean()),
                    measured_coverage=float((weights > 0).mean()),
                    kind="file", blurred=blurred)


def cmd_infer(args) -> int:
    cfg = _config_from_args(args)
    scan_raw = imageio.read_image(args.scan)
    if scan_raw.shape[0] != scan_raw.shape[1]:
        raise DataError(f"scan must be square, got {scan_raw.shape}")
    cfg.side = scan_raw.shape[0]
    mask = _load_mask_file(args.mask, cfg.side)
    if scan_raw.shape != mask.weights.shape:
        raise DataError(f"scan {scan_raw.shape} does not match mask "
                        f"{mask.weights.shape}")
    models, _ = load_models_from_checkpoint(args.checkpoint, cfg)

    on = mask.on_path()
    values = scan_raw[on]
    lo, hi = float(values.min()), float(values.max())
    norm = np.zeros_like(scan_raw, dtype=np.float32)
    if hi - lo >= 1e-6:
        norm[on] = 2.0 * (scan_raw[on] - lo) / (hi - lo) - 1.0
    scan01 = ((norm * mask.weights + 1.0) / 2.0).astype(np.float32)
    if cfg.infill and not mask.blurred:
        scan01 = nn_infill(scan01, mask)

    from .pipeline import TrainingExample
    zeros = np.zeros_like(scan01)
    half = cfg.side // 2
    example = TrainingExample(input_scan=scan01, path_channel=mask.weights,
                              target_full=zeros,
                              target_half=np.zeros((half, half), np.float32),
                              real_full=zeros)
    t0 = time.perf_counter()
    comp, _ = models.gen.forward(example, models.norm)
    elapsed = time.perf_counter() - t0

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    completion = comp.data[0, 0]
    imageio.write_f32(out / "completion.f32", completion)
    preview = np.clip(completion, 0.0, 1.0) * 255.0
    imageio.write_pgm(out / "completion.pgm", np.round(preview), maxval=255)
    (out / "timing.txt").write_text(f"inference_seconds={elapsed!r}\n")
    print(f"completion written to {out} ({elapsed * 1000:.1f} ms)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pscan",
        description="Partial scanning-microscopy completion toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("paths", help="generate a scan-path mask")
    p.add_argument("--kind", required=True, choices=["spiral", "jittered_grid"])
    p.add_argument("--side", type=int, default=512)
    p.add_argument("--coverage", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blur", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_paths)

    p = sub.add_parser("prepare", help="build a dataset tree")
    p.add_argument("--data", default="", help="flat directory of source images")
    p.add_argument("--synthetic", type=int, default=0,
                   help="generate N synthetic micrographs instead")
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("train", help="run the training protocol")
    p.add_argument("--config", default="")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", default="")
    p.add_argument("--phase2", choices=["on", "off"], default=None)
    p.add_argument("--resume", default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="coverage sweep and baselines")
    p.add_argument("--checkpoint", default="",
                   help="omit for baseline-only evaluation")
    p.add_argument("--config", default="")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--coverages", default="0.05")
    p.add_argument("--against", choices=["blurred", "raw"], default="blurred")
    p.add_argument("--max-images", type=int, default=None)
    p.add_argument("--out", default="")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="complete one partial scan")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scan", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--config", default="")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_infer)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ContractError, CalibrationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
