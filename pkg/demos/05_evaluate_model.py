"""Evaluate a trained checkpoint (or just the classical baselines).

    python demos/05_evaluate_model.py [checkpoint]

Runs a small coverage sweep, prints RMS summaries, and exports a per-pixel
MSE map with its error-versus-distance curve.
"""

import sys
from pathlib import Path

import numpy as np

from pscan import evaluate as ev
from pscan.config import RunConfig
from pscan.scanpath import distance_map
from pscan.train import build_dataset, build_example, build_mask, \
    load_models_from_checkpoint

OUT = Path(__file__).parent / "out" / "evaluation"
OUT.mkdir(parents=True, exist_ok=True)

cfg = RunConfig(side=64, coverage=1 / 20, synthetic_train=1000, synthetic_val=200,
                synthetic_test=200, seed=0, out_dir=str(OUT))
models = None
if len(sys.argv) > 1:
    models, scalars = load_models_from_checkpoint(sys.argv[1], cfg)
    print(f"loaded checkpoint from iteration {int(scalars.get('iteration', -1))}")
else:
    print("no checkpoint given: evaluating the classical baselines only")

result = ev.coverage_sweep(cfg, [1 / 10, 1 / 20, 1 / 40], OUT, models=models,
                           max_images=40)
print(f"\n{'coverage':>9s} {'method':>8s} {'mean RMS':>9s} {'median':>8s}")
for coverage, method, mean_rms, median_rms in result.summaries:
    print(f"{coverage:9.4f} {method:>8s} {mean_rms:9.5f} {median_rms:8.5f}")

# per-pixel error structure at 1/20 coverage
dataset = build_dataset(cfg)
mask = build_mask(cfg)
preds, truths = [], []
for i in range(40):
    ex = build_example(cfg, dataset, mask, "test", i, 0, None)
    if models is not None:
        comp, _ = models.gen.forward(ex, models.norm)
        preds.append(comp.data[0, 0])
    else:
        preds.append(ev.baseline_complete(ex.input_scan, mask, "laplace"))
    truths.append(ex.target_full)
mse_map, mu, sigma = ev.per_pixel_mse(preds, truths)
ev.export_error_map(OUT, "mse_map_0p05", mse_map)
print(f"\nper-pixel MSE map: mu = {mu:.6f}, sigma = {sigma:.6f}")

lefts, means, counts = ev.error_vs_distance(mse_map, distance_map(mask))
print("error versus distance from the scan path:")
for left, mean in zip(lefts[:8], means[:8]):
    print(f"  {left:4.0f}-{left + 1:.0f} px: {mean:.6f}")
print(f"\nartifacts in {OUT}")
