"""Walk one crop through the data pipeline, stage by stage.

Synthetic lattice -> normalize -> blurred regression target -> partial scan
-> dwell noise -> nearest-neighbour infill.  Previews land in
demos/out/pipeline/.
"""

from pathlib import Path

import numpy as np

from pscan import imageio
from pscan.pipeline import (ExampleConfig, SyntheticSource, gaussian_blur,
                            make_example, nn_infill, normalize, select_partial,
                            synth_micrograph)
from pscan.scanpath import NoiseModel, apply_noise, archimedes_spiral, blur_mask

OUT = Path(__file__).parent / "out" / "pipeline"
OUT.mkdir(parents=True, exist_ok=True)


def preview(name, img):
    lo, hi = float(img.min()), float(img.max())
    scaled = (img - lo) / (hi - lo) * 255.0 if hi > lo else np.zeros_like(img)
    imageio.write_pgm(OUT / f"{name}.pgm", np.round(scaled))
    print(f"{name:24s} range [{lo:+.3f}, {hi:+.3f}]")


side = 128
raw = synth_micrograph(SyntheticSource(spacing=9.0, peak_width=2.2,
                                       orientation=0.5, seed=11), side)
preview("0_raw", raw)

crop = normalize(raw)
preview("1_normalized", crop)

target = gaussian_blur(crop)
preview("2_blur_target", target)

mask = archimedes_spiral(side, 1 / 20)
scan = select_partial(crop, mask)
preview("3_partial_scan", scan)

soft = blur_mask(archimedes_spiral(side, 1 / 20))
noisy = apply_noise(select_partial(crop, soft), soft, NoiseModel(seed=3))
preview("4_noisy_blurred_scan", noisy)

infilled = nn_infill((scan + 1) / 2, mask)
preview("5_infilled_input", infilled)

example = make_example(crop, mask, ExampleConfig())
print(f"\nTrainingExample: input {example.input_scan.shape}, "
      f"target {example.target_full.shape}, half {example.target_half.shape}")
print(f"previews written to {OUT}")
