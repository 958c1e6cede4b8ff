"""Train a small completion model on synthetic lattices.

A short demonstration run by default (pass a higher iteration count for a
real desk-scale model, e.g. 20000; that takes on the order of an hour).

    python demos/04_train_desk_model.py [iterations]
"""

import sys
import time
from pathlib import Path

from pscan.config import RunConfig, emit_config
from pscan.train import train_loop

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 600
out = Path(__file__).parent / "out" / "desk_model"

cfg = RunConfig(side=64, iterations=iterations, coverage=1 / 20,
                synthetic_train=1000, synthetic_val=200, synthetic_test=200,
                val_every=max(50, iterations // 10), val_examples=16,
                checkpoint_every=0, seed=0, out_dir=str(out))
print(emit_config(cfg))

t0 = time.time()
result = train_loop(cfg)
minutes = (time.time() - t0) / 60

print(f"\ntrained {iterations} iterations in {minutes:.1f} min")
print("validation RMS history:")
for t, v in result.val_history:
    print(f"  iter {t:6d}: {v:.5f}")
print(f"checkpoint: {result.checkpoint_path}")
print(f"loss log:   {out / 'loss.csv'}")
