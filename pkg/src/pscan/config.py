"""Run configuration: every toggle and constant, parsed from key=value text.

Unknown keys are rejected; the effective configuration is echoed verbatim
into the output directory so a run can be reproduced from its artifacts.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

from .errors import ContractError


@dataclass
class RunConfig:
    # geometry / model
    side: int = 64
    base_channels: int = 16
    disc_channels: int = 16
    residual_blocks: int = 2
    inner_kernel: int = 3
    outer_kernel: int = 7
    path_channel: bool = True
    infill: bool = True
    symmetric_residuals: bool = False
    output_domain: str = "01"
    # scan paths
    path_kind: str = "spiral"          # spiral | jittered_grid
    coverage: float = 0.05
    mask_blur: bool = False
    noise: bool = False
    grid_segment: int = 16
    grid_jitter: float = 0.25
    # data
    data_dir: str = ""
    synthetic_train: int = 1000
    synthetic_val: int = 200
    synthetic_test: int = 200
    synth_noise: float = 0.02
    synth_background: float = 0.25
    # optimization
    iterations: int = 20000
    adversarial: bool = False
    optimizer: str = "adam"            # adam | sgd | momentum | nesterov | rmsprop
    lr0: float = 0.0003
    lr_adv: float = 0.0001
    alrc_enabled: bool = True
    alrc_mu1: float = 25.0
    alrc_mu2: float = 30.0
    alrc_decay: float = 0.999
    alrc_n: float = 3.0
    lambda_cond: float = 200.0
    lambda_trainer: float = 200.0
    lambda_aux: float = 1.0
    lambda_adv: float = 5.0
    replay_capacity: int = 50
    replay_window: int = 250
    replay_prob: float = 0.2
    # bookkeeping
    val_every: int = 50
    val_examples: int = 16
    checkpoint_every: int = 5000
    monitor_spectral: bool = False
    prefetch: int = 8
    seed: int = 0
    out_dir: str = "out"


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, text: str):
    kind = _FIELDS[name].type
    text = text.strip()
    if kind == "bool":
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ContractError(f"config key {name!r}: {text!r} is not a boolean")
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    return text


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = dataclasses.replace(base) if base else RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ContractError(f"config line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _coerce(key, value))
    return cfg


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    return parse_config_text(Path(path).read_text(), base=base)


def emit_config(cfg: RunConfig) -> str:
    lines = []
    for name in sorted(_FIELDS):
        value = getattr(cfg, name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{name}={value}")
    return "\n".join(lines) + "\n"


def echo_config(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.echo"
    path.write_text(emit_config(cfg))
    return path


def worker_cap() -> int:
    """Parallelism cap from PSCN_THREADS (at least 1)."""
    try:
        return max(1, int(os.environ.get("PSCN_THREADS", "0"))) \
            if os.environ.get("PSCN_THREADS") else max(1, os.cpu_count() or 1)
    except ValueError:
        return 1
