"""Two-phase optimization engine.

Phase 1 trains the generator and auxiliary trainer on clipped MSE losses;
the optional phase 2 alternates one discriminator update and one generator
update per iteration, with experience replay feeding the discriminator hard
examples.  Learning rates and the first ADAM moment decay follow the
stepwise schedule; channel running means freeze on the phase transition.
"""

from __future__ import annotations

import logging
import queue
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import imageio
from . import model as md
from .alrc import AlrcState, alrc  # noqa: F401  (re-export: this module owns the op)
from .config import RunConfig, echo_config, worker_cap
from .errors import ContractError, DataError, NumericError
from .pipeline import (ExampleConfig, SyntheticDataset, TrainingExample, augment,
                       ingest, make_example, normalize)
from .scanpath import NoiseModel, archimedes_spiral, blur_mask, jittered_grid

log = logging.getLogger(__name__)


def rng_for(seed: int, *key: int) -> np.random.Generator:
    """Deterministic per-iteration stream, independent of call history."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


# ---------------------------------------------------------------------------
# optimizers


class Adam:
    """Bias-corrected adaptive moments; beta2 = 0.999, eps = 1e-8."""

    def __init__(self, params: dict[str, ad.Tensor], beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float, beta1: float = 0.9):
        self.t += 1
        b1, b2 = beta1, self.beta2
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient in {name}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            m_hat = m / (1.0 - b1 ** self.t)
            v_hat = v / (1.0 - b2 ** self.t)
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def state_tensors(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array([self.t], np.float32)}
        for k in self.params:
            out[f"{prefix}.m.{k}"] = self.m[k]
            out[f"{prefix}.v.{k}"] = self.v[k]
        return out

    def restore(self, tensors: dict[str, np.ndarray], prefix: str):
        self.t = int(tensors[f"{prefix}.t"][0])
        for k in self.params:
            self.m[k] = tensors[f"{prefix}.m.{k}"].astype(np.float32)
            self.v[k] = tensors[f"{prefix}.v.{k}"].astype(np.float32)


class SGD:
    def __init__(self, params):
        self.params = params

    def step(self, lr, beta1=0.9):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            if not np.isfinite(p.grad).all():
                raise NumericError(f"non-finite gradient in {name}")
            p.data -= (lr * p.grad).astype(p.data.dtype)

    def state_tensors(self, prefix):
        return {}

    def restore(self, tensors, prefix):
        pass


class Momentum:
    """Classical momentum, coefficient 0.9; ``nesterov`` applies the lookahead."""

    def __init__(self, params, mu: float = 0.9, nesterov: bool = False):
        self.params = params
        self.mu = mu
        self.nesterov = nesterov
        self.vel = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr, beta1=0.9):
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient in {name}")
            v = self.vel[name]
            v *= self.mu
            v += g
            update = g + self.mu * v if self.nesterov else v
            p.data -= (lr * update).astype(p.data.dtype)

    def state_tensors(self, prefix):
        return {f"{prefix}.vel.{k}": v for k, v in self.vel.items()}

    def restore(self, tensors, prefix):
        for k in self.vel:
            self.vel[k] = tensors[f"{prefix}.vel.{k}"].astype(np.float32)


class RMSProp:
    def __init__(self, params, rho: float = 0.9, eps: float = 1e-8):
        self.params = params
        self.rho = rho
        self.eps = eps
        self.sq = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr, beta1=0.9):
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient in {name}")
            s = self.sq[name]
            s *= self.rho
            s += (1.0 - self.rho) * (g * g)
            p.data -= (lr * g / (np.sqrt(s) + self.eps)).astype(p.data.dtype)

    def state_tensors(self, prefix):
        return {f"{prefix}.sq.{k}": v for k, v in self.sq.items()}

    def restore(self, tensors, prefix):
        for k in self.sq:
            self.sq[k] = tensors[f"{prefix}.sq.{k}"].astype(np.float32)


def make_optimizer(kind: str, params: dict[str, ad.Tensor]):
    if kind == "adam":
        return Adam(params)
    if kind == "sgd":
        return SGD(params)
    if kind == "momentum":
        return Momentum(params)
    if kind == "nesterov":
        return Momentum(params, nesterov=True)
    if kind == "rmsprop":
        return RMSProp(params)
    raise ContractError(f"unknown optimizer {kind!r}")


def alt_optimizer_step(kind: str, params: dict[str, ad.Tensor], lr: float):
    """One textbook update of the named alternative optimizer."""
    make_optimizer(kind, params).step(lr)


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class Schedule:
    lr_gen: float
    lr_disc: float
    beta1: float
    phase: int


def _eight_step(base: float, frac: float) -> float:
    j = min(7, int(frac * 8))
    return base * (1.0 - (j + 1) / 8.0)


def _eight_step_beta(frac: float) -> float:
    j = min(7, int(frac * 8))
    return 0.9 - (0.9 - 0.5) * (j + 1) / 8.0


def schedule(iteration: int, total_iters: int, adversarial: bool = True,
             lr0: float = 0.0003, lr_adv: float = 0.0001) -> Schedule:
    """Learning rate, beta1 and phase for one iteration of the run."""
    if iteration > total_iters:
        raise ContractError(f"iteration {iteration} beyond total {total_iters}")
    f = iteration / total_iters
    if not adversarial:
        if f < 0.5:
            return Schedule(lr0, lr0, 0.9, 1)
        return Schedule(_eight_step(lr0, (f - 0.5) * 2), 0.0,
                        _eight_step_beta((f - 0.5) * 2), 1)
    if f < 0.25:
        return Schedule(lr0, lr0, 0.9, 1)
    if f < 0.5:
        q = (f - 0.25) * 4
        return Schedule(_eight_step(lr0, q), 0.0, _eight_step_beta(q), 1)
    if f < 0.75:
        return Schedule(lr_adv, lr_adv, 0.9, 2)
    q = (f - 0.75) * 4
    return Schedule(_eight_step(lr_adv, q), lr_adv, _eight_step_beta(q), 2)


# ---------------------------------------------------------------------------
# experience replay


class ReplayBuffer:
    """FIFO buffer of hard examples; admission needs a top-20% loss."""

    def __init__(self, capacity: int = 50, window: int = 250,
                 sample_prob: float = 0.2):
        self.capacity = capacity
        self.sample_prob = sample_prob
        self.items: deque = deque(maxlen=capacity)
        self.losses: deque = deque(maxlen=window)

    def __len__(self):
        return len(self.items)

    def next_source(self, rng) -> int | None:
        """Index into the buffer to replay, or None for a fresh example."""
        if self.items and rng.random() < self.sample_prob:
            return int(rng.integers(len(self.items)))
        return None

    def observe(self, example, loss: float, replayed_index: int | None):
        """Track the loss; admit fresh examples whose loss ranks top 20%."""
        self.losses.append(loss)
        if replayed_index is not None:
            ex, _ = self.items[replayed_index]
            self.items[replayed_index] = (ex, loss)
            return
        if loss >= float(np.percentile(self.losses, 80.0)):
            self.items.append((example, loss))

    def get(self, index: int):
        return self.items[index][0]


def replay_step(example, loss: float, buffer: ReplayBuffer, rng):
    """Finish one step's bookkeeping and choose the next example source.

    Admits the just-used example when its loss ranked in the top 20%, then
    returns a buffered example with the sampling probability, or None for a
    fresh one.
    """
    buffer.observe(example, loss, None)
    idx = buffer.next_source(rng)
    return buffer.get(idx) if idx is not None else None


# ---------------------------------------------------------------------------
# datasets and examples


def build_dataset(cfg: RunConfig):
    if cfg.data_dir:
        return ingest(cfg.data_dir, cfg.side)
    return SyntheticDataset(cfg.side,
                            {"train": cfg.synthetic_train,
                             "validation": cfg.synthetic_val,
                             "test": cfg.synthetic_test},
                            seed=cfg.seed,
                            noise_level=cfg.synth_noise,
                            background=cfg.synth_background)


def build_mask(cfg: RunConfig):
    if cfg.path_kind == "spiral":
        mask = archimedes_spiral(cfg.side, cfg.coverage, seed=cfg.seed)
    elif cfg.path_kind == "jittered_grid":
        mask = jittered_grid(cfg.side, cfg.coverage, seed=cfg.seed,
                             segment_len=cfg.grid_segment,
                             jitter_frac=cfg.grid_jitter)
    else:
        raise ContractError(f"unknown path kind {cfg.path_kind!r}")
    if cfg.mask_blur:
        mask = blur_mask(mask)
    return mask


def example_config(cfg: RunConfig) -> ExampleConfig:
    return ExampleConfig(infill=cfg.infill, path_channel=cfg.path_channel,
                         output_domain=cfg.output_domain)


def build_example(cfg: RunConfig, dataset, mask, split: str, index: int,
                  aug_code: int, noise_seed: int | None) -> TrainingExample:
    crop = normalize(augment(dataset.get(split, index), aug_code))
    noise = NoiseModel(seed=noise_seed) if (cfg.noise and mask.blurred
                                            and noise_seed is not None) else None
    return make_example(crop, mask, example_config(cfg), noise=noise)


def fresh_example(cfg: RunConfig, dataset, mask, t: int) -> TrainingExample:
    """The deterministic example for iteration t (stream (t, 0))."""
    rng = rng_for(cfg.seed, t, 0)
    index = int(rng.integers(dataset.n("train")))
    aug_code = int(rng.integers(8))
    noise_seed = int(rng.integers(2 ** 31))
    return build_example(cfg, dataset, mask, "train", index, aug_code, noise_seed)


class Prefetcher:
    """Bounded producer queue of training examples, in iteration order."""

    def __init__(self, cfg, dataset, mask, start: int, stop: int, capacity: int = 8):
        self.q: queue.Queue = queue.Queue(maxsize=capacity)
        self.stop_flag = threading.Event()

        def produce():
            for t in range(start, stop):
                if self.stop_flag.is_set():
                    return
                self.q.put((t, fresh_example(cfg, dataset, mask, t)))

        n_workers = min(1, worker_cap())   # examples must arrive in order
        self.threads = [threading.Thread(target=produce, daemon=True)
                        for _ in range(n_workers)]
        for th in self.threads:
            th.start()

    def get(self, t: int) -> TrainingExample:
        got_t, ex = self.q.get()
        if got_t != t:
            raise ContractError(f"prefetch order broke: wanted {t}, got {got_t}")
        return ex

    def close(self):
        self.stop_flag.set()
        try:
            while True:
                self.q.get_nowait()
        except queue.Empty:
            pass


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    final_iteration: int
    loss_rows: list = field(default_factory=list)
    val_history: list = field(default_factory=list)   # (iteration, rms)
    spectral_max: list = field(default_factory=list)
    checkpoint_path: str = ""
    models: md.Models | None = None
    mask: object = None
    dataset: object = None

    @property
    def final_val_rms(self) -> float:
        return self.val_history[-1][1] if self.val_history else float("nan")


def _rms(a: np.ndarray, b: np.ndarray) -> float:
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.sqrt(np.mean(d * d)))


def validation_rms(cfg: RunConfig, dataset, mask, models: md.Models,
                   n: int | None = None) -> float:
    """Mean RMS of completions against blurred targets on the validation split."""
    count = min(n or cfg.val_examples, dataset.n("validation"))
    total = 0.0
    for i in range(count):
        ex = build_example(cfg, dataset, mask, "validation", i, 0, None)
        comp, _ = models.gen.forward(ex, models.norm)
        pred = comp.data[0, 0]
        target = ex.target_full
        if cfg.output_domain == "pm1":
            pred, target = (pred + 1) / 2, (target + 1) / 2
        total += _rms(pred, target)
    return total / count


def _save(cfg, models, opt_gen, opt_disc, alrc_mse, alrc_aux, t, out_dir, tag):
    scalars = {
        "iteration": float(t),
        "alrc_mse.mu1": alrc_mse.mu1, "alrc_mse.mu2": alrc_mse.mu2,
        "alrc_aux.mu1": alrc_aux.mu1, "alrc_aux.mu2": alrc_aux.mu2,
    }
    tensors = md.checkpoint_tensors(models, scalars)
    tensors.update(opt_gen.state_tensors("opt_gen"))
    tensors.update(opt_disc.state_tensors("opt_disc"))
    path = Path(out_dir) / f"checkpoint_{tag}.ckpt"
    imageio.save_checkpoint(path, tensors)
    latest = Path(out_dir) / "checkpoint_latest.ckpt"
    imageio.save_checkpoint(latest, tensors)
    return str(path)


def load_models_from_checkpoint(path, cfg: RunConfig) -> tuple[md.Models, dict]:
    gcfg, dcfg = model_configs(cfg)
    models = md.init_models(gcfg, dcfg, seed=cfg.seed)
    tensors = imageio.load_checkpoint(path)
    scalars = md.restore_models(models, tensors)
    return models, scalars


def model_configs(cfg: RunConfig) -> tuple[md.GeneratorConfig, md.DiscriminatorConfig]:
    gcfg = md.GeneratorConfig(side=cfg.side, base_channels=cfg.base_channels,
                              residual_blocks=cfg.residual_blocks,
                              inner_kernel=cfg.inner_kernel,
                              outer_kernel=cfg.outer_kernel,
                              path_channel=cfg.path_channel, infill=cfg.infill,
                              symmetric_residuals=cfg.symmetric_residuals,
                              output_domain=cfg.output_domain)
    dcfg = md.DiscriminatorConfig(side=cfg.side, base_channels=cfg.disc_channels)
    return gcfg, dcfg


def train_loop(cfg: RunConfig, dataset=None, resume_from: str | None = None) -> TrainResult:
    """Run the full two-phase protocol; returns the result with open logs.

    Writes loss.csv, config.echo and periodic checkpoints under cfg.out_dir.
    On a numeric error the current state is checkpointed before re-raising.
    """
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out_dir)
    dataset = dataset or build_dataset(cfg)
    mask = build_mask(cfg)

    calibration = build_example(cfg, dataset, mask, "train", 0, 0, None)
    gcfg, dcfg = model_configs(cfg)
    start_iter = 0
    alrc_mse = AlrcState(cfg.alrc_mu1, cfg.alrc_mu2, cfg.alrc_decay, cfg.alrc_n)
    alrc_aux = AlrcState(cfg.alrc_mu1, cfg.alrc_mu2, cfg.alrc_decay, cfg.alrc_n)

    models = md.init_models(gcfg, dcfg, seed=cfg.seed, calibration_example=calibration)
    opt_gen = make_optimizer(cfg.optimizer, models.generator_params())
    opt_disc = Adam(models.discriminator_params())

    if resume_from:
        tensors = imageio.load_checkpoint(resume_from)
        scalars = md.restore_models(models, tensors)
        opt_gen.restore(tensors, "opt_gen")
        opt_disc.restore(tensors, "opt_disc")
        alrc_mse.mu1 = scalars["alrc_mse.mu1"]
        alrc_mse.mu2 = scalars["alrc_mse.mu2"]
        alrc_aux.mu1 = scalars["alrc_aux.mu1"]
        alrc_aux.mu2 = scalars["alrc_aux.mu2"]
        start_iter = int(scalars["iteration"]) + 1

    result = TrainResult(final_iteration=start_iter, models=models, mask=mask,
                         dataset=dataset)
    state_mse = alrc_mse if cfg.alrc_enabled else None
    state_aux = alrc_aux if cfg.alrc_enabled else None

    prefetch = (Prefetcher(cfg, dataset, mask, start_iter, cfg.iterations,
                           capacity=cfg.prefetch) if cfg.prefetch > 0 else None)

    loss_path = out_dir / "loss.csv"
    had_log = loss_path.exists() and loss_path.stat().st_size > 0
    loss_file = open(loss_path, "a" if resume_from else "w")
    if not (resume_from and had_log):
        loss_file.write("iter,phase,lr,L_MSE,L_aux,L_adv,L_D,val_RMS\n")

    def log_row(t, phase, lr, lm, la, ladv, ld, val):
        row = (t, phase, repr(float(lr)), _fmt(lm), _fmt(la), _fmt(ladv), _fmt(ld),
               _fmt(val))
        result.loss_rows.append(row)
        loss_file.write(",".join(str(v) for v in row) + "\n")

    def _fmt(v):
        return "" if v is None else repr(float(v))

    disc_params = models.discriminator_params()
    replay = ReplayBuffer(cfg.replay_capacity, cfg.replay_window, cfg.replay_prob)

    try:
        for t in range(start_iter, cfg.iterations):
            sched = schedule(t, cfg.iterations, cfg.adversarial, cfg.lr0, cfg.lr_adv)
            if sched.phase == 2 and not models.norm.frozen:
                models.norm.frozen = True
            step_rng = rng_for(cfg.seed, t, 1)
            example = prefetch.get(t) if prefetch else fresh_example(cfg, dataset,
                                                                     mask, t)
            l_adv_v = l_d_v = None

            if sched.phase == 1:
                with ad.Graph() as g:
                    comp, feats = models.gen.forward(example, models.norm, train=True)
                    half = models.aux.forward(feats, models.norm, train=True)
                    l_mse = md.loss_mse(comp, example.target_full, state_mse,
                                        cfg.lambda_cond)
                    l_aux = md.loss_aux(half, example.target_half, state_aux,
                                        cfg.lambda_trainer)
                    total = md.loss_generator_total(None, l_mse, l_aux, 1,
                                                    lambda_aux=cfg.lambda_aux)
                g.backward(total)
                opt_gen.step(sched.lr_gen, sched.beta1)
                for p in models.generator_params().values():
                    p.zero_grad()
                l_mse_v, l_aux_v = l_mse.item(), l_aux.item()
            else:
                md.power_iterate(models.discs, models.norm)
                replay_idx = replay.next_source(step_rng)
                d_example = replay.get(replay_idx) if replay_idx is not None else example
                fake_comp, _ = models.gen.forward(d_example, models.norm)
                fake_img = (2.0 * fake_comp.data - 1.0 if cfg.output_domain == "01"
                            else fake_comp.data)
                real_img = d_example.real_full[None, None]
                with ad.Graph() as g:
                    sr = [d.forward(real_img, step_rng, models.norm)
                          for d in models.discs]
                    sf = [d.forward(fake_img, step_rng, models.norm)
                          for d in models.discs]
                    l_d = md.loss_discriminator(sr, sf)
                g.backward(l_d)
                opt_disc.step(sched.lr_disc, sched.beta1)
                for p in disc_params.values():
                    p.zero_grad()
                l_d_v = l_d.item()
                replay.observe(d_example, l_d_v, replay_idx)

                for p in disc_params.values():
                    p.requires_grad = False
                with ad.Graph() as g:
                    comp, feats = models.gen.forward(example, models.norm, train=True)
                    half = models.aux.forward(feats, models.norm, train=True)
                    if cfg.output_domain == "01":
                        fake = ad.sub(ad.mul(comp, 2.0), ad.Tensor(1.0))
                    else:
                        fake = comp
                    sf = [d.forward(fake, step_rng, models.norm)
                          for d in models.discs]
                    l_adv = md.loss_adversarial(sf)
                    l_mse = md.loss_mse(comp, example.target_full, state_mse,
                                        cfg.lambda_cond)
                    l_aux = md.loss_aux(half, example.target_half, state_aux,
                                        cfg.lambda_trainer)
                    total = md.loss_generator_total(l_adv, l_mse, l_aux, 2,
                                                    cfg.lambda_adv, cfg.lambda_aux)
                g.backward(total)
                opt_gen.step(sched.lr_gen, sched.beta1)
                for p in models.generator_params().values():
                    p.zero_grad()
                for p in disc_params.values():
                    p.requires_grad = True
                l_mse_v, l_aux_v, l_adv_v = l_mse.item(), l_aux.item(), l_adv.item()

                if cfg.monitor_spectral:
                    gain_rng = rng_for(cfg.seed, t, 2)
                    result.spectral_max.append(
                        max(md.spectral_gains(models.discs, models.norm,
                                              gain_rng).values()))

            val = None
            if (t + 1) % cfg.val_every == 0:
                n = dataset.n("validation") if (t + 1) == cfg.iterations else None
                val = validation_rms(cfg, dataset, mask, models, n=n)
                result.val_history.append((t, val))
                loss_file.flush()
            log_row(t, sched.phase, sched.lr_gen, l_mse_v, l_aux_v, l_adv_v,
                    l_d_v, val)

            if cfg.checkpoint_every and (t + 1) % cfg.checkpoint_every == 0:
                result.checkpoint_path = _save(cfg, models, opt_gen, opt_disc,
                                               alrc_mse, alrc_aux, t, out_dir,
                                               str(t + 1))
            result.final_iteration = t
    except NumericError:
        _save(cfg, models, opt_gen, opt_disc, alrc_mse, alrc_aux,
              result.final_iteration, out_dir, "abort")
        loss_file.close()
        raise
    finally:
        if prefetch:
            prefetch.close()

    if cfg.iterations % cfg.val_every != 0 or not result.val_history:
        final_val = validation_rms(cfg, dataset, mask, models,
                                   n=dataset.n("validation"))
        result.val_history.append((cfg.iterations - 1, final_val))
        log_row(cfg.iterations - 1, 2 if cfg.adversarial else 1, 0.0, None, None,
                None, None, final_val)
    result.checkpoint_path = _save(cfg, models, opt_gen, opt_disc, alrc_mse,
                                   alrc_aux, cfg.iterations - 1, out_dir, "final")
    loss_file.close()
    return result
