"""Completion networks: two-stage generator, auxiliary trainer, multiscale
discriminators, their normalization schemes, and the loss functions.

Generator convolutions are weight normalized with no biases; every one
except the output convolutions is followed by running mean-only batch
normalization and ReLU.  Discriminator convolutions carry biases, spectral
normalization (one power iteration per training step), and slope-0.2 leaky
ReLU.  Discriminators score one randomly placed crop per scale, bilinearly
downsampled to a common input size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .alrc import AlrcState, alrc
from .errors import ContractError, NumericError
from .pipeline import TrainingExample, bilinear_down

LAMBDA_COND = 200.0
LAMBDA_TRAINER = 200.0
LAMBDA_AUX = 1.0
LAMBDA_ADV = 5.0


@dataclass
class GeneratorConfig:
    side: int = 64
    base_channels: int = 16
    residual_blocks: int = 2
    inner_kernel: int = 3
    outer_kernel: int = 7
    path_channel: bool = True
    infill: bool = True
    symmetric_residuals: bool = False
    output_domain: str = "01"

    def __post_init__(self):
        if self.side % 8 != 0:
            raise ContractError(f"side must be divisible by 8, got {self.side}")
        if self.inner_kernel % 2 == 0 or self.outer_kernel % 2 == 0:
            raise ContractError("first-kernel sizes must be odd")

    @property
    def in_channels(self) -> int:
        return 2 if self.path_channel else 1


@dataclass
class DiscriminatorConfig:
    side: int = 64
    base_channels: int = 16
    crop_fracs: tuple[float, ...] = (0.137, 0.273, 0.547)
    leaky: float = 0.2
    conv_layers: int = 4

    @property
    def common_size(self) -> int:
        return max(2, round(self.crop_fracs[0] * self.side))

    def crop_size(self, scale: int) -> int:
        return max(2, round(self.crop_fracs[scale - 1] * self.side))


@dataclass
class NormState:
    """Trackable normalization state, outside the parameter set."""

    running_means: dict[str, np.ndarray] = field(default_factory=dict)
    spectral_u: dict[str, np.ndarray] = field(default_factory=dict)
    spectral_v: dict[str, np.ndarray] = field(default_factory=dict)
    frozen: bool = False
    bn_decay: float = 0.99


# ---------------------------------------------------------------------------
# layers


class WnConv:
    """Weight-normalized generator convolution, no bias.

    ``bn``/``act`` select the running mean-only batch normalization and ReLU
    that follow every generator convolution except output ones.
    """

    def __init__(self, name, rng, in_ch, out_ch, k=3, stride=1, transpose=False,
                 bn=True, act=True, init_std=0.05):
        self.name = name
        self.stride = stride
        self.transpose = transpose
        self.bn = bn
        self.act = act
        self.out_ch = out_ch
        shape = (in_ch, out_ch, k, k) if transpose else (out_ch, in_ch, k, k)
        self.raw = ad.Tensor(rng.normal(0.0, init_std, size=shape), requires_grad=True,
                             name=f"{name}.raw")
        self.scale = ad.Tensor(np.ones(out_ch), requires_grad=True, name=f"{name}.scale")

    def params(self):
        return {f"{self.name}.raw": self.raw, f"{self.name}.scale": self.scale}

    def register_norm(self, norm: NormState):
        if self.bn:
            norm.running_means.setdefault(self.name, np.zeros(self.out_ch, np.float32))

    def forward(self, x: ad.Tensor, norm: NormState, train=False, calibrate=False):
        w = ad.weight_norm(self.raw, self.scale, out_axis=1 if self.transpose else 0)
        if self.transpose:
            y = ad.conv2d_transpose(x, w, self.stride)
        else:
            y = ad.conv2d(x, w, self.stride, "same")
        if calibrate:
            std = y.data.std(axis=(0, 2, 3), dtype=np.float64)
            std = np.maximum(std, 1e-8)
            self.scale.data = (self.scale.data / std).astype(self.scale.data.dtype)
            y = ad.Tensor(y.data / std[None, :, None, None])
        if self.bn:
            # Mean-only batch normalization: while learning, center on the
            # current channel means (a lagged running mean feeds back through
            # the layer stack and diverges); the tracked running mean serves
            # the frozen phase and inference.
            rm = norm.running_means[self.name]
            if train and not norm.frozen:
                batch_mean = y.data.mean(axis=(0, 2, 3))
                rm *= norm.bn_decay
                rm += (1.0 - norm.bn_decay) * batch_mean
                y = ad.center_channels(y)
            else:
                y = ad.sub(y, ad.Tensor(rm.reshape(1, -1, 1, 1), dtype=y.data.dtype))
        if self.act:
            y = ad.relu(y)
        y.check_finite(self.name)
        return y


class SnConv:
    """Spectral-normalized discriminator convolution with bias and leaky ReLU."""

    def __init__(self, name, rng, in_ch, out_ch, k=3, stride=2, leaky=0.2,
                 init_std=0.03):
        self.name = name
        self.stride = stride
        self.leaky = leaky
        self.raw = ad.Tensor(rng.normal(0.0, init_std, size=(out_ch, in_ch, k, k)),
                             requires_grad=True, name=f"{name}.w")
        self.bias = ad.Tensor(np.zeros(out_ch), requires_grad=True, name=f"{name}.b")

    def params(self):
        return {f"{self.name}.w": self.raw, f"{self.name}.b": self.bias}

    def matrix_view(self) -> np.ndarray:
        return self.raw.data.reshape(self.raw.data.shape[0], -1)

    def forward(self, x, norm: NormState):
        w = ad.spectral_div(self.raw, norm.spectral_u[self.name],
                            norm.spectral_v[self.name])
        y = ad.conv2d(x, w, self.stride, "same")
        y = ad.add(y, ad.reshape(self.bias, (1, -1, 1, 1)))
        y = ad.leaky_relu(y, self.leaky)
        y.check_finite(self.name)
        return y


class SnLinear:
    """Spectral-normalized affine head mapping flattened features to a score.

    The weight is stored as [in_features, out_features]; the top singular
    value is transpose-invariant so the power iteration runs on that view.
    """

    def __init__(self, name, rng, in_features, out_features=1, init_std=0.03):
        self.name = name
        self.raw = ad.Tensor(rng.normal(0.0, init_std, size=(in_features, out_features)),
                             requires_grad=True, name=f"{name}.w")
        self.bias = ad.Tensor(np.zeros(out_features), requires_grad=True,
                              name=f"{name}.b")

    def params(self):
        return {f"{self.name}.w": self.raw, f"{self.name}.b": self.bias}

    def matrix_view(self) -> np.ndarray:
        return self.raw.data

    def forward(self, x, norm: NormState):
        w = ad.spectral_div(self.raw, norm.spectral_u[self.name],
                            norm.spectral_v[self.name])
        y = ad.linear(x, w, self.bias)
        y.check_finite(self.name)
        return y


# ---------------------------------------------------------------------------
# networks


class Generator:
    """Inner/outer two-stage completion generator."""

    def __init__(self, cfg: GeneratorConfig, rng):
        self.cfg = cfg
        c = cfg.base_channels
        ic = cfg.in_channels
        self.layers: list[WnConv] = []

        def conv(name, *args, **kw):
            layer = WnConv(name, rng, *args, **kw)
            self.layers.append(layer)
            return layer

        self.i_embed = conv("gen.i_embed", ic, c, k=cfg.inner_kernel)
        self.i_down1 = conv("gen.i_down1", c, 2 * c, stride=2)
        self.i_down2 = conv("gen.i_down2", 2 * c, 4 * c, stride=2)
        self.i_blocks = [[conv(f"gen.i_block{b}_conv{j}", 4 * c, 4 * c)
                          for j in range(3)] for b in range(cfg.residual_blocks)]
        self.i_up1 = conv("gen.i_up1", 4 * c, 2 * c, stride=2, transpose=True)
        self.i_up2 = conv("gen.i_up2", 2 * c, 2 * c, stride=2, transpose=True)

        self.o_embed = conv("gen.o_embed", ic, c, k=cfg.outer_kernel)
        self.o_down = conv("gen.o_down", c, 2 * c, stride=2)
        self.o_blocks = [[conv(f"gen.o_block{b}_conv{j}", 2 * c, 2 * c)
                          for j in range(3)] for b in range(cfg.residual_blocks)]
        self.o_up = conv("gen.o_up", 2 * c, c, stride=2, transpose=True)
        self.o_out = conv("gen.o_out", c, 1, bn=False, act=False)

    def params(self):
        out = {}
        for layer in self.layers:
            out.update(layer.params())
        return out

    def register_norm(self, norm: NormState):
        for layer in self.layers:
            layer.register_norm(norm)

    def input_planes(self, example: TrainingExample) -> np.ndarray:
        planes = [example.input_scan]
        if self.cfg.path_channel:
            planes.append(example.path_channel)
        return np.stack(planes)[None].astype(np.float32)

    def forward(self, example: TrainingExample, norm: NormState, train=False,
                calibrate=False):
        """Full-size completion plus the inner feature tensor."""
        full = self.input_planes(example)
        side = full.shape[-1]
        if side != self.cfg.side:
            raise ContractError(f"example side {side} != configured {self.cfg.side}")
        half = side // 2
        half_in = np.stack([bilinear_down(p, half, half) for p in full[0]])[None]

        kw = dict(norm=norm, train=train, calibrate=calibrate)
        h = self.i_embed.forward(ad.Tensor(half_in), **kw)
        d1 = self.i_down1.forward(h, **kw)
        d2 = self.i_down2.forward(d1, **kw)
        h = d2
        for block in self.i_blocks:
            t = h
            for layer in block:
                t = layer.forward(t, **kw)
            h = ad.add(h, t)
        if self.cfg.symmetric_residuals:
            h = ad.add(h, d2)
        h = self.i_up1.forward(h, **kw)
        if self.cfg.symmetric_residuals:
            h = ad.add(h, d1)
        inner_feats = self.i_up2.forward(h, **kw)

        g = self.o_embed.forward(ad.Tensor(full), **kw)
        g = self.o_down.forward(g, **kw)
        g = ad.add(g, inner_feats)
        for block in self.o_blocks:
            t = g
            for layer in block:
                t = layer.forward(t, **kw)
            g = ad.add(g, t)
        g = self.o_up.forward(g, **kw)
        completion = self.o_out.forward(g, **kw)
        return completion, inner_feats


class AuxTrainer:
    """Maps inner-generator features to half-size completions (training only)."""

    def __init__(self, cfg: GeneratorConfig, rng):
        c = cfg.base_channels
        self.conv1 = WnConv("aux.conv1", rng, 2 * c, c)
        self.out = WnConv("aux.out", rng, c, 1, bn=False, act=False)
        self.layers = [self.conv1, self.out]

    def params(self):
        out = {}
        for layer in self.layers:
            out.update(layer.params())
        return out

    def register_norm(self, norm: NormState):
        for layer in self.layers:
            layer.register_norm(norm)

    def forward(self, inner_feats, norm, train=False, calibrate=False):
        h = self.conv1.forward(inner_feats, norm=norm, train=train, calibrate=calibrate)
        return self.out.forward(h, norm=norm, train=train, calibrate=calibrate)


class Discriminator:
    """One critic: random crop, downsample to the common size, conv stack."""

    def __init__(self, cfg: DiscriminatorConfig, scale: int, rng):
        if scale not in (1, 2, 3):
            raise ContractError(f"discriminator scale must be 1..3, got {scale}")
        self.cfg = cfg
        self.scale = scale
        self.crop = cfg.crop_size(scale)
        self.d0 = cfg.common_size
        c = cfg.base_channels
        name = f"disc{scale}"
        self.convs = []
        in_ch = 1
        size = self.d0
        for i in range(cfg.conv_layers):
            out_ch = c * (2 ** i)
            self.convs.append(SnConv(f"{name}.conv{i}", rng, in_ch, out_ch,
                                     leaky=cfg.leaky))
            in_ch = out_ch
            size = -(-size // 2)
        self.head = SnLinear(f"{name}.linear", rng, in_ch * size * size)
        self.sn_layers = [*self.convs, self.head]

    def params(self):
        out = {}
        for layer in self.sn_layers:
            out.update(layer.params())
        return out

    def register_norm(self, norm: NormState, rng):
        for layer in self.sn_layers:
            m = layer.matrix_view()
            u = rng.normal(size=m.shape[0])
            norm.spectral_u[layer.name] = (u / np.linalg.norm(u)).astype(np.float32)
            norm.spectral_v[layer.name] = np.zeros(m.shape[1], np.float32)

    def forward(self, image, rng, norm: NormState) -> ad.Tensor:
        """Score one uniformly random crop of this scale."""
        x = image if isinstance(image, ad.Tensor) else ad.Tensor(image)
        side = x.data.shape[-1]
        if side < self.crop:
            raise ContractError(f"image side {side} smaller than crop {self.crop}")
        r0 = int(rng.integers(0, side - self.crop + 1))
        c0 = int(rng.integers(0, side - self.crop + 1))
        h = ad.crop(x, r0, c0, self.crop, self.crop)
        h = ad.bilinear_resample(h, self.d0, self.d0)
        for conv in self.convs:
            h = conv.forward(h, norm)
        h = ad.reshape(h, (h.data.shape[0], -1))
        return self.head.forward(h, norm)


# ---------------------------------------------------------------------------
# spectral normalization maintenance


def power_iterate(discs: list[Discriminator], norm: NormState):
    """One power-iteration step per layer; call once per training step."""
    for disc in discs:
        for layer in disc.sn_layers:
            m = layer.matrix_view().astype(np.float64)
            u = norm.spectral_u[layer.name].astype(np.float64)
            v = m.T @ u
            v /= max(np.linalg.norm(v), 1e-12)
            u = m @ v
            u /= max(np.linalg.norm(u), 1e-12)
            norm.spectral_u[layer.name] = u.astype(np.float32)
            norm.spectral_v[layer.name] = v.astype(np.float32)


def spectral_norms(discs: list[Discriminator], norm: NormState) -> dict[str, float]:
    """True top singular value of each effective (normalized) weight matrix."""
    out = {}
    for disc in discs:
        for layer in disc.sn_layers:
            m = layer.matrix_view().astype(np.float64)
            u = norm.spectral_u[layer.name].astype(np.float64)
            v = norm.spectral_v[layer.name].astype(np.float64)
            sigma_hat = float(u @ m @ v)
            if sigma_hat <= 0:
                raise NumericError(f"non-positive spectral estimate in {layer.name}")
            out[layer.name] = float(np.linalg.svd(m / sigma_hat, compute_uv=False)[0])
    return out


def spectral_gains(discs: list[Discriminator], norm: NormState, rng,
                   n: int = 100) -> dict[str, float]:
    """Max ||W x|| / ||x|| of each normalized weight over n random vectors."""
    out = {}
    for disc in discs:
        for layer in disc.sn_layers:
            m = layer.matrix_view().astype(np.float64)
            u = norm.spectral_u[layer.name].astype(np.float64)
            v = norm.spectral_v[layer.name].astype(np.float64)
            sigma_hat = float(u @ m @ v)
            if sigma_hat <= 0:
                raise NumericError(f"non-positive spectral estimate in {layer.name}")
            x = rng.normal(size=(m.shape[1], n))
            gains = np.linalg.norm((m / sigma_hat) @ x, axis=0) / np.linalg.norm(x, axis=0)
            out[layer.name] = float(gains.max())
    return out


# ---------------------------------------------------------------------------
# losses (the lambda factors multiply inside the clip, matching the
# composition order clip(lambda * MSE))


def _mse(a: ad.Tensor, b) -> ad.Tensor:
    return ad.mean(ad.square(ad.sub(a, b)))


def loss_mse(completion: ad.Tensor, target_full: np.ndarray,
             alrc_state: AlrcState | None, lam: float = LAMBDA_COND) -> ad.Tensor:
    target = ad.Tensor(np.asarray(target_full, np.float32)[None, None])
    if completion.data.shape != target.data.shape:
        raise ContractError(
            f"completion {completion.data.shape} != target {target.data.shape}")
    scaled = ad.mul(_mse(completion, target), lam)
    return scaled if alrc_state is None else alrc(scaled, alrc_state)


def loss_aux(half_completion: ad.Tensor, target_half: np.ndarray,
             alrc_state: AlrcState | None, lam: float = LAMBDA_TRAINER) -> ad.Tensor:
    target = ad.Tensor(np.asarray(target_half, np.float32)[None, None])
    if half_completion.data.shape != target.data.shape:
        raise ContractError(
            f"half completion {half_completion.data.shape} != target {target.data.shape}")
    scaled = ad.mul(_mse(half_completion, target), lam)
    return scaled if alrc_state is None else alrc(scaled, alrc_state)


def loss_discriminator(scores_real: list[ad.Tensor],
                       scores_fake: list[ad.Tensor]) -> ad.Tensor:
    if len(scores_real) != len(scores_fake) or not scores_real:
        raise ContractError("need matching non-empty real/fake score lists")
    n = len(scores_real)
    total = None
    for real, fake in zip(scores_real, scores_fake):
        term = ad.add(ad.mean(ad.square(fake)),
                      ad.mean(ad.square(ad.sub(real, ad.Tensor(1.0)))))
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / n)


def loss_adversarial(scores_fake: list[ad.Tensor]) -> ad.Tensor:
    if not scores_fake:
        raise ContractError("need at least one fake score")
    total = None
    for fake in scores_fake:
        term = ad.mean(ad.square(ad.sub(fake, ad.Tensor(1.0))))
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / len(scores_fake))


def loss_generator_total(l_adv, l_mse, l_aux, phase: int,
                         lambda_adv: float = LAMBDA_ADV,
                         lambda_aux: float = LAMBDA_AUX) -> ad.Tensor:
    if phase == 1:
        return ad.add(l_mse, ad.mul(l_aux, lambda_aux))
    if phase == 2:
        return ad.add(ad.mul(l_adv, lambda_adv),
                      ad.add(l_mse, ad.mul(l_aux, lambda_aux)))
    raise ContractError(f"phase must be 1 or 2, got {phase}")


# ---------------------------------------------------------------------------
# assembly, initialization, checkpoint plumbing


@dataclass
class Models:
    gen: Generator
    aux: AuxTrainer
    discs: list[Discriminator]
    norm: NormState
    gen_cfg: GeneratorConfig
    disc_cfg: DiscriminatorConfig

    def generator_params(self) -> dict[str, ad.Tensor]:
        return {**self.gen.params(), **self.aux.params()}

    def discriminator_params(self) -> dict[str, ad.Tensor]:
        out = {}
        for d in self.discs:
            out.update(d.params())
        return out

    def all_params(self) -> dict[str, ad.Tensor]:
        return {**self.generator_params(), **self.discriminator_params()}


def init_models(gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig, seed: int,
                calibration_example: TrainingExample | None = None) -> Models:
    """Draw initial weights and run the data-dependent weight-norm scaling.

    Generator weights are N(0, 0.05^2) with unit weight-norm scales;
    discriminator weights are N(0, 0.03^2) with zero biases.  When a
    calibration example is given, one forward pass rescales every generator
    layer so its output channels have unit standard deviation.
    """
    rng = np.random.default_rng(seed)
    gen = Generator(gen_cfg, rng)
    aux = AuxTrainer(gen_cfg, rng)
    discs = [Discriminator(disc_cfg, s, rng) for s in (1, 2, 3)]
    norm = NormState()
    gen.register_norm(norm)
    aux.register_norm(norm)
    for d in discs:
        d.register_norm(norm, rng)
    models = Models(gen, aux, discs, norm, gen_cfg, disc_cfg)
    # converge the spectral estimates before anyone divides by them; random
    # matrices have small singular-value gaps, so one step would not do
    for _ in range(50):
        power_iterate(discs, norm)
    if calibration_example is not None:
        _, feats = gen.forward(calibration_example, norm, calibrate=True)
        aux.forward(feats, norm, calibrate=True)
    return models


def checkpoint_tensors(models: Models, scalars: dict[str, float] | None = None
                       ) -> dict[str, np.ndarray]:
    out = {name: t.data for name, t in models.all_params().items()}
    for name, rm in models.norm.running_means.items():
        out[f"norm.rm.{name}"] = rm
    for name, u in models.norm.spectral_u.items():
        out[f"norm.u.{name}"] = u
    for name, v in models.norm.spectral_v.items():
        out[f"norm.v.{name}"] = v
    out["norm.frozen"] = np.array([1.0 if models.norm.frozen else 0.0], np.float32)
    for key, value in (scalars or {}).items():
        out[f"state.{key}"] = np.asarray([value], np.float32)
    return out


def restore_models(models: Models, tensors: dict[str, np.ndarray]) -> dict[str, float]:
    """Load parameters and norm state in place; returns the scalar table."""
    params = models.all_params()
    for name, tensor in params.items():
        if name not in tensors:
            raise ContractError(f"checkpoint is missing parameter {name!r}")
        if tuple(tensors[name].shape) != tensor.data.shape:
            raise ContractError(f"checkpoint shape mismatch for {name!r}")
        tensor.data = tensors[name].astype(np.float32)
    for name in models.norm.running_means:
        models.norm.running_means[name] = tensors[f"norm.rm.{name}"].astype(np.float32)
    for name in models.norm.spectral_u:
        models.norm.spectral_u[name] = tensors[f"norm.u.{name}"].astype(np.float32)
        models.norm.spectral_v[name] = tensors[f"norm.v.{name}"].astype(np.float32)
    models.norm.frozen = bool(tensors.get("norm.frozen", np.zeros(1))[0] > 0.5)
    return {key[len("state."):]: float(v[0]) for key, v in tensors.items()
            if key.startswith("state.")}
