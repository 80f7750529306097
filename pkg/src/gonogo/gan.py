"""Generator/discriminator pair and the adversarial training loop.

Both networks are stride-2 chains of 4x4 filters with padding 1, so spatial
size exactly doubles per generator stage and halves per discriminator stage.
The generator ends in ReLU (images live in [0,1], not [-1,1]).  The
discriminator exposes its last post-activation conv map as the feature
tensor `f` used by downstream scoring.

Training consumes positive-labeled data only; anything else in the dataset
is a contract violation and raises.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .optim import AdamState, adam_step

EPS_CLAMP = 1e-7  # probability floor inside the log terms


@dataclass(frozen=True)
class ScaleSpec:
    """Network geometry for one image resolution."""

    name: str
    hw: tuple
    z_dim: int
    gen_fc_channels: int   # channel count right after the FC reshape
    gen_chain: tuple       # deconv output channels, ending at 3 (RGB)
    dis_chain: tuple       # conv output channels, last one is the feature tap
    base: int              # spatial size after the FC reshape / at the tap

    @property
    def feature_shape(self):
        return (self.dis_chain[-1], self.base, self.base)


SCALES = {
    "full": ScaleSpec("full", (128, 128), 100, 512, (256, 128, 64, 3),
                      (64, 128, 256, 512), 8),
    "desk": ScaleSpec("desk", (32, 32), 32, 128, (64, 32, 3),
                      (32, 64, 128), 4),
}


def get_scale(name) -> ScaleSpec:
    if name not in SCALES:
        raise ValueError(f"unknown scale {name!r}; expected one of {sorted(SCALES)}")
    return SCALES[name]


@dataclass
class GanConfig:
    scale: str = "desk"
    z_dim: int = None          # defaults to the scale's latent size
    batch_size: int = 100
    epochs: int = None         # defaults: 30 desk, 50 full
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    label_smoothing: bool = False   # optional 0.9 real target; off = literal loss
    saturating: bool = False        # generator objective variant
    divergence_limit: float = 50.0

    def __post_init__(self):
        spec = get_scale(self.scale)
        if self.z_dim is None:
            self.z_dim = spec.z_dim
        if self.epochs is None:
            self.epochs = 30 if self.scale == "desk" else 50
        if self.z_dim < 1:
            raise ValueError("z_dim must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 (batch norm needs statistics)")

    @property
    def spec(self) -> ScaleSpec:
        return get_scale(self.scale)


class Generator(nn.Network):
    """FC to a small spatial block, then stride-2 deconvs up to the image."""

    def __init__(self, cfg: GanConfig, rng):
        super().__init__()
        spec = cfg.spec
        self.spec = spec
        self.z_dim = cfg.z_dim
        c0, base = spec.gen_fc_channels, spec.base
        self.fc1 = self._add("fc1", nn.Dense(cfg.z_dim, c0 * base * base, rng, name="gen.fc1"))
        self.bn1 = self._add("bn1", nn.BatchNorm(c0, rng, name="gen.bn1"))
        self.layer_specs = [nn.LayerSpec("fully-connected", in_channels=cfg.z_dim,
                                         out_channels=c0 * base * base, activation="relu")]
        self.deconvs, self.bns = [], []
        c_in = c0
        for k, c_out in enumerate(spec.gen_chain, start=2):
            last = k == len(spec.gen_chain) + 1
            dc = self._add(f"dconv{k}", nn.ConvTranspose2d(c_in, c_out, 4, 2, 1, rng,
                                                           name=f"gen.dconv{k}"))
            bn = None if last else self._add(f"bn{k}", nn.BatchNorm(c_out, rng,
                                                                    name=f"gen.bn{k}"))
            self.deconvs.append(dc)
            self.bns.append(bn)
            self.layer_specs.append(nn.LayerSpec("deconv", filter_hw=(4, 4), stride=2,
                                                 in_channels=c_in, out_channels=c_out,
                                                 activation="relu"))
            c_in = c_out
        # the output layer has no batch-norm to recenter it, so a zero bias
        # would leave half its ReLU units dead and the first images near-black;
        # start at mid-range of the pixel domain instead
        self.deconvs[-1].b.data[:] = 0.5

    def forward(self, z):
        z = ad.as_tensor(z)
        if z.data.ndim != 2 or z.data.shape[1] != self.z_dim:
            raise nn.ShapeError(f"generator expects z of shape [N,{self.z_dim}], "
                                f"got {z.data.shape}")
        spec = self.spec
        h = self.fc1(z)
        h = ad.reshape(h, (z.data.shape[0], spec.gen_fc_channels, spec.base, spec.base))
        h = ad.relu(self.bn1(h, training=self.training))
        for dc, bn in zip(self.deconvs, self.bns):
            h = dc(h)
            if bn is not None:
                h = bn(h, training=self.training)
            h = ad.relu(h)
        return h

    def __call__(self, z):
        return self.forward(z)


class Discriminator(nn.Network):
    """Stride-2 ELU conv chain, feature tap after the last conv, FC to softmax."""

    def __init__(self, cfg: GanConfig, rng):
        super().__init__()
        spec = cfg.spec
        self.spec = spec
        self.convs, self.bns_ = [], []
        self.layer_specs = []
        c_in = 3
        for k, c_out in enumerate(spec.dis_chain, start=1):
            cv = self._add(f"conv{k}", nn.Conv2d(c_in, c_out, 4, 2, 1, rng,
                                                 name=f"dis.conv{k}"))
            bn = self._add(f"bn{k}", nn.BatchNorm(c_out, rng, name=f"dis.bn{k}"))
            self.convs.append(cv)
            self.bns_.append(bn)
            self.layer_specs.append(nn.LayerSpec("conv", filter_hw=(4, 4), stride=2,
                                                 in_channels=c_in, out_channels=c_out,
                                                 activation="elu"))
            c_in = c_out
        flat = spec.dis_chain[-1] * spec.base * spec.base
        self.fc5 = self._add("fc5", nn.Dense(flat, 2, rng, name="dis.fc5"))
        self.layer_specs.append(nn.LayerSpec("fully-connected", in_channels=flat,
                                             out_channels=2, activation="softmax"))

    def features(self, x):
        """Post-activation map of the last conv layer (the tensor f)."""
        x = ad.as_tensor(x)
        if x.data.ndim != 4 or x.data.shape[1] != 3 or x.data.shape[2:] != self.spec.hw:
            raise nn.ShapeError(f"discriminator expects [N,3,{self.spec.hw[0]},"
                                f"{self.spec.hw[1]}] images, got {x.data.shape}")
        h = x
        for cv, bn in zip(self.convs, self.bns_):
            h = ad.elu(bn(cv(h), training=self.training))
        return h

    def forward(self, x):
        """Class probabilities [N,2]; column 1 is the real class."""
        f = self.features(x)
        flat = ad.reshape(f, (f.shape[0], -1))
        return ad.softmax(self.fc5(flat), axis=-1)

    def __call__(self, x):
        return self.forward(x)


def build_generator(cfg: GanConfig, seed=None) -> Generator:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    return Generator(cfg, rng)


def build_discriminator(cfg: GanConfig, seed=None) -> Discriminator:
    rng = np.random.default_rng(cfg.seed + 1 if seed is None else seed)
    return Discriminator(cfg, rng)


REAL, FAKE = 1, 0  # softmax column convention


def real_prob(probs):
    """Differentiable selection of the real-class column from [N,2] softmax."""
    onehot = np.zeros(probs.data.shape, dtype=np.float32)
    onehot[:, REAL] = 1.0
    return ad.tsum(ad.mul(probs, Tensor(onehot)), axis=1)


def _clamped_log(p):
    return ad.log(ad.clamp_min(p, EPS_CLAMP))


def generator_loss(dis_fake, saturating=False):
    """Generator objective from the fake batch's softmax output alone."""
    p_fake = real_prob(dis_fake)
    if saturating:
        return ad.tmean(_clamped_log(Tensor(np.float32(1.0)) - p_fake))
    return Tensor(np.float32(0.0)) - ad.tmean(_clamped_log(p_fake))


def gan_loss(dis_real, dis_fake, real_target=1.0, saturating=False):
    """(d_loss, g_loss, v) from the two softmax outputs.

    v is the batch-mean value of the adversarial game
    log Dis(X) + log(1 - Dis(Gen(z))); d_loss == -v by definition.  The
    generator term is -log Dis(Gen(z)) unless `saturating`, which uses the
    literal +log(1 - Dis(Gen(z))).  `real_target` < 1 turns on one-sided
    label smoothing of the real term (and is folded into v so d_loss == -v
    stays true by construction).
    """
    p_real = real_prob(dis_real)
    p_fake = real_prob(dis_fake)
    one = Tensor(np.float32(1.0))
    real_term = ad.tmean(_clamped_log(p_real))
    if real_target < 1.0:
        real_term = real_term * real_target \
            + ad.tmean(_clamped_log(one - p_real)) * (1.0 - real_target)
    v = real_term + ad.tmean(_clamped_log(one - p_fake))
    d_loss = Tensor(np.float32(0.0)) - v
    return d_loss, generator_loss(dis_fake, saturating), v


class DivergenceError(RuntimeError):
    """Training lost stability (loss blew past the configured limit)."""


def _positive_images(dataset):
    images = []
    for fr in dataset:
        label = getattr(fr, "label", "positive")
        if label != "positive":
            raise ValueError(f"adversarial training is positive-only; found a "
                             f"{label!r} frame at origin {getattr(fr, 'origin', None)}")
        images.append(fr.image if hasattr(fr, "image") else fr)
    if not images:
        raise ValueError("empty training set")
    return np.stack(images).astype(np.float32)


def train_gan(positive_dataset, cfg: GanConfig, log_every=0):
    """Alternating D/G steps over the positive pool.

    Returns (gen, dis, history); both models come back frozen, with
    batch-norm switched to the running statistics accumulated in training.
    history is a list of {epoch, d_loss, g_loss, v} dicts.
    """
    data = _positive_images(_as_list(positive_dataset))
    rng = np.random.default_rng(cfg.seed)
    gen = build_generator(cfg, seed=rng.integers(2 ** 31))
    dis = build_discriminator(cfg, seed=rng.integers(2 ** 31))
    opt_g = AdamState(gen.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    opt_d = AdamState(dis.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    real_target = 0.9 if cfg.label_smoothing else 1.0

    n = len(data)
    bs = min(cfg.batch_size, n)
    history = []
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        d_losses, g_losses, vs = [], [], []
        for start in range(0, n - bs + 1, bs):
            batch = Tensor(data[order[start:start + bs]])

            # discriminator step: fresh z, generator graph detached
            z = Tensor(rng.standard_normal((bs, cfg.z_dim)).astype(np.float32))
            fake = gen(z).detach()
            d_loss, _, v = gan_loss(dis(batch), dis(fake), real_target)
            dis.zero_grad()
            d_loss.backward()
            adam_step(dis.parameters(), [p.grad for p in dis.parameters()], opt_d)

            # generator step: new z, gradients flow through the discriminator
            z = Tensor(rng.standard_normal((bs, cfg.z_dim)).astype(np.float32))
            g_loss = generator_loss(dis(gen(z)), saturating=cfg.saturating)
            gen.zero_grad()
            dis.zero_grad()
            g_loss.backward()
            adam_step(gen.parameters(), [p.grad for p in gen.parameters()], opt_g)

            dl, gl, vv = float(d_loss.data), float(g_loss.data), float(v.data)
            if not np.isfinite(dl) or not np.isfinite(gl) \
                    or max(abs(dl), abs(gl)) > cfg.divergence_limit:
                raise DivergenceError(
                    f"epoch {epoch}: d_loss={dl:.3f} g_loss={gl:.3f} exceeded "
                    f"limit {cfg.divergence_limit}")
            d_losses.append(dl)
            g_losses.append(gl)
            vs.append(vv)
        history.append({"epoch": epoch, "d_loss": float(np.mean(d_losses)),
                        "g_loss": float(np.mean(g_losses)), "v": float(np.mean(vs))})
        if log_every and (epoch + 1) % log_every == 0:
            el = time.perf_counter() - t0
            print(f"[gan] epoch {epoch + 1}/{cfg.epochs} "
                  f"d={history[-1]['d_loss']:.3f} g={history[-1]['g_loss']:.3f} "
                  f"({el:.0f}s)")
    gen.freeze()
    dis.freeze()
    return gen, dis, history


def _as_list(dataset):
    return dataset if isinstance(dataset, (list, tuple)) else list(dataset)


def feature_f(dis: Discriminator, image):
    """Feature tensor f(X) from a frozen discriminator."""
    if not dis.frozen:
        raise RuntimeError("feature extraction requires a frozen discriminator")
    return dis.features(ad.as_tensor(image))
