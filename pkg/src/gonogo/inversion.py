"""Latent recovery: feed-forward inverse generator and the iterative baseline.

Both minimize the same objective: a convex mix of the image-space residual
between X and its reconstruction Gen(z), and the feature-space distance
measured through the frozen discriminator's last conv map.  The feed-forward
model amortizes the 500-step per-image descent into a single forward pass.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .gan import ScaleSpec, get_scale
from .optim import AdamState, adam_step

NORMS = ("rms", "l2")


@dataclass
class InversionConfig:
    lam: float = 0.1          # weight on the feature-distance term
    iterations: int = 500     # iterative-baseline step count
    lr_z: float = 0.05        # iterative-baseline Adam step on z
    init: str = "normal"      # baseline z init: normal | zeros
    epochs: int = 12
    batch_size: int = 50
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    norm: str = "rms"         # rms (L2/sqrt(count)) or raw l2

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0,1], got {self.lam}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.init not in ("normal", "zeros"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}; expected one of {NORMS}")


class InverseGenerator(nn.Network):
    """Discriminator body with the head swapped for a linear map to z."""

    def __init__(self, spec: ScaleSpec, z_dim, rng):
        super().__init__()
        self.spec = spec
        self.z_dim = z_dim
        self.convs, self.bns_ = [], []
        self.layer_specs = []
        c_in = 3
        for k, c_out in enumerate(spec.dis_chain, start=1):
            cv = self._add(f"conv{k}", nn.Conv2d(c_in, c_out, 4, 2, 1, rng,
                                                 name=f"inv.conv{k}"))
            bn = self._add(f"bn{k}", nn.BatchNorm(c_out, rng, name=f"inv.bn{k}"))
            self.convs.append(cv)
            self.bns_.append(bn)
            self.layer_specs.append(nn.LayerSpec("conv", filter_hw=(4, 4), stride=2,
                                                 in_channels=c_in, out_channels=c_out,
                                                 activation="elu"))
            c_in = c_out
        flat = spec.dis_chain[-1] * spec.base * spec.base
        self.fc5 = self._add("fc5", nn.Dense(flat, z_dim, rng, name="inv.fc5"))
        self.layer_specs.append(nn.LayerSpec("fully-connected", in_channels=flat,
                                             out_channels=z_dim, activation="linear"))

    def forward(self, x):
        x = ad.as_tensor(x)
        if x.data.ndim != 4 or x.data.shape[1] != 3 or x.data.shape[2:] != self.spec.hw:
            raise nn.ShapeError(f"inverse generator expects [N,3,{self.spec.hw[0]},"
                                f"{self.spec.hw[1]}] images, got {x.data.shape}")
        h = x
        for cv, bn in zip(self.convs, self.bns_):
            h = ad.elu(bn(cv(h), training=self.training))
        return self.fc5(ad.reshape(h, (h.shape[0], -1)))

    def __call__(self, x):
        return self.forward(x)


def build_inverse_generator(scale, z_dim=None, seed=0) -> InverseGenerator:
    spec = get_scale(scale) if isinstance(scale, str) else scale
    rng = np.random.default_rng(seed)
    return InverseGenerator(spec, spec.z_dim if z_dim is None else z_dim, rng)


def _per_image_norm(t, kind):
    """Reduce [N,...] to a scalar: per-image norm, then batch mean."""
    axes = tuple(range(1, t.data.ndim))
    if kind == "rms":
        per = ad.rms(t, axis=axes)
    else:
        per = ad.sqrt(ad.tsum(ad.square(t), axis=axes))
    return ad.tmean(per)


def _batched(x, want_ndim):
    x = ad.as_tensor(x)
    if x.data.ndim == want_ndim - 1:
        return ad.reshape(x, (1,) + x.data.shape)
    return x


def combined_loss(X, z, gen, dis, cfg: InversionConfig, masks=None):
    """(1-lam) * ||W_R o (X - Gen(z))|| + lam * ||W_D o (f(X) - f(Gen(z)))||.

    Accepts a single image [3,H,W] with z [z_dim], or batches of both; the
    batched value is the mean of the per-image losses.  `masks` of None is
    the unmasked form (identical to all-ones masks bit for bit).
    """
    X = _batched(X, 4)
    z = _batched(z, 2)
    xp = gen(z)
    diff = X - xp
    if masks is not None:
        diff = diff * Tensor(np.asarray(masks.w_r, dtype=np.float32))
    l_r = _per_image_norm(diff, cfg.norm)
    fdiff = dis.features(X) - dis.features(xp)
    if masks is not None:
        fdiff = fdiff * Tensor(np.asarray(masks.w_d, dtype=np.float32))
    l_d = _per_image_norm(fdiff, cfg.norm)
    return l_r * (1.0 - cfg.lam) + l_d * cfg.lam


def invert_iterative(X, gen, dis, cfg: InversionConfig, masks=None, seed=None):
    """Adam descent on z under frozen models; returns (best z, loss curve).

    The curve has one entry per evaluated point (iterations + 1 values); the
    returned z is the best one seen, so its loss never exceeds curve[0].
    """
    _require_frozen(gen, dis)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    if cfg.init == "normal":
        z0 = rng.standard_normal((1, gen.z_dim)).astype(np.float32)
    else:
        z0 = np.zeros((1, gen.z_dim), dtype=np.float32)
    z = Tensor(z0, requires_grad=True, name="z")
    opt = AdamState([z], lr=cfg.lr_z, beta1=cfg.beta1, beta2=cfg.beta2)

    best_z, best_loss = z.data.copy(), np.inf
    curve = []
    for _ in range(cfg.iterations):
        loss = combined_loss(X, z, gen, dis, cfg, masks)
        lv = float(loss.data)
        curve.append(lv)
        if lv < best_loss:
            best_loss, best_z = lv, z.data.copy()
        z.zero_grad()
        loss.backward()
        adam_step([z], [z.grad], opt)
    final = float(combined_loss(X, z, gen, dis, cfg, masks).data)
    curve.append(final)
    if final < best_loss:
        best_z = z.data.copy()
    return best_z[0], curve


def _require_frozen(*models):
    for m in models:
        if not m.frozen:
            raise RuntimeError("inversion requires frozen models")


def _positive_stack(dataset):
    images = []
    for fr in dataset:
        label = getattr(fr, "label", "positive")
        if label != "positive":
            raise ValueError(f"inverse-generator training is positive-only; found a "
                             f"{label!r} frame at origin {getattr(fr, 'origin', None)}")
        images.append(fr.image if hasattr(fr, "image") else fr)
    if not images:
        raise ValueError("empty training set")
    return np.stack(images).astype(np.float32)


def train_inverse_generator(positive_dataset, gen, dis, cfg: InversionConfig,
                            log_every=0):
    """Fit the feed-forward inverse on positives under frozen gen/dis.

    Only the inverse generator's parameters move; gen and dis are verified
    bitwise-unchanged.  Returns the frozen model with a `history` attribute
    of per-epoch mean losses.
    """
    import time

    _require_frozen(gen, dis)
    data = _positive_stack(list(positive_dataset))
    before = (gen.param_fingerprint(), dis.param_fingerprint())

    rng = np.random.default_rng(cfg.seed)
    inv = build_inverse_generator(gen.spec, gen.z_dim, seed=int(rng.integers(2 ** 31)))
    opt = AdamState(inv.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)

    n = len(data)
    bs = min(cfg.batch_size, n)
    history = []
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n - bs + 1, bs):
            X = Tensor(data[order[start:start + bs]])
            loss = combined_loss(X, inv(X), gen, dis, cfg)
            inv.zero_grad()
            loss.backward()
            adam_step(inv.parameters(), [p.grad for p in inv.parameters()], opt)
            losses.append(float(loss.data))
        history.append({"epoch": epoch, "loss": float(np.mean(losses))})
        if log_every and (epoch + 1) % log_every == 0:
            print(f"[inv] epoch {epoch + 1}/{cfg.epochs} "
                  f"loss={history[-1]['loss']:.4f} "
                  f"({time.perf_counter() - t0:.0f}s)")
    inv.freeze()
    inv.history = history

    after = (gen.param_fingerprint(), dis.param_fingerprint())
    if before != after:
        raise RuntimeError("frozen models were mutated during inverse training")
    return inv


def invert_feedforward(X, inv: InverseGenerator):
    """Single forward pass to z; [3,H,W] -> [z_dim], batches stay batched."""
    if not inv.frozen:
        raise RuntimeError("invert_feedforward requires a frozen inverse generator")
    single = np.asarray(X.data if isinstance(X, Tensor) else X).ndim == 3
    z = inv(_batched(X, 4))
    return ad.reshape(z, (inv.z_dim,)) if single else z
