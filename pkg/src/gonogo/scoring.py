"""Traversability scoring: weighted residual/feature distances, threshold
decision, the small supervised fusion head, and saliency extraction.

The unsupervised path reconstructs X through the inverse generator and the
generator, measures how far X is from its reconstruction in image space and
in discriminator-feature space (both weighted toward the bottom band where
the near field lives), mixes the two with lambda, and thresholds.  The
supervised head replaces the fixed mix with three learned linear summaries
fused by one more linear layer and a sigmoid.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .gan import ScaleSpec, get_scale
from .inversion import _batched, _per_image_norm
from .optim import AdamState, adam_step

GO, NOGO = "GO", "NOGO"
BRANCHES = ("R", "D", "F")


@dataclass
class ScoringConfig:
    lam: float = 0.1
    a_th: float = 0.17
    bottom_fraction: float = 1.0 / 8.0
    w_hi: float = 8.0
    norm: str = "rms"

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0,1], got {self.lam}")
        if self.a_th <= 0:
            raise ValueError("a_th must be positive")
        if not 0.0 < self.bottom_fraction <= 1.0:
            raise ValueError("bottom_fraction must be in (0, 1]")
        if self.w_hi < 1.0:
            raise ValueError("w_hi must be >= 1")


@dataclass
class WeightMasks:
    w_r: np.ndarray    # [3, H, W]
    w_d: np.ndarray    # [C_f, h_f, w_f]

    def __post_init__(self):
        for name, m in (("w_r", self.w_r), ("w_d", self.w_d)):
            if np.any(m < 0):
                raise ValueError(f"{name} has negative entries")
            if abs(float(m.mean()) - 1.0) > 1e-4:
                raise ValueError(f"{name} mean {m.mean():.6f} != 1.0")


def _band_mask(shape, bottom_fraction, w_hi):
    c, h, w = shape
    m = np.ones((c, h, w), dtype=np.float32)
    rows = int(math.ceil(h * bottom_fraction))
    m[:, h - rows:, :] = w_hi
    return m / m.mean()


def build_weight_masks(cfg: ScoringConfig, scale) -> WeightMasks:
    """Bottom-band emphasis masks, rescaled so each has mean exactly 1."""
    spec = get_scale(scale) if isinstance(scale, str) else scale
    h, w = spec.hw
    return WeightMasks(_band_mask((3, h, w), cfg.bottom_fraction, cfg.w_hi),
                       _band_mask(spec.feature_shape, cfg.bottom_fraction, cfg.w_hi))


@dataclass
class ScoreBreakdown:
    r_s: float
    d_s: float
    a: float
    t_d: str
    fc_prob: float = None
    fc_decision: str = None


def _check_same_scale(*models):
    specs = {m.spec.name for m in models if m is not None}
    if len(specs) > 1:
        raise ValueError(f"models trained at different scales: {sorted(specs)}")


def score(X, gen, dis, inv, masks, cfg: ScoringConfig) -> ScoreBreakdown:
    """Reconstruct X, measure weighted distances, threshold.

    The decision is GO strictly below a_th; A == a_th is NOGO.  `masks` of
    None scores unweighted (identical to all-ones masks).
    """
    _check_same_scale(gen, dis, inv)
    if not (gen.frozen and dis.frozen and inv.frozen):
        raise RuntimeError("scoring requires frozen models")
    X = _batched(X, 4)
    if X.data.shape[2:] != gen.spec.hw:
        raise nn.ShapeError(f"image {X.data.shape} does not match model scale "
                            f"{gen.spec.name} {gen.spec.hw}")
    z = inv(X)
    xp = gen(z)
    diff = X - xp
    if masks is not None:
        diff = diff * Tensor(np.asarray(masks.w_r, dtype=np.float32))
    r_s = float(_per_image_norm(diff, cfg.norm).data)
    fdiff = dis.features(X) - dis.features(xp)
    if masks is not None:
        fdiff = fdiff * Tensor(np.asarray(masks.w_d, dtype=np.float32))
    d_s = float(_per_image_norm(fdiff, cfg.norm).data)
    a = (1.0 - cfg.lam) * r_s + cfg.lam * d_s
    return ScoreBreakdown(r_s, d_s, a, GO if a < cfg.a_th else NOGO)


# -- supervised fusion head -------------------------------------------------


class FcHead(nn.Network):
    """Per-branch linear summaries fused by a final linear + sigmoid.

    Branch inputs (flattened): R = |X - X'|, D = |f(X) - f(X')|, F = f(X).
    """

    def __init__(self, branches, scale, rng, name="fc"):
        super().__init__()
        spec = get_scale(scale) if isinstance(scale, str) else scale
        branches = tuple(branches)
        if not branches or any(b not in BRANCHES for b in branches):
            raise ValueError(f"branches must be a nonempty subset of {BRANCHES}, "
                             f"got {branches}")
        if len(set(branches)) != len(branches):
            raise ValueError(f"duplicate branches in {branches}")
        self.spec = spec
        self.branches = branches
        h, w = spec.hw
        f_len = int(np.prod(spec.feature_shape))
        lengths = {"R": 3 * h * w, "D": f_len, "F": f_len}
        self.branch_layers = {}
        for b in branches:
            self.branch_layers[b] = self._add(
                b, nn.Dense(lengths[b], 1, rng, name=f"{name}.{b}"))
        self.final = self._add("final", nn.Dense(len(branches), 1, rng,
                                                 name=f"{name}.final"))

    def forward(self, inputs):
        """`inputs` maps branch name -> [N, len] Tensor; returns [N] probs."""
        scalars = []
        for b in self.branches:
            if b not in inputs or inputs[b] is None:
                raise ValueError(f"branch {b} is active but its input is missing")
            scalars.append(self.branch_layers[b](inputs[b]))
        cat = scalars[0] if len(scalars) == 1 else ad.concat(scalars, axis=1)
        out = ad.sigmoid(self.final(cat))
        return ad.reshape(out, (out.shape[0],))


def build_fc_head(branches, scale, seed=0) -> FcHead:
    return FcHead(branches, scale, np.random.default_rng(seed))


def _flat(t):
    return ad.reshape(t, (t.shape[0], -1))


def branch_inputs(branches, X, gen, dis, inv):
    """Flattened branch tensors for a batch; skips models a branch set
    does not need (an F-only head never runs Gen or the inverse)."""
    X = _batched(X, 4)
    out = {}
    fx = dis.features(X) if ("D" in branches or "F" in branches) else None
    if "F" in branches:
        out["F"] = _flat(fx)
    if "R" in branches or "D" in branches:
        xp = gen(inv(X))
        if "R" in branches:
            out["R"] = _flat(ad.absolute(X - xp))
        if "D" in branches:
            out["D"] = _flat(ad.absolute(fx - dis.features(xp)))
    return out


def fc_forward(head: FcHead, X, X_prime, fX, fX_prime):
    """Probability of GO from precomputed pipeline tensors.

    Only the tensors the head's branches need may be supplied; the rest can
    be None.
    """
    inputs = {}
    if "R" in head.branches:
        if X is None or X_prime is None:
            raise ValueError("branch R needs X and X'")
        inputs["R"] = _flat(ad.absolute(_batched(X, 4) - _batched(X_prime, 4)))
    if "D" in head.branches:
        if fX is None or fX_prime is None:
            raise ValueError("branch D needs f(X) and f(X')")
        inputs["D"] = _flat(ad.absolute(_batched(fX, 4) - _batched(fX_prime, 4)))
    if "F" in head.branches:
        if fX is None:
            raise ValueError("branch F needs f(X)")
        inputs["F"] = _flat(_batched(fX, 4))
    return head.forward(inputs)


@dataclass
class FcTrainConfig:
    epochs: int = 200
    patience: int = 10
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.patience < 1:
            raise ValueError("epochs and patience must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")


def _bce(probs, targets):
    p = ad.clamp_max(ad.clamp_min(probs, 1e-7), 1.0 - 1e-7)
    t = Tensor(targets)
    one = Tensor(np.float32(1.0))
    return ad.tmean(Tensor(np.float32(0.0))
                    - (t * ad.log(p) + (one - t) * ad.log(one - p)))


def train_fc(branches, labeled_train, models, masks, cfg: FcTrainConfig = None):
    """Fit the fusion head on the small labeled split; early stopping on a
    held-back validation slice.  Upstream models stay untouched (their
    outputs are precomputed once as constants).

    `models` is (gen, dis, inv), all frozen.  Returns the frozen head.
    """
    cfg = cfg or FcTrainConfig()
    gen, dis, inv = models
    labels = {fr.label for fr in labeled_train}
    if labels - {"positive", "negative"}:
        raise ValueError(f"unexpected labels in training set: {sorted(labels)}")
    if len(labels) < 2:
        raise ValueError(f"need both classes to train, got only {sorted(labels)}")

    head = build_fc_head(branches, gen.spec if gen is not None else dis.spec,
                         seed=cfg.seed)
    xs, ys = _precompute_branch_data(head.branches, labeled_train, gen, dis, inv)

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(ys))
    n_val = max(1, int(len(ys) * cfg.val_fraction))
    val_idx, tr_idx = order[:n_val], order[n_val:]
    if len({int(v) for v in ys[tr_idx]}) < 2 or len({int(v) for v in ys[val_idx]}) < 2:
        # tiny or skewed sets: fall back to a stratified split
        pos = np.nonzero(ys == 1)[0]
        neg = np.nonzero(ys == 0)[0]
        rng.shuffle(pos)
        rng.shuffle(neg)
        vp, vn = max(1, len(pos) // 5), max(1, len(neg) // 5)
        val_idx = np.concatenate([pos[:vp], neg[:vn]])
        tr_idx = np.concatenate([pos[vp:], neg[vn:]])

    opt = AdamState(head.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    tr_in = {b: Tensor(xs[b][tr_idx]) for b in head.branches}
    val_in = {b: Tensor(xs[b][val_idx]) for b in head.branches}
    tr_y = ys[tr_idx].astype(np.float32)
    val_y = ys[val_idx].astype(np.float32)

    best_val, since_best = np.inf, 0
    best_state = {k: v.copy() for k, v in head.state().items()}
    history = []
    for epoch in range(cfg.epochs):
        loss = _bce(head.forward(tr_in), tr_y)
        head.zero_grad()
        loss.backward()
        adam_step(head.parameters(), [p.grad for p in head.parameters()], opt)
        val_loss = float(_bce(head.forward(val_in), val_y).data)
        history.append({"epoch": epoch, "loss": float(loss.data), "val": val_loss})
        if val_loss < best_val - 1e-6:
            best_val, since_best = val_loss, 0
            best_state = {k: v.copy() for k, v in head.state().items()}
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    head.load_state(best_state)
    head.freeze()
    head.history = history
    return head


def _precompute_branch_data(branches, frames, gen, dis, inv, batch=64):
    xs = {b: [] for b in branches}
    ys = np.array([1 if fr.label == "positive" else 0 for fr in frames], dtype=np.int64)
    images = np.stack([fr.image for fr in frames]).astype(np.float32)
    for start in range(0, len(images), batch):
        chunk = Tensor(images[start:start + batch])
        got = branch_inputs(branches, chunk, gen, dis, inv)
        for b in branches:
            xs[b].append(got[b].data)
    return {b: np.concatenate(xs[b]) for b in branches}, ys


def classify_fc(head: FcHead, X, models, masks=None):
    """(prob, decision) for one image or (probs, decisions) for a batch.

    GO at prob >= 0.5 (boundary inclusive).
    """
    if not head.frozen:
        raise RuntimeError("classification requires a frozen head")
    gen, dis, inv = models
    single = np.asarray(X.data if isinstance(X, Tensor) else X).ndim == 3
    inputs = branch_inputs(head.branches, X, gen, dis, inv)
    probs = head.forward(inputs).data
    decisions = [GO if p >= 0.5 else NOGO for p in probs]
    if single:
        return float(probs[0]), decisions[0]
    return probs, decisions


# -- introspection ----------------------------------------------------------


def saliency_map(head: FcHead, models, X):
    """|d prob / d X| reduced by max over channels -> [H, W] float32."""
    gen, dis, inv = models
    x = Tensor(np.asarray(X.data if isinstance(X, Tensor) else X,
                          dtype=np.float32).copy(), requires_grad=True, name="x")
    if not (x.data.ndim == 3 or (x.data.ndim == 4 and x.data.shape[0] == 1)):
        raise ValueError(f"saliency expects a single image, got {x.data.shape}")
    prob = ad.tsum(head.forward(branch_inputs(head.branches, x, gen, dis, inv)))
    head.zero_grad()
    prob.backward()
    if x.grad is None:
        shape = x.data.shape[-2:]
        return np.zeros(shape, dtype=np.float32)
    g = x.grad.reshape(x.data.shape)
    g = g[0] if g.ndim == 4 else g
    return np.abs(g).max(axis=0).astype(np.float32)


def mean_saliency(head: FcHead, models, frames):
    """Average saliency map over a list of frames."""
    if not frames:
        raise ValueError("no frames given")
    acc = None
    for fr in frames:
        m = saliency_map(head, models, fr.image if hasattr(fr, "image") else fr)
        acc = m if acc is None else acc + m
    return acc / len(frames)


def export_residual_weights(head: FcHead, path):
    """Write branch-R weights as a PGM heat image; returns the [H,W] floats."""
    from .imageio import write_pgm

    if "R" not in head.branches:
        raise ValueError("head has no R branch")
    h, w = head.spec.hw
    weights = head.branch_layers["R"].w.data.reshape(3, h, w)
    img = np.abs(weights).max(axis=0)
    lo, hi = float(img.min()), float(img.max())
    if hi - lo < 1e-12:
        norm = np.full((h, w), 0.5, dtype=np.float32)
    else:
        norm = (img - lo) / (hi - lo)
    write_pgm(path, np.clip(np.rint(norm * 255.0), 0, 255).astype(np.uint8))
    return norm
