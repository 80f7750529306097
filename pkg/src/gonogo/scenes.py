"""Procedural desk-scale scenes, simulated runs, and window auto-labeling.

The synthetic world is a straight corridor the robot drives down.  Corridor
views have a smooth floor band in front of the robot; blocked views place a
high-contrast artifact (box) or a floor drop-off in the bottom eighth of the
image, so the near-field region genuinely carries the traversability signal.

Labels come from the velocity trace alone: a frame is positive when the whole
window around it was driven fast, negative labels only ever come from the
simulated hand-annotation path.
"""

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

SCENE_KINDS = ("corridor", "obstacle", "edge")
SCALE_HW = ((32, 32), (128, 128))

FAST_SPEED = 0.5          # nominal cruise, m/s (1 step = 1 frame = 1 cell/speed)
SLOW_DISTANCE = 2.0       # decelerate when an obstruction is this close (cells)
BLOCKED_DISTANCE = 2.5    # ground-truth "not traversable from here" distance
VISIBLE_DISTANCE = 3.0    # obstruction appears in the rendered frame


@dataclass
class SceneParams:
    """Inputs for one rendered view; every range is (low, high)."""

    seed: int
    kind: str = "corridor"
    hw: tuple = (32, 32)
    floor_gray: tuple = (0.45, 0.7)
    wall_gray: tuple = (0.18, 0.42)
    artifact_gray: tuple = (0.05, 0.95)
    obstacle_frac: tuple = (0.3, 0.6)
    obstacle_center: tuple = (0.3, 0.7)
    noise: float = 0.02

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}; expected one of {SCENE_KINDS}")
        if tuple(self.hw) not in SCALE_HW:
            raise ValueError(f"image size {self.hw} not in configured scales {SCALE_HW}")
        if not 0.0 <= self.noise <= 0.2:
            raise ValueError(f"noise amplitude {self.noise} outside [0, 0.2]")


@dataclass
class RunTrace:
    """One simulated drive: aligned velocities, frames, poses.

    `blocked[i]` is the synthetic ground truth "an obstruction is within
    reach at index i"; it is what the simulated hand-annotator consults.
    """

    velocities: np.ndarray
    frames: list
    poses: list
    blocked: np.ndarray = None
    trace_id: int = 0

    def __post_init__(self):
        self.velocities = np.asarray(self.velocities, dtype=np.float32)
        if not (len(self.velocities) == len(self.frames) == len(self.poses)):
            raise ValueError("velocities, frames and poses must be the same length")
        if np.any(self.velocities < 0):
            raise ValueError("velocities must be non-negative")
        if self.blocked is None:
            self.blocked = np.zeros(len(self.frames), dtype=bool)


@dataclass
class LabeledFrame:
    image: np.ndarray
    label: str                  # positive | negative | unlabeled
    origin: tuple               # (trace id, frame index)
    flipped: bool = False
    blocked: bool = False       # synthetic ground truth behind simulated hand labels


@dataclass
class LabelingConfig:
    v_th: float = 0.3
    p: int = 5
    f_ahead: int = 3

    def __post_init__(self):
        if self.v_th <= 0:
            raise ValueError("v_th must be positive")
        if self.p < 0 or self.f_ahead < 0:
            raise ValueError("window extents must be non-negative")


def _frame_rng(seed):
    return np.random.default_rng(np.random.SeedSequence(seed))


def _span(rng, lo_hi):
    lo, hi = lo_hi
    return lo + (hi - lo) * rng.random()


def render_scene(params: SceneParams):
    """Render one view; returns (image [3,H,W] float32 in [0,1], traversable)."""
    rng = _frame_rng(params.seed)
    h, w = params.hw
    band = -int(np.ceil(h / 8))  # bottom-eighth rows carry the signal

    horizon = int(h * (0.40 + 0.1 * rng.random()))
    wall_top = _span(rng, params.wall_gray)
    wall_bot = wall_top + 0.08
    floor_near = _span(rng, params.floor_gray)
    floor_far = floor_near - 0.12

    img = np.empty((h, w), dtype=np.float32)
    rows = np.linspace(0.0, 1.0, horizon, dtype=np.float32)[:, None]
    img[:horizon] = wall_top + (wall_bot - wall_top) * rows
    rows = np.linspace(0.0, 1.0, h - horizon, dtype=np.float32)[:, None]
    img[horizon:] = floor_far + (floor_near - floor_far) * rows

    # converging side walls: darken wedges that widen toward the bottom
    cols = np.arange(w, dtype=np.float32)
    depth = np.linspace(0.0, 1.0, h - horizon, dtype=np.float32)
    margin = (0.04 + 0.12 * depth)[:, None] * w
    wedge = (cols[None, :] < margin) | (cols[None, :] >= w - margin)
    img[horizon:][wedge] *= 0.75

    tint = 1.0 + 0.06 * rng.standard_normal(3).astype(np.float32)
    img = img[None, :, :] * tint[:, None, None]

    if params.kind == "obstacle":
        bw = max(2, int(_span(rng, params.obstacle_frac) * w))
        cx = int(_span(rng, params.obstacle_center) * w)
        x0 = int(np.clip(cx - bw // 2, 0, w - bw))
        bh = max(-band + 2, int(0.35 * h))
        y0 = h - bh
        shade_a = _span(rng, params.artifact_gray)
        shade_b = np.clip(shade_a + (0.5 if shade_a < 0.5 else -0.5), 0.0, 1.0)
        cell = max(1, h // 16)
        yy, xx = np.mgrid[y0:h, x0:x0 + bw]
        checker = ((yy // cell + xx // cell) % 2).astype(np.float32)
        img[:, y0:h, x0:x0 + bw] = shade_a + (shade_b - shade_a) * checker[None]
        img[:, y0, x0:x0 + bw] = 0.05  # top rim
    elif params.kind == "edge":
        y0 = h + band - int(rng.integers(0, max(1, -band // 2)))
        void = 0.04 + 0.05 * rng.random()
        speckle = rng.random((h - y0, w)).astype(np.float32)
        img[:, y0:, :] = void + 0.6 * (speckle > 0.92)[None]
        img[:, y0 - 1, :] = 0.95  # bright rim where the floor ends

    img += params.noise * rng.standard_normal(img.shape).astype(np.float32)
    np.clip(img, 0.0, 1.0, out=img)
    return img.astype(np.float32), params.kind == "corridor"


def simulate_run(world_seed, steps, wall_cell="auto", hw=(32, 32)):
    """Drive `steps` frames down a corridor; slow below 0.3 m/s near a wall.

    `wall_cell="auto"` samples the world layout from the seed; pass None for
    an obstruction-free track or an int to pin the wall for tests.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(world_seed), 1]))
    if wall_cell == "auto":
        has_wall = rng.random() < 0.75
        wall_cell = int(rng.integers(5, max(6, int(steps * FAST_SPEED) + 4))) if has_wall else None
    wall_kind = "edge" if rng.random() < 0.35 else "obstacle"

    x = 0.0
    vels, frames, poses, blocked = [], [], [], []
    for i in range(steps):
        dist = np.inf if wall_cell is None else wall_cell - x
        if dist <= SLOW_DISTANCE:
            v = 0.08 + 0.15 * rng.random()
        else:
            v = FAST_SPEED + 0.1 * rng.random()
        kind = wall_kind if dist <= VISIBLE_DISTANCE else "corridor"
        frame_seed = int(np.random.SeedSequence([int(world_seed), 2, i]).generate_state(1)[0])
        img, _ = render_scene(SceneParams(seed=frame_seed, kind=kind, hw=hw))
        vels.append(v)
        frames.append(img)
        poses.append((x, 0.0, 0.0))
        blocked.append(dist <= BLOCKED_DISTANCE)
        x += v
        if wall_cell is not None:
            x = min(x, wall_cell - 0.4)  # the robot never drives through the wall
    return RunTrace(np.array(vels, dtype=np.float32), frames, poses,
                    np.array(blocked), trace_id=int(world_seed))


def auto_label(trace: RunTrace, cfg: LabelingConfig = None):
    """Window labeling over the velocity trace; emits positive or unlabeled.

    Frame i is positive iff every index in [i-p, i+f_ahead] is in bounds and
    strictly faster than v_th.  Indices whose window leaves the trace stay
    unlabeled.
    """
    cfg = cfg or LabelingConfig()
    v = trace.velocities
    n = len(v)
    fast = v > cfg.v_th
    out = []
    for i in range(n):
        lo, hi = i - cfg.p, i + cfg.f_ahead
        ok = lo >= 0 and hi < n and bool(fast[lo:hi + 1].all())
        out.append(LabeledFrame(trace.frames[i], "positive" if ok else "unlabeled",
                                (trace.trace_id, i), blocked=bool(trace.blocked[i])))
    return out


def augment_flip(dataset):
    """Mirror every frame left-right; returns originals + flipped copies."""
    out = list(dataset)
    for fr in dataset:
        out.append(dataclasses.replace(fr, image=np.ascontiguousarray(fr.image[:, :, ::-1]),
                                       flipped=not fr.flipped))
    return out


@dataclass
class Corpus:
    frames: list = field(default_factory=list)

    def positives(self):
        return [f for f in self.frames if f.label == "positive"]

    def gt_negatives(self):
        return [f for f in self.frames if f.blocked]

    def counts(self):
        return {
            "total": len(self.frames),
            "positive": len(self.positives()),
            "gt_negative": len(self.gt_negatives()),
        }


def build_corpus(n_traces, steps, seed=0, hw=(32, 32), cfg: LabelingConfig = None,
                 flip=True):
    """Simulate traces, auto-label them, and pool the frames.

    Flip augmentation doubles the positive pool only; blocked frames stay
    unflipped so the ground-truth negative pool keeps its natural size.
    """
    cfg = cfg or LabelingConfig()
    ss = np.random.SeedSequence(seed)
    corpus = Corpus()
    for t, child in enumerate(ss.spawn(n_traces)):
        world_seed = int(child.generate_state(1)[0])
        trace = simulate_run(world_seed, steps, hw=hw)
        trace.trace_id = t
        labeled = auto_label(trace, cfg)
        if flip:
            pos = [f for f in labeled if f.label == "positive"]
            labeled.extend(dataclasses.replace(
                f, image=np.ascontiguousarray(f.image[:, :, ::-1]), flipped=True)
                for f in pos)
        corpus.frames.extend(labeled)
    return corpus


LABEL_BUDGET = 0.01           # hand labels stay under 1% of the GAN positives
FULL_CORPUS_POSITIVES = 40000  # budget is only meaningful at full corpus size


def build_annotated_split(corpus: Corpus, n_pos=400, n_neg=400, seed=0):
    """Sample simulated hand labels: (train, test), each n_pos + n_neg frames.

    Positives come from the auto-labeled pool, negatives from ground-truth
    blocked frames (the stand-in for an annotator).  Train and test are
    disjoint.  At full corpus size the labeled train set must stay within
    the 1% budget of the positive pool.
    """
    pos_pool = corpus.positives()
    neg_pool = [f for f in corpus.gt_negatives() if f.label != "positive"]
    if len(pos_pool) < 2 * n_pos or len(neg_pool) < 2 * n_neg:
        raise ValueError(
            f"corpus too small: need {2 * n_pos} positives and {2 * n_neg} negatives, "
            f"have {len(pos_pool)} and {len(neg_pool)}")
    if len(pos_pool) >= FULL_CORPUS_POSITIVES and n_pos > LABEL_BUDGET * len(pos_pool):
        raise ValueError(
            f"labeled train positives {n_pos} exceed {LABEL_BUDGET:.0%} of the "
            f"{len(pos_pool)}-frame positive pool")

    rng = np.random.default_rng(seed)
    pos_idx = rng.choice(len(pos_pool), size=2 * n_pos, replace=False)
    neg_idx = rng.choice(len(neg_pool), size=2 * n_neg, replace=False)

    def take(pool, idx, label):
        return [dataclasses.replace(pool[i], label=label) for i in idx]

    train = take(pos_pool, pos_idx[:n_pos], "positive") + take(neg_pool, neg_idx[:n_neg], "negative")
    test = take(pos_pool, pos_idx[n_pos:], "positive") + take(neg_pool, neg_idx[n_neg:], "negative")
    return train, test


def load_dataset(in_dir):
    """Read an exported directory back into frames.

    Images come back uint8-quantized (the PPM grid), which is what any
    consumer of the on-disk dataset sees.  Negative labels mark the frame
    blocked; the manifest does not carry the original velocity trace.
    """
    from .imageio import read_ppm

    manifest = os.path.join(in_dir, "manifest.jsonl")
    frames = []
    with open(manifest) as fh:
        for line in fh:
            rec = json.loads(line)
            frames.append(LabeledFrame(
                read_ppm(os.path.join(in_dir, rec["path"])), rec["label"],
                (rec["trace_id"], rec["index"]), flipped=rec["flipped"],
                blocked=rec["label"] == "negative"))
    return frames


def export_dataset(frames, out_dir):
    """Write frames as binary PPM plus a JSON-lines manifest; returns its path."""
    from .imageio import write_ppm

    os.makedirs(out_dir, exist_ok=True)
    manifest = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest, "w") as fh:
        for k, fr in enumerate(frames):
            name = f"frame_{k:06d}.ppm"
            write_ppm(os.path.join(out_dir, name), fr.image)
            rec = {"path": name, "label": fr.label, "trace_id": int(fr.origin[0]),
                   "index": int(fr.origin[1]), "flipped": bool(fr.flipped)}
            fh.write(json.dumps(rec) + "\n")
    return manifest
