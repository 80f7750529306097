"""Evaluation harness: confusion metrics, component ablations, threshold
calibration, rank AUC, and throughput/memory benchmarking.

Positive class is GO throughout.  Undefined metrics (empty denominator) are
returned as None, never silently coerced to 0.  Throughput is measured on
in-memory images; file I/O is deliberately outside the timed region and the
report header says so.
"""

import time
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .inversion import InversionConfig, invert_iterative
from .scoring import (
    GO,
    FcTrainConfig,
    build_weight_masks,
    classify_fc,
    score,
    train_fc,
)

MODES = ("unsupervised-baseline", "unsupervised-ours", "supervised-ours")
COMPONENT_ORDER = ("R", "D", "F")


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 0:
                raise ValueError(f"{name} must be a nonnegative integer, got {v!r}")

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def count_decisions(decisions, truths) -> ConfusionCounts:
    """Tally GO/NOGO decisions against positive/negative ground truth."""
    if len(decisions) != len(truths):
        raise ValueError(f"{len(decisions)} decisions vs {len(truths)} truths")
    tp = fp = fn = tn = 0
    for d, t in zip(decisions, truths):
        if t not in ("positive", "negative"):
            raise ValueError(f"unexpected truth label {t!r}")
        if d == GO:
            tp, fp = tp + (t == "positive"), fp + (t == "negative")
        else:
            fn, tn = fn + (t == "positive"), tn + (t == "negative")
    return ConfusionCounts(tp, fp, fn, tn)


def f1_from_rates(recall, precision):
    """Harmonic mean; unit-agnostic (fractions and percentages both work)."""
    return 2.0 * recall * precision / (recall + precision)


def metrics(counts: ConfusionCounts):
    """accuracy/recall/precision/f1 as fractions; None where undefined."""
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    total = counts.total
    accuracy = (tp + tn) / total if total else None
    recall = tp / (tp + fn) if tp + fn else None
    precision = tp / (tp + fp) if tp + fp else None
    if recall is None or precision is None or recall + precision == 0:
        f1 = None
    else:
        f1 = f1_from_rates(recall, precision)
    return {"accuracy": accuracy, "recall": recall, "precision": precision, "f1": f1}


@dataclass
class AblationSpec:
    """One report row: which scoring components, which inversion route.

    Baseline mode is pinned to iterative inversion without masks and
    ours-unsupervised to feed-forward inversion with masks; passing a
    conflicting explicit choice is an error rather than a silent override.
    """

    mode: str
    components: tuple
    inversion: str = None
    masks: str = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        comps = tuple(self.components)
        if not comps or any(c not in COMPONENT_ORDER for c in comps):
            raise ValueError(f"components must be a nonempty subset of "
                             f"{COMPONENT_ORDER}, got {comps}")
        if len(set(comps)) != len(comps):
            raise ValueError(f"duplicate components in {comps}")
        self.components = tuple(c for c in COMPONENT_ORDER if c in comps)
        if self.mode != "supervised-ours" and "F" in self.components:
            raise ValueError("component F is defined only for the supervised head")
        forced = {"unsupervised-baseline": ("iterative", "off"),
                  "unsupervised-ours": ("feedforward", "on")}.get(self.mode)
        if forced:
            if self.inversion not in (None, forced[0]):
                raise ValueError(f"{self.mode} forces {forced[0]} inversion")
            if self.masks not in (None, forced[1]):
                raise ValueError(f"{self.mode} forces masks {forced[1]}")
            self.inversion, self.masks = forced
        else:
            self.inversion = self.inversion or "feedforward"
            self.masks = self.masks or "on"
        if self.inversion not in ("iterative", "feedforward"):
            raise ValueError(f"unknown inversion route {self.inversion!r}")
        if self.masks not in ("on", "off"):
            raise ValueError(f"masks must be 'on' or 'off', got {self.masks!r}")


class _IterativeInverter:
    """Adapter giving the 500-step baseline the feed-forward call shape.

    Each image in a batch is inverted independently; per-call seeds advance
    deterministically so a fresh adapter reproduces the same z sequence.
    """

    def __init__(self, gen, dis, cfg: InversionConfig, seed=0):
        self.spec = gen.spec
        self.frozen = True
        self._gen, self._dis, self._cfg = gen, dis, cfg
        self._seed = seed
        self._calls = 0

    def __call__(self, X):
        rows = []
        for i in range(X.data.shape[0]):
            z, _ = invert_iterative(X.data[i], self._gen, self._dis, self._cfg,
                                    seed=self._seed + self._calls)
            self._calls += 1
            rows.append(z)
        return ad.Tensor(np.stack(rows))


def _effective_lambda(components, scoring_cfg):
    if components == ("R",):
        return 0.0
    if components == ("D",):
        return 1.0
    return scoring_cfg.lam


def run_ablation(spec: AblationSpec, datasets, models, scoring_cfg,
                 fc_cfg: FcTrainConfig = None, inv_cfg: InversionConfig = None,
                 bench_images=2, repetitions=3):
    """Evaluate one ablation row on datasets["test"] (LabeledFrame lists).

    Unsupervised rows threshold A built from the selected components; the
    supervised row trains the fusion head on datasets["train"] with exactly
    those branches.  repetitions=0 skips the Hz/memory measurement so the
    returned row is fully deterministic.
    """
    gen, dis, inv = models
    test = list(datasets["test"])
    if not test:
        raise ValueError("empty test set")
    truths = [fr.label for fr in test]

    scores = None
    if spec.mode == "supervised-ours":
        head = train_fc(spec.components, list(datasets["train"]), models, None,
                        fc_cfg or FcTrainConfig())
        decisions, probs = [], []
        for start in range(0, len(test), 64):
            chunk = np.stack([fr.image for fr in test[start:start + 64]])
            ps, ds = classify_fc(head, chunk, models)
            decisions.extend(ds)
            probs.extend(float(p) for p in ps)
        scores = probs
        pipeline = lambda img: classify_fc(head, img, models)
    else:
        eff = replace(scoring_cfg, lam=_effective_lambda(spec.components, scoring_cfg))
        masks = build_weight_masks(eff, gen.spec) if spec.masks == "on" else None
        if spec.inversion == "iterative":
            inverter = _IterativeInverter(gen, dis, inv_cfg or InversionConfig(),
                                          seed=getattr(inv_cfg, "seed", 0))
        else:
            inverter = inv
        breakdowns = [score(fr.image, gen, dis, inverter, masks, eff) for fr in test]
        decisions = [b.t_d for b in breakdowns]
        scores = [float(b.a) for b in breakdowns]
        pipeline = lambda img: score(img, gen, dis, inverter, masks, eff)

    counts = count_decisions(decisions, truths)
    row = {
        "mode": spec.mode,
        "components": "+".join(spec.components),
        "inversion": spec.inversion,
        "masks": spec.masks,
        "n_test": len(test),
        "counts": {"tp": counts.tp, "fp": counts.fp, "fn": counts.fn, "tn": counts.tn},
        "decisions": list(decisions),
        "scores": scores,    # A values (unsupervised) or GO probabilities (supervised)
        "perf": None,
    }
    row.update(metrics(counts))
    if repetitions:
        imgs = [fr.image for fr in test[:max(1, bench_images)]]
        row["perf"] = benchmark(pipeline, imgs, repetitions)
    return row


def calibrate_threshold(scored):
    """a_th maximizing F1 over the observed score values (GO iff A < a_th).

    Candidate thresholds are exactly the sorted unique scores; ties take the
    smaller threshold.  Inside the sweep a threshold that predicts no GO at
    all counts as F1 = 0 (the sweep needs a total order; metrics() keeps the
    explicit None flags for reporting).
    """
    pairs = [(float(a), lab) for a, lab in scored]
    labels = {lab for _, lab in pairs}
    if labels - {"positive", "negative"}:
        raise ValueError(f"unexpected labels: {sorted(labels)}")
    if len(labels) < 2:
        raise ValueError(f"calibration needs both classes, got only {sorted(labels)}")
    n_pos = sum(1 for _, lab in pairs if lab == "positive")
    best_th, best_f1 = None, -1.0
    for th in sorted({a for a, _ in pairs}):
        tp = sum(1 for a, lab in pairs if a < th and lab == "positive")
        fp = sum(1 for a, lab in pairs if a < th and lab == "negative")
        fn = n_pos - tp
        f1 = 2.0 * tp / (2.0 * tp + fp + fn)
        if f1 > best_f1:
            best_th, best_f1 = th, f1
    return best_th


def separation_auc(positive_scores, negative_scores):
    """P(random negative scores above random positive), ties counted half.

    1.0 means positives sit strictly below negatives on the A axis.
    """
    pos = np.asarray(positive_scores, dtype=np.float64)
    neg = np.asarray(negative_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both score sets must be nonempty")
    from scipy.stats import rankdata

    ranks = rankdata(np.concatenate([pos, neg]))
    neg_rank_sum = ranks[pos.size:].sum()
    return float((neg_rank_sum - neg.size * (neg.size + 1) / 2.0)
                 / (pos.size * neg.size))


def benchmark(pipeline, images, repetitions=5):
    """Median wall-clock Hz plus the engine allocator's high-water mark.

    One untimed warm-up call precedes measurement.  Images must already be
    in memory; loading them is the caller's problem by design.
    """
    if repetitions < 3:
        raise ValueError(f"repetitions must be >= 3, got {repetitions}")
    images = list(images)
    if not images:
        raise ValueError("no images to benchmark")
    pipeline(images[0])
    ad.memory.reset_peak()
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        for img in images:
            pipeline(img)
        times.append(time.perf_counter() - t0)
    return {"hz": len(images) / float(np.median(times)),
            "peak_mem_bytes": int(ad.memory.peak)}


def format_report(rows) -> str:
    """Fixed-width text table over ablation rows (percent units)."""
    header = ["method", "comp", "inv", "masks", "acc%", "rec%", "prec%", "f1%",
              "Hz", "mem MB"]
    table = [header]
    for r in rows:
        pct = lambda v: "n/a" if v is None else f"{100.0 * v:.2f}"
        perf = r.get("perf") or {}
        table.append([
            r["mode"], r["components"], r["inversion"], r["masks"],
            pct(r["accuracy"]), pct(r["recall"]), pct(r["precision"]), pct(r["f1"]),
            "n/a" if not perf else f"{perf['hz']:.3f}",
            "n/a" if not perf else f"{perf['peak_mem_bytes'] / 1e6:.1f}",
        ])
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    lines = ["Hz measured on in-memory images; file I/O excluded."]
    for row in table:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)))
    return "\n".join(lines)
