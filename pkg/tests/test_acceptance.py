"""Release gates for the whole pipeline.

The cheap structural gates (gradient correctness, labeling oracle, metric
arithmetic, planner optimality) run on small fresh models.  The expensive
gates share one module-scoped fixture that trains the desk-scale GAN and the
inverse generator on a couple thousand synthetic positives and scores the
held-out split.  Wall-clock budgets are part of the contract and asserted.
"""

import dataclasses
import hashlib
import heapq
import math
import time

import numpy as np
import pytest

from gonogo import autodiff as ad
from gonogo import cli, nn
from gonogo.autodiff import Tensor
from gonogo.checkpoint import load_checkpoint, save_checkpoint
from gonogo.costmap import (
    Costmap,
    MissionConfig,
    MissionWorld,
    PlanRequest,
    drive_simulated_mission,
    path_cost,
    plan,
)
from gonogo.evalkit import (
    AblationSpec,
    ConfusionCounts,
    benchmark,
    calibrate_threshold,
    f1_from_rates,
    metrics,
    run_ablation,
    separation_auc,
)
from gonogo.gan import GanConfig, build_discriminator, build_generator, train_gan
from gonogo.gradcheck import check_gradients, check_scalar_fn
from gonogo.inversion import (
    InversionConfig,
    build_inverse_generator,
    combined_loss,
    invert_feedforward,
    invert_iterative,
    train_inverse_generator,
)
from gonogo.scenes import LabelingConfig, RunTrace, auto_label, build_annotated_split, build_corpus
from gonogo.scoring import (
    FcTrainConfig,
    ScoringConfig,
    WeightMasks,
    branch_inputs,
    build_weight_masks,
    mean_saliency,
    score,
    train_fc,
)

# training recipe shared by the expensive gates
CORPUS_TRACES, CORPUS_STEPS, CORPUS_SEED = 200, 40, 11
SPLIT_SEED, POOL_CAP = 5, 2400
GAN_SEED, INV_SEED, FC_SEED = 1, 2, 3
TRAIN_BUDGET_S = 30 * 60


# -- gradient correctness ----------------------------------------------------


class _Probe(nn.Network):
    """One layer plus an optional activation, shaped for check_gradients."""

    def __init__(self, layer, act=None):
        super().__init__()
        self.layer = self._add("layer", layer)
        self.act = act

    def forward(self, x):
        if isinstance(self.layer, nn.BatchNorm):
            h = self.layer(x, training=True)
        else:
            h = self.layer(x)
        return self.act(h) if self.act else h


def test_gradient_checks_cover_every_layer_type_and_the_composite_loss():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    f32 = lambda *s: rng.normal(0.0, 1.0, s).astype(np.float32)

    cases = [
        ("fc", _Probe(nn.Dense(6, 4, rng)), f32(3, 6)),
        ("conv", _Probe(nn.Conv2d(2, 4, 4, 2, 1, rng)), f32(2, 2, 8, 8)),
        ("deconv", _Probe(nn.ConvTranspose2d(2, 3, 4, 2, 1, rng)), f32(2, 2, 4, 4)),
        ("batch-norm", _Probe(nn.BatchNorm(3, rng)), f32(4, 3, 5, 5)),
        ("relu", _Probe(nn.Dense(5, 4, rng), act=ad.relu), f32(3, 5)),
        ("elu", _Probe(nn.Dense(5, 4, rng), act=ad.elu), f32(3, 5)),
        ("sigmoid", _Probe(nn.Dense(5, 4, rng), act=ad.sigmoid), f32(3, 5)),
        ("softmax", _Probe(nn.Dense(5, 4, rng), act=ad.softmax), f32(3, 5)),
    ]
    for label, model, x in cases:
        report = check_gradients(model, x, tolerance=1e-3, n_coords=10)
        assert report["passed"], (label, report)

    # full image -> latent -> image -> feature chain, gradient taken through
    # every network at once
    gan_cfg = GanConfig(scale="desk", seed=0)
    gen = build_generator(gan_cfg, seed=0)
    dis = build_discriminator(gan_cfg, seed=1)
    inv = build_inverse_generator("desk", seed=2)
    x_batch = f32(4, 3, 32, 32)
    z_batch = f32(4, gan_cfg.z_dim)
    for _ in range(2):                    # charge batch-norm running stats
        gen(Tensor(z_batch))
        dis(Tensor(x_batch))
        inv(Tensor(x_batch))
    gen.eval()
    dis.eval()
    inv.eval()

    x_one = Tensor(f32(1, 3, 32, 32))
    inv_cfg = InversionConfig()

    def loss():
        return ad.tsum(combined_loss(x_one, inv(x_one), gen, dis, inv_cfg))

    probes = [inv.parameters()[0], gen.parameters()[0], dis.parameters()[0]]
    for param in probes:
        report = check_scalar_fn(loss, param, tolerance=1e-3, n_coords=4)
        assert report["passed"], (param.name, report)

    assert time.perf_counter() - t0 < 120.0


# -- trained-pipeline fixture ------------------------------------------------


@pytest.fixture(scope="module")
def trained():
    t0 = time.perf_counter()
    corpus = build_corpus(CORPUS_TRACES, CORPUS_STEPS, seed=CORPUS_SEED)
    train_l, test_l = build_annotated_split(corpus, 400, 400, seed=SPLIT_SEED)
    test_keys = {(f.origin, f.flipped) for f in test_l}
    pool = [f for f in corpus.positives()
            if (f.origin, f.flipped) not in test_keys][:POOL_CAP]
    assert len(pool) >= 2000

    gen, dis, history = train_gan(
        pool, GanConfig(scale="desk", seed=GAN_SEED, label_smoothing=True))
    inv = train_inverse_generator(pool, gen, dis, InversionConfig(seed=INV_SEED))

    base_cfg = ScoringConfig()
    masks = build_weight_masks(base_cfg, "desk")
    train_scored = [(score(f.image, gen, dis, inv, masks, base_cfg).a, f.label)
                    for f in train_l]
    cfg = dataclasses.replace(base_cfg, a_th=calibrate_threshold(train_scored))
    breakdowns = [(f, score(f.image, gen, dis, inv, masks, cfg)) for f in test_l]
    train_time = time.perf_counter() - t0

    return {
        "gen": gen, "dis": dis, "inv": inv, "models": (gen, dis, inv),
        "masks": masks, "cfg": cfg, "history": history,
        "train": train_l, "test": test_l, "pool_size": len(pool),
        "breakdowns": breakdowns, "train_time": train_time,
    }


def test_anomaly_score_separates_heldout_positives_from_negatives(trained):
    pos = [bd.a for f, bd in trained["breakdowns"] if f.label == "positive"]
    neg = [bd.a for f, bd in trained["breakdowns"] if f.label == "negative"]
    assert len(pos) == 400 and len(neg) == 400
    mean_pos, mean_neg = float(np.mean(pos)), float(np.mean(neg))
    margin = (mean_neg - mean_pos) / mean_pos
    auc = separation_auc(pos, neg)
    assert margin >= 0.20, (mean_pos, mean_neg, margin)
    assert auc >= 0.80, auc
    assert trained["train_time"] < TRAIN_BUDGET_S


def test_supervised_fusion_beats_unsupervised_and_all_single_branches(trained):
    train_l = trained["train"]
    assert len(train_l) == 800
    assert sum(f.label == "positive" for f in train_l) == 400
    assert sum(f.label == "negative" for f in train_l) == 400

    datasets = {"train": train_l, "test": trained["test"]}
    fc_cfg = FcTrainConfig(seed=FC_SEED)

    def accuracy(spec):
        row = run_ablation(spec, datasets, trained["models"], trained["cfg"],
                           fc_cfg=fc_cfg, repetitions=0)
        return row["accuracy"]

    unsup = accuracy(AblationSpec("unsupervised-ours", ("R", "D")))
    fused = accuracy(AblationSpec("supervised-ours", ("R", "D", "F")))
    singles = {b: accuracy(AblationSpec("supervised-ours", (b,)))
               for b in ("R", "D", "F")}

    assert fused >= unsup, (fused, unsup)
    for branch, acc in singles.items():
        assert fused >= acc - 0.02, (branch, fused, acc)


def test_feedforward_inversion_is_at_least_fifty_times_faster(trained):
    gen, dis, inv = trained["models"]
    images = [f.image for f in trained["test"] if f.label == "positive"][:2]
    it_cfg = InversionConfig(iterations=500)

    calls = {"n": 0}

    def iterative(img):
        z, _ = invert_iterative(img, gen, dis, it_cfg, seed=calls["n"])
        calls["n"] += 1
        return z

    ff = benchmark(lambda img: invert_feedforward(img, inv), images, repetitions=5)
    it = benchmark(iterative, images, repetitions=5)
    speedup = ff["hz"] / it["hz"]
    assert speedup >= 50.0, (ff["hz"], it["hz"], speedup)


def test_score_mixing_identities_hold_on_every_scored_image(trained):
    gen, dis, inv = trained["models"]
    cfg, masks = trained["cfg"], trained["masks"]
    lam = cfg.lam
    for f, bd in trained["breakdowns"]:
        assert abs(bd.a - ((1.0 - lam) * bd.r_s + lam * bd.d_s)) <= 1e-6

    sample = [f.image for f, _ in trained["breakdowns"][::160]][:5]
    for img in sample:
        r_only = score(img, gen, dis, inv, masks, dataclasses.replace(cfg, lam=0.0))
        assert r_only.a == r_only.r_s
        d_only = score(img, gen, dis, inv, masks, dataclasses.replace(cfg, lam=1.0))
        assert d_only.a == d_only.d_s

        ones = WeightMasks(np.ones_like(masks.w_r), np.ones_like(masks.w_d))
        with_ones = score(img, gen, dis, inv, ones, cfg)
        plain = score(img, gen, dis, inv, None, cfg)
        assert with_ones.r_s == plain.r_s
        assert with_ones.d_s == plain.d_s
        assert with_ones.a == plain.a

        # the decision boundary itself is NOGO
        at_boundary = score(img, gen, dis, inv, masks,
                            dataclasses.replace(cfg, a_th=plain.a))
        assert at_boundary.t_d == "NOGO"


# -- velocity-window labeling ------------------------------------------------


def _window_positives(velocities, v_th, p, f_ahead):
    """Brute-force scan: definition restated independently of the module."""
    n = len(velocities)
    out = set()
    for i in range(n):
        lo, hi = i - p, i + f_ahead
        if lo < 0 or hi >= n:
            continue
        if all(velocities[x] > v_th for x in range(lo, hi + 1)):
            out.add(i)
    return out


def _trace(velocities, trace_id=0):
    n = len(velocities)
    frame = np.zeros((3, 2, 2), dtype=np.float32)
    return RunTrace(np.asarray(velocities, dtype=np.float32), [frame] * n,
                    [(0.0, 0.0, 0.0)] * n, trace_id=trace_id)


def test_labeling_matches_bruteforce_window_scan_on_1000_random_traces():
    cfg = LabelingConfig(v_th=0.3, p=5, f_ahead=3)
    rng = np.random.default_rng(17)
    for k in range(1000):
        n = int(rng.integers(1, 61))
        v = rng.uniform(0.0, 0.6, n)
        got = auto_label(_trace(v, trace_id=k), cfg)
        assert all(fr.label in ("positive", "unlabeled") for fr in got)
        labeled = {fr.origin[1] for fr in got if fr.label == "positive"}
        assert labeled == _window_positives(v, 0.3, 5, 3), (k, v)


def test_labeling_worked_examples():
    cfg = LabelingConfig(v_th=0.3, p=5, f_ahead=3)
    steady = [0.5] * 10
    got = {fr.origin[1] for fr in auto_label(_trace(steady), cfg)
           if fr.label == "positive"}
    assert got == {5, 6}

    dipped = list(steady)
    dipped[6] = 0.1
    got = {fr.origin[1] for fr in auto_label(_trace(dipped), cfg)
           if fr.label == "positive"}
    assert got == set()

    degenerate = LabelingConfig(v_th=0.3, p=0, f_ahead=0)
    got = {fr.origin[1] for fr in auto_label(_trace(steady), degenerate)
           if fr.label == "positive"}
    assert got == set(range(10))


# -- metric arithmetic -------------------------------------------------------


@pytest.mark.parametrize("recall,precision,f1", [
    (95.75, 92.96, 94.33),
    (96.50, 90.19, 93.24),
    (95.50, 89.67, 92.49),
])
def test_f1_reproduces_reference_rate_pairs(recall, precision, f1):
    assert f1_from_rates(recall, precision) == pytest.approx(f1, abs=0.01)
    # independent restatement of the harmonic mean
    assert f1_from_rates(recall, precision) == pytest.approx(
        2.0 / (1.0 / recall + 1.0 / precision), abs=1e-9)


def test_metrics_f1_agrees_with_rate_form_on_integer_counts():
    counts = ConfusionCounts(383, 29, 17, 371)
    m = metrics(counts)
    assert m["recall"] == pytest.approx(0.9575)
    assert 100.0 * m["f1"] == pytest.approx(
        f1_from_rates(100.0 * m["recall"], 100.0 * m["precision"]), abs=1e-9)


# -- planner -----------------------------------------------------------------


def _dijkstra(cells, start, goal, cutoff, weight):
    """Independent shortest-path cost on the 8-connected grid; None if cut off."""
    h, w = cells.shape
    blocked = cells >= cutoff
    if blocked[start[1], start[0]] or blocked[goal[1], goal[0]]:
        return None
    dist = {start: 0.0}
    pq = [(0.0, start)]
    done = set()
    while pq:
        d, node = heapq.heappop(pq)
        if node in done:
            continue
        done.add(node)
        if node == goal:
            return d
        x, y = node
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                if (dx, dy) == (0, 0):
                    continue
                nx, ny = x + dx, y + dy
                if not (0 <= nx < w and 0 <= ny < h) or blocked[ny, nx]:
                    continue
                nd = d + math.hypot(dx, dy) + weight * cells[ny, nx] / 254.0
                if nd < dist.get((nx, ny), math.inf):
                    dist[(nx, ny)] = nd
                    heapq.heappush(pq, (nd, (nx, ny)))
    return None


def test_planner_is_optimal_and_avoids_lethal_cells_on_200_random_maps():
    rng = np.random.default_rng(7)
    for trial in range(200):
        m = Costmap(12, 12, 0.1)
        m.cells = rng.integers(0, 255, (12, 12)).astype(np.uint8)
        start = (int(rng.integers(12)), int(rng.integers(12)))
        goal = (int(rng.integers(12)), int(rng.integers(12)))
        path = plan(m, PlanRequest(start, goal, lethal_cutoff=200, cost_weight=1.0))
        want = _dijkstra(m.cells, start, goal, 200, 1.0)
        if path is None:
            assert want is None, (trial, start, goal)
        else:
            assert path_cost(m, path, 1.0) == pytest.approx(want, abs=1e-9), trial
            assert all(m.cells[y, x] < 200 for x, y in path), trial


def test_mission_detours_around_a_single_obstacle():
    world = MissionWorld()           # one obstacle dead ahead on the straight line
    result = drive_simulated_mission(world, None, None, MissionConfig())
    assert result.reached and not result.timed_out
    decisions = [e["decision"] for e in result.log]
    assert "NOGO" in decisions
    assert any(e["replanned"] for e in result.log)
    ox, oy, radius = world.obstacles[0]
    clearance = [math.hypot(e["pose"][0] - ox, e["pose"][1] - oy) for e in result.log]
    assert min(clearance) > radius   # drove around, not through
    assert max(abs(e["pose"][1] - world.start[1]) for e in result.log) > radius


# -- saliency ----------------------------------------------------------------


def test_mean_positive_saliency_mass_sits_in_the_bottom_half(trained):
    head = train_fc(("R", "D", "F"), trained["train"], trained["models"], None,
                    FcTrainConfig(seed=FC_SEED))
    positives = [f for f in trained["test"] if f.label == "positive"][:32]
    sal = mean_saliency(head, trained["models"], positives)
    h = sal.shape[0]
    bottom_mass = float(sal[h // 2:].sum() / sal.sum())
    assert bottom_mass >= 0.40, bottom_mass

    gen, dis, inv = trained["models"]
    x = Tensor(positives[0].image.astype(np.float32).copy(),
               requires_grad=True, name="x")

    def prob():
        return ad.tsum(head.forward(branch_inputs(head.branches, x, gen, dis, inv)))

    report = check_scalar_fn(prob, x, tolerance=1e-2, n_coords=8)
    assert report["passed"], report


# -- determinism and persistence ---------------------------------------------

SMALL_RUN = """\
[run]
scale = desk

[data]
n_traces = 8
steps = 16
n_pos = 10
n_neg = 8

[gan]
batch_size = 16
epochs = 1

[inversion]
epochs = 1
batch_size = 8
iterations = 2

[fc]
epochs = 3
patience = 2
"""


def _digest_tree(root):
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def test_full_pipeline_rerun_reproduces_every_artifact_bit_for_bit(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text(SMALL_RUN)
    out = tmp_path / "out"

    def run_all():
        for argv in (["gen-data"], ["train-gan"], ["train-inv"],
                     ["train-fc", "--branches", "R+D+F"], ["score"],
                     ["eval"], ["costmap-demo"], ["saliency", "--limit", "4"]):
            code = cli.main(argv + ["--config", str(ini), "--out", str(out)])
            assert code == 0, argv
        return _digest_tree(out)

    first = run_all()
    for rel in sorted(first):
        (out / rel).unlink()
    second = run_all()
    assert first == second


def test_checkpoints_round_trip_losslessly(trained, tmp_path):
    gen = trained["gen"]
    path = tmp_path / "gen.ckpt"
    save_checkpoint(gen, str(path))
    fresh = build_generator(GanConfig(scale="desk", seed=99), seed=99)
    load_checkpoint(fresh, str(path))
    fresh.freeze()

    want, got = gen.state(), fresh.state()
    assert want.keys() == got.keys()
    for key in want:
        assert want[key].tobytes() == got[key].tobytes(), key
    z = Tensor(np.random.default_rng(3).standard_normal(
        (4, gen.z_dim)).astype(np.float32))
    assert np.array_equal(gen(z).data, fresh(z).data)
