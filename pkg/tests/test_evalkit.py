"""Metrics arithmetic, ablation harness, calibration, AUC, benchmarking."""

import time
from dataclasses import replace

import numpy as np
import pytest

from gonogo.autodiff import Tensor
from gonogo.evalkit import (
    AblationSpec,
    ConfusionCounts,
    benchmark,
    calibrate_threshold,
    count_decisions,
    f1_from_rates,
    format_report,
    metrics,
    run_ablation,
    separation_auc,
)
from gonogo.gan import GanConfig, build_discriminator, build_generator
from gonogo.inversion import InversionConfig, build_inverse_generator
from gonogo.scenes import LabeledFrame
from gonogo.scoring import FcTrainConfig, ScoringConfig, build_weight_masks, score


class TestMetrics:
    def test_published_f1_rows(self):
        # harmonic mean is unit-agnostic, so percent inputs give percent F1
        assert abs(f1_from_rates(95.75, 92.96) - 94.33) < 0.01
        assert abs(f1_from_rates(96.50, 90.19) - 93.24) < 0.01
        assert abs(f1_from_rates(95.50, 89.67) - 92.49) < 0.01

    def test_all_ones_symmetry(self):
        m = metrics(ConfusionCounts(1, 1, 1, 1))
        assert m == {"accuracy": 0.5, "recall": 0.5, "precision": 0.5, "f1": 0.5}

    def test_tn_only_flags_undefined(self):
        m = metrics(ConfusionCounts(0, 0, 0, 7))
        assert m["accuracy"] == 1.0
        assert m["recall"] is None and m["precision"] is None and m["f1"] is None

    def test_zero_recall_precision_f1_undefined(self):
        m = metrics(ConfusionCounts(0, 3, 4, 5))
        assert m["recall"] == 0.0 and m["precision"] == 0.0
        assert m["f1"] is None

    def test_identity_oracle_random_counts(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            tp, fp, fn, tn = (int(v) for v in rng.integers(1, 50, 4))
            m = metrics(ConfusionCounts(tp, fp, fn, tn))
            assert m["accuracy"] == pytest.approx((tp + tn) / (tp + fp + fn + tn))
            assert m["recall"] == pytest.approx(tp / (tp + fn))
            assert m["precision"] == pytest.approx(tp / (tp + fp))
            p, r = m["precision"], m["recall"]
            assert m["f1"] == pytest.approx(2 * p * r / (p + r))

    def test_negative_count_rejected(self):
        with pytest.raises(ValueError, match="tp"):
            ConfusionCounts(-1, 0, 0, 0)

    def test_count_decisions(self):
        c = count_decisions(["GO", "GO", "NOGO", "NOGO"],
                            ["positive", "negative", "positive", "negative"])
        assert (c.tp, c.fp, c.fn, c.tn) == (1, 1, 1, 1)
        with pytest.raises(ValueError, match="decisions"):
            count_decisions(["GO"], ["positive", "negative"])
        with pytest.raises(ValueError, match="truth"):
            count_decisions(["GO"], ["maybe"])


class TestAblationSpec:
    def test_baseline_forces_route(self):
        s = AblationSpec("unsupervised-baseline", ("R", "D"))
        assert s.inversion == "iterative" and s.masks == "off"
        with pytest.raises(ValueError, match="iterative"):
            AblationSpec("unsupervised-baseline", ("R",), inversion="feedforward")
        with pytest.raises(ValueError, match="masks"):
            AblationSpec("unsupervised-baseline", ("R",), masks="on")

    def test_ours_unsupervised_forces_route(self):
        s = AblationSpec("unsupervised-ours", ("D",))
        assert s.inversion == "feedforward" and s.masks == "on"
        with pytest.raises(ValueError):
            AblationSpec("unsupervised-ours", ("D",), inversion="iterative")

    def test_f_needs_supervision(self):
        with pytest.raises(ValueError, match="supervised"):
            AblationSpec("unsupervised-ours", ("R", "F"))
        assert AblationSpec("supervised-ours", ("F",)).components == ("F",)

    def test_component_order_normalized(self):
        assert AblationSpec("supervised-ours", ("F", "R", "D")).components == \
            ("R", "D", "F")

    def test_invalid_specs(self):
        with pytest.raises(ValueError, match="mode"):
            AblationSpec("zero-shot", ("R",))
        with pytest.raises(ValueError, match="nonempty"):
            AblationSpec("supervised-ours", ())
        with pytest.raises(ValueError, match="duplicate"):
            AblationSpec("supervised-ours", ("R", "R"))


@pytest.fixture(scope="module")
def models():
    cfg = GanConfig(scale="desk", seed=11)
    gen = build_generator(cfg)
    dis = build_discriminator(cfg)
    inv = build_inverse_generator("desk", seed=5)
    rng = np.random.default_rng(2)
    for _ in range(3):
        gen(Tensor(rng.standard_normal((8, 32)).astype(np.float32)))
        dis(Tensor(rng.random((8, 3, 32, 32)).astype(np.float32)))
        inv(Tensor(rng.random((8, 3, 32, 32)).astype(np.float32)))
    gen.freeze()
    dis.freeze()
    inv.freeze()
    return gen, dis, inv


def make_frames(n_per_class, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_per_class):
        out.append(LabeledFrame((0.3 * rng.random((3, 32, 32))).astype(np.float32),
                                "positive", (0, i)))
        out.append(LabeledFrame((0.7 + 0.3 * rng.random((3, 32, 32))).astype(np.float32),
                                "negative", (1, i)))
    return out


class TestRunAblation:
    def test_single_r_equals_lambda_zero_score(self, models):
        gen, dis, inv = models
        frames = make_frames(3)
        cfg = ScoringConfig(lam=0.1, a_th=0.17)
        row = run_ablation(AblationSpec("unsupervised-ours", ("R",)),
                           {"test": frames}, models, cfg, repetitions=0)
        eff = replace(cfg, lam=0.0)
        masks = build_weight_masks(eff, "desk")
        for k, fr in enumerate(frames):
            bd = score(fr.image, gen, dis, inv, masks, eff)
            assert row["decisions"][k] == bd.t_d
            assert row["scores"][k] == pytest.approx(bd.a, abs=1e-7)

    def test_single_d_equals_lambda_one_score(self, models):
        gen, dis, inv = models
        frames = make_frames(2)
        cfg = ScoringConfig(lam=0.1)
        row = run_ablation(AblationSpec("unsupervised-ours", ("D",)),
                           {"test": frames}, models, cfg, repetitions=0)
        eff = replace(cfg, lam=1.0)
        masks = build_weight_masks(eff, "desk")
        want = [score(fr.image, gen, dis, inv, masks, eff).a for fr in frames]
        assert row["scores"] == pytest.approx(want, abs=1e-7)

    def test_deterministic_rows(self, models):
        frames = make_frames(2)
        cfg = ScoringConfig()
        spec = AblationSpec("unsupervised-ours", ("R", "D"))
        a = run_ablation(spec, {"test": frames}, models, cfg, repetitions=0)
        b = run_ablation(spec, {"test": frames}, models, cfg, repetitions=0)
        assert a == b

    def test_iterative_route_runs_and_reruns_identically(self, models):
        frames = make_frames(1)
        cfg = ScoringConfig()
        icfg = InversionConfig(iterations=2)
        spec = AblationSpec("unsupervised-baseline", ("R", "D"))
        a = run_ablation(spec, {"test": frames}, models, cfg, inv_cfg=icfg,
                         repetitions=0)
        b = run_ablation(spec, {"test": frames}, models, cfg, inv_cfg=icfg,
                         repetitions=0)
        assert a == b
        assert a["inversion"] == "iterative" and a["masks"] == "off"

    def test_supervised_row(self, models):
        frames = make_frames(8)
        row = run_ablation(
            AblationSpec("supervised-ours", ("R", "F")),
            {"train": make_frames(8, seed=3), "test": frames}, models,
            ScoringConfig(), fc_cfg=FcTrainConfig(epochs=5, seed=1),
            repetitions=0)
        assert row["components"] == "R+F"
        assert sum(row["counts"].values()) == len(frames)
        assert all(0.0 <= p <= 1.0 for p in row["scores"])

    def test_perf_attached(self, models):
        frames = make_frames(1)
        row = run_ablation(AblationSpec("unsupervised-ours", ("R",)),
                           {"test": frames}, models, ScoringConfig(),
                           bench_images=1, repetitions=3)
        assert row["perf"]["hz"] > 0
        assert row["perf"]["peak_mem_bytes"] > 0

    def test_empty_test_set(self, models):
        with pytest.raises(ValueError, match="empty"):
            run_ablation(AblationSpec("unsupervised-ours", ("R",)),
                         {"test": []}, models, ScoringConfig())


def sweep_oracle(pairs):
    """Independent exhaustive F1 sweep; strict improvement keeps the
    smallest threshold on ties."""
    n_pos = sum(1 for _, lab in pairs if lab == "positive")
    best_th, best_f1 = None, -1.0
    for th in sorted({a for a, _ in pairs}):
        tp = sum(1 for a, lab in pairs if a < th and lab == "positive")
        fp = sum(1 for a, lab in pairs if a < th and lab == "negative")
        f1 = 2.0 * tp / (2.0 * tp + fp + (n_pos - tp))
        if f1 > best_f1:
            best_th, best_f1 = th, f1
    return best_th


class TestCalibrateThreshold:
    def test_separated_scores(self):
        pairs = [(0.05, "positive"), (0.1, "positive"),
                 (0.5, "negative"), (0.9, "negative")]
        assert calibrate_threshold(pairs) == 0.5

    def test_matches_brute_force_sweep(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            n = int(rng.integers(4, 30))
            scores = rng.integers(0, 10, n) / 10.0  # coarse grid forces ties
            labels = rng.choice(["positive", "negative"], n)
            if len(set(labels)) < 2:
                continue
            pairs = list(zip(scores.tolist(), labels.tolist()))
            assert calibrate_threshold(pairs) == sweep_oracle(pairs)

    def test_single_class_errors(self):
        with pytest.raises(ValueError, match="both classes"):
            calibrate_threshold([(0.1, "positive"), (0.2, "positive")])
        with pytest.raises(ValueError, match="labels"):
            calibrate_threshold([(0.1, "yes"), (0.2, "no")])


class TestSeparationAuc:
    def test_perfect_separation(self):
        assert separation_auc([0.1, 0.2], [0.5, 0.6]) == 1.0

    def test_all_equal_is_half(self):
        assert separation_auc([0.3, 0.3], [0.3, 0.3, 0.3]) == 0.5

    def test_pairwise_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            pos = rng.integers(0, 8, int(rng.integers(2, 15))) / 8.0
            neg = rng.integers(0, 8, int(rng.integers(2, 15))) / 8.0
            want = np.mean([(1.0 if n > p else 0.5 if n == p else 0.0)
                            for p in pos for n in neg])
            assert separation_auc(pos, neg) == pytest.approx(want, abs=1e-12)

    def test_empty_errors(self):
        with pytest.raises(ValueError, match="nonempty"):
            separation_auc([], [0.1])


class TestBenchmark:
    def test_identity_pipeline(self):
        out = benchmark(lambda img: img, [np.zeros(4)] * 3, repetitions=3)
        assert out["hz"] > 0 and np.isfinite(out["hz"])
        assert isinstance(out["peak_mem_bytes"], int)

    def test_validation(self):
        with pytest.raises(ValueError, match="repetitions"):
            benchmark(lambda img: img, [np.zeros(4)], repetitions=2)
        with pytest.raises(ValueError, match="no images"):
            benchmark(lambda img: img, [], repetitions=3)

    def test_warmup_excluded(self):
        state = {"first": True}

        def pipeline(img):
            if state["first"]:
                state["first"] = False
                time.sleep(0.2)
            else:
                time.sleep(0.001)

        out = benchmark(pipeline, [np.zeros(1)], repetitions=3)
        assert out["hz"] > 20  # the slow first call happened before timing

    def test_repetition_stability(self):
        pipeline = lambda img: time.sleep(0.002)
        images = [np.zeros(1)] * 3
        a = benchmark(pipeline, images, repetitions=4)["hz"]
        b = benchmark(pipeline, images, repetitions=8)["hz"]
        assert abs(a - b) / max(a, b) < 0.2


class TestFormatReport:
    def test_table_shape(self, models):
        frames = make_frames(2)
        row = run_ablation(AblationSpec("unsupervised-ours", ("R", "D")),
                           {"test": frames}, models, ScoringConfig(),
                           repetitions=0)
        text = format_report([row])
        assert "file I/O excluded" in text
        assert "R+D" in text
        assert "n/a" in text  # perf was skipped

    def test_undefined_metrics_render(self):
        row = {"mode": "unsupervised-ours", "components": "R", "inversion":
               "feedforward", "masks": "on", "accuracy": None, "recall": None,
               "precision": None, "f1": None, "perf": None}
        assert "n/a" in format_report([row])
