"""Pipeline command line: one subcommand per stage.

gen-data     render the synthetic corpus and the annotated splits
train-gan    adversarial training on the positive pool
train-inv    fit the feed-forward inverse under the frozen pair
train-fc     fit the supervised fusion head on the annotated train split
score        per-image anomaly records as JSON-lines
eval         ablation table (text + JSON); deterministic, no timing
bench        feed-forward vs iterative inversion Hz and peak memory
costmap-demo closed-loop mission on the simulated world
saliency     per-image saliency PGMs plus learned residual weights

Exit codes: 0 ok, 1 usage, 2 bad config, 3 missing input or checkpoint,
4 corrupt file, 5 scale or architecture mismatch.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .checkpoint import (FormatError, MismatchError, load_checkpoint,
                         peek_checkpoint, save_checkpoint)
from .config import ConfigError, Seeds, default_config, load_config, write_default_config

EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_FORMAT = 4
EXIT_MISMATCH = 5

CKPT = {"gen": "gen.ckpt", "dis": "dis.ckpt", "inv": "inv.ckpt", "fc": "fc.ckpt"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _resolve_config(args):
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        s = args.seed
        seeds = Seeds(data=s, gan=s + 1, inversion=s + 2, fc=s + 3, eval=s + 4)
        cfg = dataclasses.replace(
            cfg, seeds=seeds,
            gan=dataclasses.replace(cfg.gan, seed=seeds.gan),
            inversion=dataclasses.replace(cfg.inversion, seed=seeds.inversion),
            fc=dataclasses.replace(cfg.fc, seed=seeds.fc))
    return cfg


class _Dirs:
    def __init__(self, args, cfg):
        self.data = os.path.join(args.out, cfg.paths.data)
        self.models = os.path.join(args.out, cfg.paths.models)
        self.reports = os.path.join(args.out, cfg.paths.reports)

    def need(self, *names):
        for n in names:
            os.makedirs(getattr(self, n), exist_ok=True)
        return self


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return path


def _load_frames(dir_path, what):
    from .scenes import load_dataset

    manifest = os.path.join(dir_path, "manifest.jsonl")
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no {what} dataset at {dir_path} (run gen-data first)")
    return load_dataset(dir_path)


def _fresh_model(kind, cfg, header):
    from .gan import build_discriminator, build_generator
    from .inversion import build_inverse_generator
    from .scoring import build_fc_head

    if kind == "gen":
        return build_generator(cfg.gan)
    if kind == "dis":
        return build_discriminator(cfg.gan)
    if kind == "inv":
        return build_inverse_generator(cfg.scale)
    names = {row["name"] for row in header["manifest"]}
    branches = tuple(b for b in ("R", "D", "F") if f"fc.{b}.w" in names)
    return build_fc_head(branches, cfg.scale)


def _load_model(kind, models_dir, cfg):
    path = os.path.join(models_dir, CKPT[kind])
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing checkpoint {path} (train it first)")
    header = peek_checkpoint(path)
    if header["scale"] != cfg.scale:
        raise MismatchError(f"{path}: checkpoint trained at scale "
                            f"{header['scale']!r} but the config says {cfg.scale!r}")
    model = _fresh_model(kind, cfg, header)
    load_checkpoint(model, path)
    model.freeze()
    return model


def _load_trio(models_dir, cfg):
    return tuple(_load_model(k, models_dir, cfg) for k in ("gen", "dis", "inv"))


def _masks(cfg, enabled=True):
    from .scoring import build_weight_masks

    return build_weight_masks(cfg.scoring, cfg.scale) if enabled else None


def _to_pgm(path, grid):
    from .imageio import write_pgm

    lo, hi = float(grid.min()), float(grid.max())
    norm = np.full(grid.shape, 0.5) if hi - lo < 1e-12 else (grid - lo) / (hi - lo)
    write_pgm(path, np.clip(np.rint(norm * 255.0), 0, 255).astype(np.uint8))


# -- commands ----------------------------------------------------------------


def cmd_gen_data(args):
    from .scenes import build_annotated_split, build_corpus, export_dataset

    cfg = _resolve_config(args)
    d = _Dirs(args, cfg).need("data")
    corpus = build_corpus(cfg.data.n_traces, cfg.data.steps, seed=cfg.seeds.data,
                          hw=cfg.hw, cfg=cfg.labeling, flip=cfg.data.flip)
    train, test = build_annotated_split(corpus, cfg.data.n_pos, cfg.data.n_neg,
                                        seed=cfg.seeds.data)
    positives = corpus.positives()
    export_dataset(positives, os.path.join(d.data, "positives"))
    export_dataset(train, os.path.join(d.data, "train"))
    export_dataset(test, os.path.join(d.data, "test"))
    summary = {"scale": cfg.scale, "hw": list(cfg.hw),
               "positives": len(positives),
               "gt_negatives": len(corpus.gt_negatives()),
               "train": len(train), "test": len(test)}
    _write_json(os.path.join(d.data, "summary.json"), summary)
    print(f"wrote {summary['positives']} positives, {summary['train']} train "
          f"and {summary['test']} annotated frames under {d.data}")
    return 0


def cmd_train_gan(args):
    from .gan import train_gan

    cfg = _resolve_config(args)
    d = _Dirs(args, cfg).need("models")
    frames = _load_frames(os.path.join(d.data, "positives"), "positive")
    gen, dis, history = train_gan(frames, cfg.gan, log_every=args.log_every)
    save_checkpoint(gen, os.path.join(d.models, CKPT["gen"]))
    save_checkpoint(dis, os.path.join(d.models, CKPT["dis"]))
    _write_jsonl(os.path.join(d.models, "gan_history.jsonl"),
                 [{"epoch": h["epoch"], "d_loss": h["d_loss"], "g_loss": h["g_loss"]}
                  for h in history])
    print(f"trained {cfg.gan.epochs} epochs on {len(frames)} positives; "
          f"checkpoints under {d.models}")
    return 0


def cmd_train_inv(args):
    from .inversion import train_inverse_generator

    cfg = _resolve_config(args)
    d = _Dirs(args, cfg).need("models")
    frames = _load_frames(os.path.join(d.data, "positives"), "positive")
    gen = _load_model("gen", d.models, cfg)
    dis = _load_model("dis", d.models, cfg)
    inv = train_inverse_generator(frames, gen, dis, cfg.inversion,
                                  log_every=args.log_every)
    save_checkpoint(inv, os.path.join(d.models, CKPT["inv"]))
    _write_jsonl(os.path.join(d.models, "inv_history.jsonl"), inv.history)
    print(f"inverse generator fitted for {cfg.inversion.epochs} epochs; "
          f"checkpoint under {d.models}")
    return 0


def cmd_train_fc(args):
    from .scoring import train_fc

    cfg = _resolve_config(args)
    d = _Dirs(args, cfg).need("models")
    frames = _load_frames(os.path.join(d.data, "train"), "annotated train")
    models = _load_trio(d.models, cfg)
    branches = tuple(args.branches.split("+"))
    head = train_fc(branches, frames, models, _masks(cfg), cfg.fc)
    save_checkpoint(head, os.path.join(d.models, CKPT["fc"]))
    _write_jsonl(os.path.join(d.models, "fc_history.jsonl"), head.history)
    print(f"fusion head [{args.branches}] trained on {len(frames)} frames; "
          f"checkpoint under {d.models}")
    return 0


def cmd_score(args):
    from .scoring import classify_fc, score

    cfg = _resolve_config(args)
    d = _Dirs(args, cfg).need("reports")
    frames = _load_frames(args.data or os.path.join(d.data, "test"), "input")
    models = _load_trio(d.models, cfg)
    gen, dis, inv = models
    masks = _masks(cfg, not args.no_masks)
    head = None
    if os.path.exists(os.path.join(d.models, CKPT["fc"])):
        head = _load_model("fc", d.models, cfg)
    rows = []
    for k, fr in enumerate(frames):
        bd = score(fr.image, gen, dis, inv, masks, cfg.scoring)
        rec = {"id": f"frame_{k:06d}", "R_s": bd.r_s, "D_s": bd.d_s,
               "A": bd.a, "t_d": bd.t_d, "fc_prob": None, "fc_decision": None}
        if head is not None:
            prob, decision = classify_fc(head, fr.image, models)
            rec["fc_prob"], rec["fc_decision"] = prob, decision
        rows.append(rec)
    out = _write_jsonl(os.path.join(d.reports, "scores.jsonl"), rows)
    n_go = sum(r["t_d"] == "GO" for r in rows)
    print(f"scored {len(rows)} frames ({n_go} GO / {len(rows) - n_go} NOGO) -> {out}")
    return 0


def cmd_eval(args):
    from .evalkit import AblationSpec, format_report, run_ablation

    cfg = _resolve_config(args)
    d = _Dirs(args, cfg).need("reports")
    datasets = {"train": _load_frames(os.path.join(d.data, "train"), "annotated train"),
                "test": _load_frames(os.path.join(d.data, "test"), "annotated test")}
    models = _load_trio(d.models, cfg)
    specs = [AblationSpec("unsupervised-ours", ("R", "D")),
             AblationSpec("supervised-ours", ("R", "D", "F")),
             AblationSpec("supervised-ours", ("D", "F")),
             AblationSpec("supervised-ours", ("F",))]
    rows = [run_ablation(s, datasets, models, cfg.scoring, fc_cfg=cfg.fc,
                         repetitions=0) for s in specs]
    if args.baseline:
        small = {"train": datasets["train"],
                 "test": datasets["test"][:args.baseline_limit]}
        rows.insert(0, run_ablation(
            AblationSpec("unsupervised-baseline", ("R", "D")), small, models,
            cfg.scoring, inv_cfg=cfg.inversion, repetitions=0))
    report = format_report(rows)
    _write_json(os.path.join(d.reports, "report.json"), {"rows": rows})
    with open(os.path.join(d.reports, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report + "\n")
    print(report)
    return 0


def cmd_bench(args):
    from .evalkit import _IterativeInverter, benchmark
    from .scoring import score

    cfg = _resolve_config(args)
    d = _Dirs(args, cfg).need("reports")
    frames = _load_frames(args.data or os.path.join(d.data, "test"), "input")
    gen, dis, inv = _load_trio(d.models, cfg)
    masks = _masks(cfg)
    images = [fr.image for fr in frames[:args.images]]
    icfg = cfg.inversion
    if args.iterations is not None:
        icfg = dataclasses.replace(icfg, iterations=args.iterations)
    ff = benchmark(lambda im: score(im, gen, dis, inv, masks, cfg.scoring),
                   images, repetitions=args.reps)
    baseline = _IterativeInverter(gen, dis, icfg, seed=cfg.seeds.eval)
    it = benchmark(lambda im: score(im, gen, dis, baseline, masks, cfg.scoring),
                   images, repetitions=args.reps)
    payload = {"feedforward": ff, "iterative": it,
               "iterations": icfg.iterations,
               "speedup": ff["hz"] / it["hz"]}
    out = _write_json(os.path.join(d.reports, "perf.json"), payload)
    print(f"feed-forward {ff['hz']:.2f} Hz vs iterative {it['hz']:.3f} Hz "
          f"({payload['speedup']:.0f}x, {icfg.iterations} iterations) -> {out}")
    return 0


def cmd_costmap_demo(args):
    from .costmap import MissionWorld, drive_simulated_mission, export_map

    cfg = _resolve_config(args)
    d = _Dirs(args, cfg).need("reports")
    world = MissionWorld(seed=cfg.seeds.eval)
    models, masks = None, None
    if cfg.mission.classifier == "score":
        models = _load_trio(d.models, cfg)
        masks = _masks(cfg)
    result = drive_simulated_mission(world, models, masks, cfg.mission)
    _write_jsonl(os.path.join(d.reports, "mission.jsonl"), result.log)
    export_map(result.map, os.path.join(d.reports, "mission_map"),
               cfg.mission.lethal_cutoff)
    _write_json(os.path.join(d.reports, "mission.json"),
                {"reached": result.reached, "steps": result.steps,
                 "timed_out": result.timed_out, "no_path": result.no_path,
                 "path_cells": len(result.path)})
    outcome = "reached goal" if result.reached else "did not reach goal"
    print(f"{outcome} in {result.steps} steps; map and log under {d.reports}")
    return 0


def cmd_saliency(args):
    from .scoring import export_residual_weights, mean_saliency, saliency_map

    cfg = _resolve_config(args)
    d = _Dirs(args, cfg).need("reports")
    frames = _load_frames(args.data or os.path.join(d.data, "test"), "input")
    models = _load_trio(d.models, cfg)
    head = _load_model("fc", d.models, cfg)
    sal_dir = os.path.join(d.reports, "saliency")
    os.makedirs(sal_dir, exist_ok=True)
    picked = frames[:args.limit]
    for k, fr in enumerate(picked):
        _to_pgm(os.path.join(sal_dir, f"frame_{k:06d}.pgm"),
                saliency_map(head, models, fr.image))
    mean_map = mean_saliency(head, models, picked)
    _to_pgm(os.path.join(sal_dir, "mean.pgm"), mean_map)
    h = mean_map.shape[0]
    bottom = float(mean_map[h // 2:].sum() / max(mean_map.sum(), 1e-12))
    if "R" in head.branches:
        export_residual_weights(head, os.path.join(d.reports, "residual_weights.pgm"))
    _write_json(os.path.join(d.reports, "saliency.json"),
                {"frames": len(picked), "bottom_half_mass": bottom})
    print(f"{len(picked)} saliency maps under {sal_dir}; "
          f"bottom-half mass {bottom:.2f}")
    return 0


def cmd_init_config(args):
    path = write_default_config(args.path, scale=args.scale)
    print(f"wrote {path}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="gonogo", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--out", default="out", help="output root (default: out)")
    common.add_argument("--seed", type=int, help="master seed overriding [seeds]")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, parents=[common], **kwargs)
        p.set_defaults(func=fn)
        return p

    add("gen-data", cmd_gen_data, help="render corpus and annotated splits")
    for name, fn in (("train-gan", cmd_train_gan), ("train-inv", cmd_train_inv)):
        p = add(name, fn, help=f"{name.replace('-', ' ')} on the positive pool")
        p.add_argument("--log-every", type=int, default=0,
                       help="print a progress line every N epochs")
    p = add("train-fc", cmd_train_fc, help="train the supervised fusion head")
    p.add_argument("--branches", default="R+D+F",
                   help="'+'-joined subset of R, D, F (default R+D+F)")
    p = add("score", cmd_score, help="JSON-lines anomaly records")
    p.add_argument("--data", help="dataset directory (default: <out>/data/test)")
    p.add_argument("--no-masks", action="store_true",
                   help="score without the near-field weighting")
    p = add("eval", cmd_eval, help="deterministic ablation report")
    p.add_argument("--baseline", action="store_true",
                   help="include the iterative-inversion row (slow)")
    p.add_argument("--baseline-limit", type=int, default=6,
                   help="test images for the baseline row (default 6)")
    p = add("bench", cmd_bench, help="Hz and peak memory, both inversion routes")
    p.add_argument("--data", help="dataset directory (default: <out>/data/test)")
    p.add_argument("--images", type=int, default=2)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--iterations", type=int,
                   help="override the baseline iteration count")
    add("costmap-demo", cmd_costmap_demo, help="closed-loop mission demo")
    p = add("saliency", cmd_saliency, help="saliency PGMs + residual weights")
    p.add_argument("--data", help="dataset directory (default: <out>/data/test)")
    p.add_argument("--limit", type=int, default=8)
    p = add("init-config", cmd_init_config, help="write a fully populated INI")
    p.add_argument("path")
    p.add_argument("--scale", default="desk", choices=("desk", "full"))
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"missing input: {e}", file=sys.stderr)
        return EXIT_MISSING
    except MismatchError as e:
        print(f"mismatch: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    raise SystemExit(main())
