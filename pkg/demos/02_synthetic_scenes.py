"""Synthetic world: rendered views, simulated runs, velocity auto-labeling."""

import collections
import os

import numpy as np

from gonogo.imageio import write_ppm
from gonogo.scenes import (LabelingConfig, SceneParams, auto_label, build_corpus,
                           export_dataset, render_scene, simulate_run)

out = os.path.join(os.path.dirname(__file__), "out", "scenes")
os.makedirs(out, exist_ok=True)

# One of each view kind. Corridors are traversable; the other two block the
# bottom of the image with a box or a floor drop-off.
for kind in ("corridor", "obstacle", "edge"):
    img, traversable = render_scene(SceneParams(seed=42, kind=kind))
    write_ppm(os.path.join(out, f"{kind}.ppm"), img)
    print(f"{kind:9s} traversable={traversable}  "
          f"pixel range [{img.min():.2f}, {img.max():.2f}]")

# A run drives down the corridor until something gets close; the speed trace
# is all the labeler ever sees.
trace = simulate_run(world_seed=3, steps=40)
v = np.array(trace.velocities)
print(f"\nrun of {len(v)} steps: fast frames {(v > 0.3).sum()}, "
      f"slow frames {(v <= 0.3).sum()}")

labeled = auto_label(trace, LabelingConfig(v_th=0.3, p=5, f_ahead=3))
counts = collections.Counter(f.label for f in labeled)
print("auto labels:", dict(counts))

# Corpus building wires the two together at scale and adds mirrored positives.
corpus = build_corpus(n_traces=10, steps=30, seed=3)
print(f"\n10-trace corpus: {len(corpus.positives())} positives, "
      f"{len(corpus.gt_negatives())} ground-truth negatives")

manifest = export_dataset(corpus.positives()[:12], os.path.join(out, "mini"))
print("exported a 12-frame PPM dataset ->", manifest)
