"""From reconstruction error to a GO/NOGO decision, two ways.

Unsupervised: weighted residual + feature distances, thresholded. Supervised:
a tiny fusion head trained on a handful of labels. Ends with the saliency
map that shows where the decision looks.
"""

import os

import numpy as np

from gonogo.evalkit import calibrate_threshold, separation_auc
from gonogo.gan import GanConfig, train_gan
from gonogo.imageio import write_pgm
from gonogo.inversion import InversionConfig, train_inverse_generator
from gonogo.scenes import build_annotated_split, build_corpus
from gonogo.scoring import (FcTrainConfig, ScoringConfig, build_weight_masks,
                            classify_fc, export_residual_weights, saliency_map,
                            score, train_fc)

out = os.path.join(os.path.dirname(__file__), "out", "scoring")
os.makedirs(out, exist_ok=True)

corpus = build_corpus(n_traces=16, steps=30, seed=3)
train_l, test_l = build_annotated_split(corpus, n_pos=30, n_neg=30, seed=4)
pool = corpus.positives()[:300]

print("training the stack (small: 2+3 epochs)...")
gen, dis, _ = train_gan(pool, GanConfig(scale="desk", batch_size=50, epochs=2, seed=1))
inv = train_inverse_generator(pool, gen, dis,
                              InversionConfig(epochs=3, batch_size=50, seed=2))
models = (gen, dis, inv)

# The masks upweight the bottom image band, where the obstruction signal is.
cfg = ScoringConfig(lam=0.1, a_th=0.5)
masks = build_weight_masks(cfg, "desk")
print(f"mask weights: top rows {masks.w_r[0, 0, 0]:.3f}, "
      f"bottom rows {masks.w_r[0, -1, 0]:.3f} (mean 1)")

# Calibrate the threshold on the labeled training split, then score test frames.
scored = [(score(f.image, gen, dis, inv, masks, cfg).a, f.label) for f in train_l]
a_th = calibrate_threshold(scored)
cfg = ScoringConfig(lam=0.1, a_th=a_th)
print(f"calibrated a_th={a_th:.4f} on {len(scored)} labeled training frames")

pos_a, neg_a = [], []
for f in test_l[:40]:
    bd = score(f.image, gen, dis, inv, masks, cfg)
    (pos_a if f.label == "positive" else neg_a).append(bd.a)
print(f"test A: positives {np.mean(pos_a):.4f}, negatives {np.mean(neg_a):.4f}, "
      f"AUC {separation_auc(pos_a, neg_a):.2f}")

# The supervised head fuses R, D and the raw features F.
head = train_fc(("R", "D", "F"), train_l, models, masks, FcTrainConfig(seed=3))
hits = sum(1 for f in test_l
           if (classify_fc(head, f.image, models)[1] == "GO") == (f.label == "positive"))
print(f"fusion head accuracy on {len(test_l)} test frames: {hits / len(test_l):.2f}")

# Saliency: gradient of the GO probability wrt input pixels.
neg = next(f for f in test_l if f.label == "negative")
sal = saliency_map(head, models, neg.image)
lo, hi = float(sal.min()), float(sal.max())
write_pgm(os.path.join(out, "saliency.pgm"),
          np.clip(np.rint((sal - lo) / max(hi - lo, 1e-12) * 255), 0, 255).astype(np.uint8))
bottom = sal[sal.shape[0] // 2:].sum() / sal.sum()
print(f"negative-frame saliency: {bottom:.0%} of mass in the bottom half "
      f"-> {out}/saliency.pgm")

export_residual_weights(head, os.path.join(out, "residual_weights.pgm"))
print("learned residual weights exported alongside it")
