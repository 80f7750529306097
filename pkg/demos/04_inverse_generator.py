"""Two ways back to latent space: 500-step descent vs one forward pass.

The iterative route optimizes z per image; the feed-forward inverse amortizes
that work into a network trained once. Same loss being minimized, wildly
different cost per image.
"""

import os
import time

import numpy as np

from gonogo.gan import GanConfig, train_gan
from gonogo.inversion import (InversionConfig, combined_loss, invert_feedforward,
                              invert_iterative, train_inverse_generator)
from gonogo.scenes import build_corpus

corpus = build_corpus(n_traces=12, steps=30, seed=3)
pool = corpus.positives()[:240]

print("training a small generator/discriminator pair first (2 epochs)...")
gen, dis, _ = train_gan(pool, GanConfig(scale="desk", batch_size=40, epochs=2, seed=1))

print("fitting the feed-forward inverse (3 epochs)...")
icfg = InversionConfig(epochs=3, batch_size=40, seed=2, iterations=60)
inv = train_inverse_generator(pool, gen, dis, icfg)

X = pool[0].image

t0 = time.time()
z_it, curve = invert_iterative(X, gen, dis, icfg, seed=5)
t_iter = time.time() - t0
print(f"\niterative: {icfg.iterations} steps in {t_iter:.2f}s; "
      f"loss {curve[0]:.4f} -> {min(curve):.4f}")

t0 = time.time()
z_ff = invert_feedforward(X, inv)
t_ff = time.time() - t0
print(f"feed-forward: one pass in {t_ff*1000:.1f}ms "
      f"({t_iter / max(t_ff, 1e-9):.0f}x faster here, more at 500 steps)")

# Both z's reconstruct through the same frozen generator.
for name, z in (("iterative", z_it), ("feed-forward", z_ff)):
    loss = combined_loss(X, z, gen, dis, icfg)
    print(f"{name:12s} z -> combined loss {float(loss.data):.4f}")
