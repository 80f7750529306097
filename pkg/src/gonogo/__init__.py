"""GAN-based GO/NO-GO traversability classification on synthetic scenes.

Pipeline: train a DCGAN-style generator on traversable views only, invert it
with a feed-forward encoder, score anomalies from weighted residual and
discriminator-feature distances, optionally fuse with a tiny supervised head,
and feed decisions into a costmap + grid planner.
"""

__version__ = "0.1.0"
