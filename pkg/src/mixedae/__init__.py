"""Mixed-effects autoencoders for batch-confounded expression data.

Two cooperating subnetworks factor expression variation: a fixed-effects
autoencoder trained against an adversarial batch classifier yields a
batch-invariant latent space, and a random-effects autoencoder with
per-batch variational modulation captures what the first one discards.
"""

__version__ = "0.1.0"
