"""Shared small-scale settings for tests that run the whole pipeline."""

SMALL_CONFIG = """
# tiny end-to-end setup
num_identities = 40
samples_per_identity = 6
heldout_per_identity = 3
d_in = 8
num_superclusters = 4
sigma_between = 0.15
sigma_within = 0.04
label_flip_rate = 0.1
hidden_dims = 16
embedding_dim = 8
cls_lr = 0.03
cls_batch_size = 16
cls_epochs_per_rate = 8
logit_scale = 8.0
triplet_epochs_per_rate = 1
triplet_batch_size = 8
num_subspaces = 2
verification_pairs = 200
"""
