"""Wasserstein-distance knowledge distillation in numpy.

Modules
-------
numerics      symmetric eigensolver, PSD square root, log-sum-exp, seeded PRNG
interrelation CKA / cosine category interrelation and the OT ground cost
ot            entropic optimal transport (log-domain Sinkhorn)
logit_loss    WKD-L, KL-divergence KD and cross-entropy with gradients
feature_dist  Gaussian WD feature loss and the feature-distribution baselines
nets          small conv nets with manual backprop, SGD, checkpoints
harness       synthetic data, configs, experiment runners and the CLI
"""

from .errors import NumericalError, ValidationError, WKDError

__version__ = "0.1.0"

__all__ = ["NumericalError", "ValidationError", "WKDError", "__version__"]
