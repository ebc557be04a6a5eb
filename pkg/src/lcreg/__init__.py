"""Long-tailed classification toolkit.

A desk-scale trainer for classifiers that share a pool of class-agnostic
latent category features, regularized by a feature reconstruction loss and a
closed-form semantic augmentation loss on the latent vectors. Everything runs
on a small built-in reverse-mode differentiation core over float64 numpy
arrays, so the whole pipeline is exactly reproducible and finite-difference
checkable.
"""

__version__ = "0.1.0"
