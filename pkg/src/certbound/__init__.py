"""Recursive PAC-Bayes risk certificates for discounted-return predictors.

Modules: :mod:`~certbound.binary_kl` (kl inverses, split decomposition),
:mod:`~certbound.predictor` (mean-field Gaussian MLP), :mod:`~certbound.rollout`
(toy environments and datasets), :mod:`~certbound.certification` (stage
training and the bound chain), :mod:`~certbound.metrics` and
:mod:`~certbound.cli`.
"""

__version__ = "0.1.0"
