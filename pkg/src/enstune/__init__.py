"""Desk-scale toolkit for training, tuning and calibrating deep ensembles.

Modules cover a minimal feed-forward network engine (``netcore``), holdout
split construction (``splits``), scoring and diversity metrics (``metrics``),
temperature scaling (``calibration``), early-stopping training loops
(``training``), rank-1 fast-weight ensembles (``batchensemble``),
weight-decay grid search (``tuning``) and the experiment harness (``data``,
``config``, ``experiments``, ``cli``).
"""

__version__ = "0.1.0"
