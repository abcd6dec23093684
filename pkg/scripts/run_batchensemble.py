"""BatchEnsemble fast-weight initialization study.

Trains rank-1 fast-weight ensembles under the three initializations
(Gaussian sigma 0.1 / 0.5, random sign) and all three holdout strategies,
recording test metrics plus per-member train/val scores — the val-minus-train
gap is the data-leakage diagnostic for non-shared holdouts.

    python scripts/run_batchensemble.py [out_dir]
"""

import sys

from enstune.config import load_config
from enstune.experiments import run_experiment

OUT = sys.argv[1] if len(sys.argv) > 1 else "runs/batchensemble"

cfg = load_config(None, [
    "task.kind=blobs", "task.n=2000", "task.classes=4", "task.noise=0.8",
    "task.label_noise=0.15", "task.test_fraction=0.2",
    "model.hidden=[64,64]",
    "ensemble.members=4", "ensemble.val_pct=0.1",
    "optimizer.kind=adam", "optimizer.lr=0.001",
    "stopping.patience=10", "stopping.max_epochs=100", "stopping.batch_size=128",
    "experiment.kind=batch_ensemble",
    "experiment.seeds=[0,1,2,3,4,5,6,7,8,9]",
    'experiment.schemes=["gaussian_0.1","gaussian_0.5","random_sign"]',
    'experiment.strategies=["shared","overlapping","disjoint"]',
    f"experiment.out_dir={OUT}",
])

manifest = run_experiment(cfg)
print(f"aggregates: {manifest['outputs']['aggregate']}")
