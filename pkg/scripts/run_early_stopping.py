"""Compare individual vs joint early stopping across holdout strategies.

Trains 4-member MLP ensembles on noisy 4-class blobs under shared, disjoint
and overlapping holdouts at several validation percentages, then aggregates
test metrics and stopping times (step-normalized epochs) over seeds.

    python scripts/run_early_stopping.py [out_dir]
"""

import sys

from enstune.config import load_config
from enstune.experiments import run_experiment

OUT = sys.argv[1] if len(sys.argv) > 1 else "runs/early_stopping"

cfg = load_config(None, [
    "task.kind=blobs", "task.n=2000", "task.classes=4", "task.noise=0.8",
    "task.label_noise=0.15", "task.test_fraction=0.2",
    "model.hidden=[32]",
    "ensemble.members=4",
    "optimizer.kind=adam", "optimizer.lr=0.01",
    "stopping.patience=10", "stopping.max_epochs=150", "stopping.batch_size=128",
    "experiment.kind=early_stop",
    "experiment.seeds=[0,1,2,3,4,5,6,7,8,9]",
    'experiment.strategies=["shared","disjoint","overlapping"]',
    'experiment.modes=["individual","joint"]',
    "experiment.val_pcts=[0.05,0.1,0.2]",
    f"experiment.out_dir={OUT}",
])

manifest = run_experiment(cfg)
print(f"aggregates: {manifest['outputs']['aggregate']}")
print(f"stopping-time log: {manifest['outputs']['monitor']}")
