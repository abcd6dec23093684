"""Temperature scaling study: none vs individual vs joint vs pooled.

Fixed-budget base models on noisy blobs, calibrated under shared and
overlapping holdouts across validation percentages.

    python scripts/run_temp_scaling.py [out_dir]
"""

import sys

from enstune.config import load_config
from enstune.experiments import run_experiment

OUT = sys.argv[1] if len(sys.argv) > 1 else "runs/temp_scaling"

cfg = load_config(None, [
    "task.kind=blobs", "task.n=2000", "task.classes=4", "task.noise=0.8",
    "task.label_noise=0.15", "task.test_fraction=0.2",
    "model.hidden=[64]",
    "ensemble.members=4",
    "optimizer.kind=sgd_momentum", "optimizer.lr=0.1",
    "stopping.max_epochs=60", "stopping.batch_size=128",
    "experiment.kind=temp_scale",
    "experiment.seeds=[0,1,2,3,4,5,6,7,8,9]",
    'experiment.strategies=["shared","overlapping"]',
    'experiment.modes=["none","individual","joint","pool"]',
    "experiment.val_pcts=[0.02,0.05,0.1,0.2]",
    f"experiment.out_dir={OUT}",
])

manifest = run_experiment(cfg)
print(f"aggregates: {manifest['outputs']['aggregate']}")
