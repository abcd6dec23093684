"""Weight-decay grid search: single-model vs ensemble selection.

Runs the fixed-budget SGD+cosine sweep on noisy blobs, selects the weight
decay under both objectives and reports the test-NLL optimality gap.

    python scripts/run_wd_sweep.py [out_dir]
"""

import json
import sys

from enstune.config import load_config
from enstune.experiments import run_experiment

OUT = sys.argv[1] if len(sys.argv) > 1 else "runs/wd_sweep"

cfg = load_config(None, [
    "task.kind=blobs", "task.n=2000", "task.classes=4", "task.noise=0.8",
    "task.label_noise=0.15", "task.test_fraction=0.2",
    "model.hidden=[64]",
    "ensemble.members=4", "ensemble.val_pct=0.1",
    "optimizer.kind=sgd_momentum", "optimizer.lr=0.1", "optimizer.momentum=0.9",
    "stopping.max_epochs=60", "stopping.batch_size=128",
    "experiment.kind=wd_sweep",
    "experiment.seeds=[0,1,2,3,4]",
    "experiment.weight_decays=[0.0,1e-5,1e-4,1e-3,1e-2,1e-1]",
    f"experiment.out_dir={OUT}",
])

manifest = run_experiment(cfg)
print(json.dumps(manifest["summary"], indent=2))
