"""Score a trained model with Neural Cleanse and STRIP.

Expects a run directory produced by demos/02_exclusivity.py (or ``backdoor-excl train``).

Run: python demos/03_defenses.py demo_out/vanilla [--nc-epochs 40]
"""

# %%
import argparse
import json
from pathlib import Path

import torch

from backdoor_excl.experiment import ExperimentConfig, stage_nc, stage_strip

parser = argparse.ArgumentParser()
parser.add_argument("run_dir")
parser.add_argument("--nc-epochs", type=int, default=40)
args = parser.parse_args()
torch.set_num_threads(1)
run = Path(args.run_dir)

# %% Rebuild the exact config the model was trained with, then shorten the NC budget for a demo.
doc = json.loads((run / "run.json").read_text())["config"]
doc["defense"]["nc"]["opt_epochs"] = args.nc_epochs
doc["defense"]["nc"]["export_images"] = True
cfg = ExperimentConfig.from_dict(doc)

# %% Neural Cleanse reverses a minimal trigger per class; a backdoored class stands out as a small-norm outlier.
_, nc = stage_nc(cfg, checkpoint=run / "checkpoint.npz", out_dir=run)
print("NC l1 norms per class:", [round(n, 2) for n in nc.l1_norms])
print(f"NC anomaly index {nc.anomaly_index:.2f} (flagged: {nc.flagged}); smallest class {nc.min_class}")
print("reversed triggers saved under", run / "nc_triggers")

# %% STRIP blends each input with clean images; a trigger that survives blending gives low entropy.
_, st = stage_strip(cfg, checkpoint=run / "checkpoint.npz", out_dir=run)
print(f"STRIP clean entropy p1 {st.clean_percentiles['1']:.2f}, triggered p99 {st.trigger_percentiles['99']:.2f}")
print(f"STRIP histogram overlap {st.overlap:.3f} (0 = perfectly separable)")
