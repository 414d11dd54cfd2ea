"""
A small disentanglement ablation
================================

Runs no-disentanglement (I), no refinement (IV) and the full model (VIII) on
the confusable dataset (pairwise class cosine 0.7, noise 0.3) and prints a
table.  Pass a larger iteration count as the first argument for a closer look;
the default keeps it to a couple of minutes.
"""

import sys

from salseg.core import PipelineConfig
from salseg.encoders import DatasetSpec
from salseg.training import TrainConfig, rows_to_csv, run_ablation

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 150
data = DatasetSpec(n_scenes=32, fg_confusability=0.7, noise_sigma=0.3)
held_out = DatasetSpec(n_scenes=32, fg_confusability=0.7, noise_sigma=0.3, seed=100)

rows = run_ablation("disentanglement", PipelineConfig(), data, TrainConfig(total_iters=iters),
                    seeds=(0, 1), eval_data=held_out, variants=["I", "IV", "VIII"])

###############################################################################
# Same rows as the CLI's ``ablate`` CSV.
print(rows_to_csv(rows))
for r in rows:
    print(f"{r['variant']:>5} {r['description']:<22} mIoU {r['mIoU_mean']:.4f}")
