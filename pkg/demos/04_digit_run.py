"""One seed of the 5-task digit run, merged adapters with a unified head.

Takes about a minute on one core.
"""
# %%
import os
from pathlib import Path

import numpy as np

from adaptmerge.cli import plot_confusion, plot_curves
from adaptmerge.config import load_config, shipped_config
from adaptmerge.pipeline import run_experiment

out = Path(os.environ.get("ADAPTMERGE_OUT", "runs")) / "demo-digits"
cfg = load_config(shipped_config("desk-digit-5x2"))
report = run_experiment(cfg, out, overwrite=True)

# %%
print("class order:", report.class_order)
for t, row in enumerate(report.accuracy_matrix, start=1):
    print(f"after task {t}: overall {report.record.accuracies[t - 1]:5.1f}   per task",
          " ".join(f"{a:5.1f}" for a in row))
print(f"average {report.average_accuracy:.2f}  last {report.last_accuracy:.2f}")

# %%
# The first task keeps most of its accuracy: its adapters stay inside the
# merged mean and its classes come back through the buffer at every head fit.
first = [row[0] for row in report.accuracy_matrix]
print("first task over time:", np.round(first, 1).tolist())

# %%
plot_curves([out]).savefig(out / "accuracy.svg")
plot_confusion(out / "confusion_5.csv").savefig(out / "confusion_5.svg")
print("figures in", out)
