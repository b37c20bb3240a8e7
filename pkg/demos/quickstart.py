"""Train a small HeMIS model on phantoms and sweep every modality subset.

Runs in under a minute on one core. Sizes are reduced so the
numbers are rough; the acceptance suite runs the full 200-case version.

    python demos/quickstart.py
"""
import logging

import numpy as np

from hemis import HemisConfig, all_subsets, init_params, make_rng
from hemis.data import generate_cases
from hemis.evaluation import report_markdown, sweep_subsets
from hemis.training import TrainConfig, train

logging.basicConfig(level=logging.INFO, format="%(message)s")

cases, splits, _ = generate_cases(60, seed=1, height=48, width=48)
by_id = {c.case_id: c for c in cases}
train_cases = [by_id[i] for i in splits["train"]]
valid_cases = [by_id[i] for i in splits["valid"]]
test_cases = [by_id[i] for i in splits["test"]]
print(f"{len(train_cases)} train / {len(valid_cases)} valid / {len(test_cases)} test phantoms")

params = init_params(HemisConfig(f1=8, f2=8, f3=8, kernel_size=3), make_rng(0))
config = TrainConfig(learning_rate=0.005, warmup_epochs=2, max_epochs=12, finetune_epochs=3,
                     patience=6, patch_size=13, batch_size=64, batches_per_epoch=20, per_case_masks=True)
result = train(params, train_cases, valid_cases, config)
print(f"best epoch {result.best_epoch}, validation CE {result.best_valid_loss:.3f}")

# HeMIS alone: no imputation, just a different set of back ends feeding the fusion
report = sweep_subsets(result.params, None, None, test_cases)
print(report_markdown(report))

sizes = {n: np.mean([report.value(m, "Complete", "HeMIS") for m in all_subsets(4) if len(m) == n])
         for n in (1, 2, 3, 4)}
for n, dsc in sizes.items():
    print(f"mean Complete DSC with {n} modalities: {dsc:.1f}")
