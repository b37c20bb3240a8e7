"""What the abstraction layer sees for different modality subsets.

Pushes one phantom through the per-modality back ends of an untrained
model and prints the fused mean/variance statistics. The front end only
ever receives these two stacks, whatever subset is available.

    python demos/fusion_by_hand.py
"""
import numpy as np

from hemis import HemisConfig, ModalityMask, fuse, init_params, make_rng
from hemis.data import generate_case, normalize_case
from hemis.model import backend_forward, model_forward

case = normalize_case(generate_case(make_rng(3), 48, 48))
params = init_params(HemisConfig(f1=4, f2=4, f3=4, kernel_size=3), make_rng(0))

for names in (["F"], ["F", "T2"], ["T1", "T1c", "T2"], ["F", "T1", "T1c", "T2"]):
    mask = ModalityMask.from_names(names, case.modality_names)
    stacks = backend_forward(case.images, mask, params)
    moments = fuse(stacks)
    print(f"{'+'.join(names):>14}: |K|={len(mask)}  mean of mean {moments.mean.mean():.4f}  "
          f"mean of var {moments.var.mean():.4f}")

# presentation order does not matter: stacks are summed in modality order
mask = ModalityMask.from_names(["T2", "F", "T1c"], case.modality_names)
stacks = backend_forward(case.images, mask, params)
a = fuse(stacks)
b = fuse({k: stacks[k] for k in reversed(sorted(stacks))})
print("reordered stacks give identical moments:", np.array_equal(a.mean, b.mean) and np.array_equal(a.var, b.var))

probs = model_forward(case.images, mask, params)
print("class posteriors sum to one:", np.allclose(probs.sum(axis=0), 1, atol=1e-6))
