"""Attach freshly initialised residual decoders and confirm nothing moves.

Run: python demos/01_zero_init.py
"""
import numpy as np

from lord.adapters import FineTuneStrategy, build_adapters, overhead
from lord.policy import ModelConfig, PolicyModel, infer, random_observation

cfg = ModelConfig()
model = PolicyModel.create(cfg, seed=0)
obs = random_observation(cfg, 8, seed=1)

adapters = build_adapters(cfg, FineTuneStrategy.parse("FtLord"), rank=4, p_drop=0.1, seed=0)
print("adapter sites:", [a.value for a in adapters])

plain = infer(model, obs).plan.value
with_adapters = infer(model, obs, adapters).plan.value
print("plans bit-identical:", plain.tobytes() == with_adapters.tobytes())

# once B moves away from zero the residual starts to act
for a in adapters.values():
    a.B[:] = np.random.default_rng(0).normal(0, 0.05, a.B.shape)
moved = infer(model, obs, adapters).plan.value
print(f"after perturbing B, mean plan change {np.abs(moved - plain).mean():.4f} m")

o = overhead(model, build_adapters(cfg, FineTuneStrategy.parse("FtLord")), n_inferences=100)
print(f"added parameters: {o.added_params} of {o.base_params} ({100 * o.param_fraction:.3f}%)")
print(f"added inference time: {100 * o.time_fraction:.1f}%")
