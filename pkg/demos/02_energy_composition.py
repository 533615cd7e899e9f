"""Residual energies compose with the base cost as a product of experts.

Run: python demos/02_energy_composition.py
"""
import numpy as np

from lord.planner import (EnergyTable, PlanContext, LaneFrame, compose_energy, cost_features,
                          energy, generate_candidates, gibbs_probs, select_argmin)
from lord.planner import FEATURE_NAMES

lane = np.stack([np.linspace(-20, 200, 45), np.zeros(45)], axis=1)
cands = generate_candidates((0.0, 0.0), 10.0, lane, [-2, 0, 2], [-1, 0, 1], T=20, dt=0.2)
ctx = PlanContext(LaneFrame(lane[None]), np.array([10.0]), np.zeros((1, 2)), 0.2, 20)
phi = cost_features(cands.trajectories[None], ctx, goal=np.array([[40.0, 1.0]])).value[0]

for k in range(len(cands)):
    print(f"candidate {k}: accel {cands.accel[k]:+.0f}, lateral {cands.lateral[k]:+.1f}, "
          + ", ".join(f"{n}={v:.2f}" for n, v in zip(FEATURE_NAMES, phi[k])))

base = EnergyTable(energy(np.zeros(7), phi).value)
print("\nbase choice:", select_argmin(base)[0], " probabilities:", np.round(gibbs_probs(base), 3))

# a residual that dislikes lateral offset nudges the distribution toward the centreline
residual = EnergyTable(2.0 * phi[:, 1])
both = compose_energy(base, residual)
print("composed choice:", select_argmin(both)[0], " probabilities:", np.round(gibbs_probs(both), 3))

prod = gibbs_probs(base) * gibbs_probs(residual)
print("max gap to normalised product:", np.abs(gibbs_probs(both) - prod / prod.sum()).max())
