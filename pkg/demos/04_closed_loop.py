"""Drive the scripted expert and a do-nothing policy through the simulator.

Run: python demos/04_closed_loop.py
"""
import numpy as np

from lord.domains import DomainConfig, id_domain, ood_domain, sample_scenario
from lord.evaluation import ExpertPolicy, StationaryPolicy, closed_loop_episode, closed_loop_eval
from lord.policy import ModelConfig

cfg = ModelConfig()
for dom in (id_domain(), ood_domain()):
    scen = [sample_scenario(dom, s, cfg.A_max, s) for s in range(10)]
    for mode in ("reactive", "nonreactive"):
        r = closed_loop_eval(ExpertPolicy(cfg), scen, mode, cfg=cfg)
        print(f"expert  {dom.name:4s} {mode:12s} score {r['score']:.3f}  "
              f"progress {r['progress']:.3f}  collisions {r['collision_rate']:.2f}")

empty = DomainConfig(lam=0.0)
ep = closed_loop_episode(StationaryPolicy(cfg), sample_scenario(empty, 0), "reactive", cfg=cfg)
print(f"stationary on an empty road: score {ep.metrics.score:.3f}, "
      f"progress {ep.metrics.progress:.3f}")

ep = closed_loop_episode(ExpertPolicy(cfg), sample_scenario(id_domain(), 0), "reactive", cfg=cfg)
ep.write_trace("expert_trace.csv")
print(f"trace of {len(ep.times)} steps written to expert_trace.csv; "
      f"final ego speed {ep.states[-1, 0, 3]:.2f} m/s")
