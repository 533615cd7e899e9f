"""A small forgetting experiment: train on ID, adapt to OOD, measure both.

Takes a few minutes on one CPU core.
Run: python demos/03_forgetting.py [seed]
"""
import sys
import time

from lord.domains import domain_statistics, id_domain, make_dataset, ood_domain
from lord.policy import ModelConfig, PolicyModel
from lord.training import TrainRun, materialize, plan_ade, train

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = ModelConfig()

t0 = time.perf_counter()
data = {}
for name, dom in (("id", id_domain()), ("ood", ood_domain())):
    for split, n in (("train", 80), ("val", 15), ("test", 20)):
        data[f"{name}_{split}"] = make_dataset(dom, n, 8, 0, cfg, split=split)
print(f"datasets ready in {time.perf_counter() - t0:.0f}s")
for name in ("id", "ood"):
    st = domain_statistics(data[f"{name}_train"])
    print(f"  {name}: mean speed {st.mean_speed:.1f} m/s, mean agents {st.mean_agent_count:.2f}")

base_run = train(TrainRun(steps=1500, eval_every=100, seed=seed), PolicyModel.create(cfg, seed), data)
base = PolicyModel(cfg, base_run.best)
b_id = plan_ade(base.params, cfg, data["id_test"], {})
b_ood = plan_ade(base.params, cfg, data["ood_test"], {})
print(f"base (best step {base_run.best_step}): ID ADE {b_id:.3f}  OOD ADE {b_ood:.3f}")

for strategy, mode in (("FullFT", "OOD"), ("FtLord", "OOD"), ("FullFT", "Mix(0.25)"),
                       ("FtLord", "Mix(0.25)")):
    r = train(TrainRun(strategy=strategy, data_mode=mode, steps=300, eval_every=50, lr=3e-4,
                       seed=seed), base, data)
    m, adapters = materialize(cfg, r.best, r.adapters)
    i = plan_ade(m.params, cfg, data["id_test"], adapters)
    o = plan_ade(m.params, cfg, data["ood_test"], adapters)
    print(f"{strategy:7s} {mode:10s} ID ADE {i:.3f} ({i - b_id:+.3f})  "
          f"OOD ADE {o:.3f} ({100 * (o - b_ood) / b_ood:+.0f}%)")
