"""Experiment driver.

    lord gen-data   -c exp.ini
    lord train-base -c exp.ini
    lord finetune   -c exp.ini --strategy FtLord --data-mode "Mix(0.25)"
    lord eval-ol    -c exp.ini
    lord eval-cl    -c exp.ini
    lord ablate     -c exp.ini
    lord report     -c exp.ini

Every value in the config file can be overridden with ``--set section.key=value``.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .adapters import FineTuneStrategy, Strategy, build_adapters, overhead
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .domains import (DOMAINS, Dataset, domain_statistics, make_dataset, read_dataset,
                      sample_scenario, scenario_seed, write_dataset)
from .errors import ConfigError, ContractError, DataError, NumericalError
from .evaluation import (EpisodeConfig, ModelPolicy, closed_loop_eval, cross_domain_report,
                         open_loop_eval)
from .planner import PlannerConfig
from .policy import ModelConfig, PolicyModel, init_params, param_shapes
from .svg import line_chart
from .training import LossConfig, TrainRun, load_run, materialize, parse_data_mode, save_run, train

DEFAULT_CONFIG = """
[experiment]
out_dir = runs/default
master_seed = 0

[domains]
id = id
ood = ood
n_train = 120
n_val = 20
n_test = 30
samples_per_scenario = 8

[model]
policy = structured-unrolled
H = 10
T = 20
A_max = 4
M = 6
d_z = 64
L = 20
dt = 0.2
agent_hidden = 64
lane_hidden = 64
fusion_hidden = 128
head_hidden = 128

[planner]
accel_set = -4, -2, -1, 0, 1, 2
lateral_set = -1, -0.5, 0, 0.5, 1
v_max = 20
temperature = 1.0
unroll_steps = 10
step_size = 0.05

[train]
steps = 2000
batch_size = 32
lr = 1e-3
eval_every = 100
seed = 0
w_prog = 0
w_coll = 0
p_hist = 0

[finetune]
strategies = FullFT, PartialFT, MosaF, MosaAF, ParallelAdapter, FtLord
data_modes = OOD, Mix(0.25)
seeds = 0
steps = 300
lr = 3e-4
rank = 4
p_drop = 0.1
alphas = 0, 0.25, 0.5, 1.0
ablation_attachments = CostWeights+Goals+InitTrajectory, CostWeights+InitTrajectory, Goals+InitTrajectory, CostWeights+Goals+InitTrajectory:full, FinalOutput

[eval]
episodes = 50
modes = reactive, nonreactive
miss_threshold = 3.6
replan_every = 2
duration = 15
"""


# ------------------------------------------------------------------ config

@dataclass
class Experiment:
    cp: configparser.ConfigParser
    force: bool = False

    @property
    def hash(self) -> str:
        buf = io.StringIO()
        for sec in sorted(self.cp.sections()):
            for k, v in sorted(self.cp[sec].items()):
                buf.write(f"{sec}.{k}={v}\n")
        return hashlib.sha256(buf.getvalue().encode()).hexdigest()[:16]

    def get(self, sec, key, typ=str):
        try:
            raw = self.cp[sec][key]
        except KeyError:
            raise ConfigError(f"missing config value {sec}.{key}") from None
        try:
            return typ(raw)
        except ValueError:
            raise ConfigError(f"config value {sec}.{key}={raw!r} is not a valid {typ.__name__}") from None

    def list(self, sec, key) -> list:
        return [x.strip() for x in self.get(sec, key).split(",") if x.strip()]

    @property
    def out(self) -> Path:
        return Path(self.get("experiment", "out_dir"))

    @property
    def seed(self) -> int:
        return self.get("experiment", "master_seed", int)

    def provenance(self) -> dict:
        return {"config_hash": self.hash, "master_seed": self.seed}

    def model_config(self) -> ModelConfig:
        m = self.cp["model"]
        ints = ("H", "T", "A_max", "M", "d_z", "L", "agent_hidden", "lane_hidden", "fusion_hidden",
                "head_hidden")
        kw = {}
        for f in fields(ModelConfig):
            if f.name.lower() in m:
                typ = int if f.name in ints else float if f.name in ("dt", "pos_scale", "speed_scale") else str
                kw[f.name] = self.get("model", f.name.lower(), typ)
        p = self.cp["planner"]
        floats = lambda k: tuple(float(x) for x in p[k].split(","))
        try:
            kw["planner"] = PlannerConfig(
                accel_set=floats("accel_set"), lateral_set=floats("lateral_set"),
                v_max=float(p.get("v_max", 20)), temperature=float(p.get("temperature", 1.0)),
                unroll_steps=int(p.get("unroll_steps", 10)), step_size=float(p.get("step_size", 0.05)))
        except (KeyError, ValueError) as e:
            raise ConfigError(f"bad planner section: {e}") from None
        return ModelConfig(**kw)

    def domain(self, which: str):
        name = self.get("domains", which)
        if name not in DOMAINS:
            raise ConfigError(f"unknown domain {name!r}; choose from {sorted(DOMAINS)}")
        return DOMAINS[name]()

    def loss(self) -> LossConfig:
        t = self.cp["train"]
        return LossConfig(w_prog=float(t.get("w_prog", 0)), w_coll=float(t.get("w_coll", 0)),
                          p_hist=float(t.get("p_hist", 0)))

    # ------------------------------------------------------------ paths
    def data_path(self, dom: str, split: str) -> Path:
        return self.out / "data" / f"{dom}_{split}.lds"

    def ckpt_dir(self) -> Path:
        return self.out / "checkpoints"

    def ensure_free(self, *paths) -> None:
        taken = [str(p) for p in paths if Path(p).exists()]
        if taken and not self.force:
            raise ConfigError("refusing to overwrite existing outputs (use --force): " + ", ".join(taken))


def load_config(path, overrides=(), force=False) -> Experiment:
    cp = configparser.ConfigParser()
    cp.optionxform = str.lower
    cp.read_string(DEFAULT_CONFIG)
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"config file {path} not found")
        try:
            cp.read(path)
        except configparser.Error as e:
            raise ConfigError(f"cannot parse {path}: {e}") from None
    for ov in overrides:
        key, eq, val = ov.partition("=")
        sec, dot, name = key.partition(".")
        if not eq or not dot:
            raise ConfigError(f"override {ov!r} must look like section.key=value")
        if not cp.has_section(sec):
            raise ConfigError(f"unknown config section {sec!r}")
        cp[sec][name.lower()] = val
    return Experiment(cp, force)


# ------------------------------------------------------------------ helpers

def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _write_csv(path: Path, header: list, rows: list, exp: Experiment) -> None:
    buf = io.StringIO()
    buf.write(f"# config_hash={exp.hash} master_seed={exp.seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    _write_text(path, buf.getvalue())


def _load_data(exp: Experiment, cfg: ModelConfig, dom: str, split: str) -> Dataset:
    p = exp.data_path(dom, split)
    if not p.exists():
        raise DataError(f"dataset {p} missing; run gen-data first")
    return read_dataset(p, cfg)


def _datasets(exp, cfg, need=("id_train", "id_val", "ood_train", "ood_val")) -> dict:
    return {k: _load_data(exp, cfg, *k.split("_")) for k in need}


def _base_model(exp: Experiment, cfg: ModelConfig, kind: str) -> PolicyModel:
    p = exp.ckpt_dir() / f"base.{kind}.ckpt"
    if not p.exists():
        rule = ("open-loop evaluation and fine-tuning use the best-validation checkpoint"
                if kind == "best" else "closed-loop evaluation uses the final checkpoint")
        raise DataError(f"missing {p} ({rule}); run train-base first")
    tensors, _ = load_checkpoint(p, param_shapes(cfg))
    return PolicyModel(cfg, tensors)


# ----------------------------------------------------------------- commands

def cmd_gen_data(exp: Experiment) -> int:
    cfg = exp.model_config()
    splits = {"train": exp.get("domains", "n_train", int), "val": exp.get("domains", "n_val", int),
              "test": exp.get("domains", "n_test", int)}
    per = exp.get("domains", "samples_per_scenario", int)
    targets = [exp.data_path(d, s) for d in ("id", "ood") for s in splits]
    stats_path = exp.out / "reports" / "domain_statistics.json"
    exp.ensure_free(*targets, stats_path)
    (exp.out / "data").mkdir(parents=True, exist_ok=True)
    report = {**exp.provenance()}
    for which in ("id", "ood"):
        dom = exp.domain(which)
        for split, n in splits.items():
            ds = make_dataset(dom, n, per, exp.seed, cfg, split=split)
            ds.meta["config_hash"] = exp.hash
            write_dataset(exp.data_path(which, split), ds, cfg)
            print(f"wrote {exp.data_path(which, split)} ({len(ds)} windows)")
            if split == "train" and len(ds):
                st = domain_statistics(ds)
                report[which] = {"samples": st.n_samples, "mean_speed": st.mean_speed,
                                 "mean_agent_count": st.mean_agent_count,
                                 "mean_nearest_distance": st.mean_nearest_distance,
                                 "speed_hist": st.speed_hist[0].tolist(),
                                 "count_hist": st.count_hist[0].tolist(),
                                 "distance_hist": st.distance_hist[0].tolist()}
                print(f"[{which}]\n{st.table()}")
    _write_text(stats_path, json.dumps(report, indent=2, sort_keys=True) + "\n")
    return 0


def _train_run(exp: Experiment, section: str, **kw) -> TrainRun:
    s = exp.cp[section]
    base = dict(steps=int(s["steps"]), lr=float(s["lr"]), loss=exp.loss(),
                batch_size=exp.get("train", "batch_size", int),
                eval_every=exp.get("train", "eval_every", int))
    base.update(kw)
    return TrainRun(**base)


def cmd_train_base(exp: Experiment) -> int:
    cfg = exp.model_config()
    ck = exp.ckpt_dir()
    finals = [ck / "base.final.ckpt", ck / "base.best.ckpt"]
    exp.ensure_free(*finals)
    data = _datasets(exp, cfg, ("id_train", "id_val"))
    seed = exp.get("train", "seed", int)
    model = PolicyModel.create(cfg, seed)
    run = _train_run(exp, "train", strategy="FullFT", data_mode="ID", seed=seed)
    ck.mkdir(parents=True, exist_ok=True)
    (exp.out / "logs").mkdir(parents=True, exist_ok=True)
    res = train(run, model, data, adapters={}, log_path=exp.out / "logs" / "base.csv")
    meta = {**exp.provenance(), "seed": seed, "steps": run.steps}
    save_checkpoint(finals[0], res.final, {**meta, "kind": "final"})
    save_checkpoint(finals[1], res.best, {**meta, "kind": "best", "best_step": res.best_step})
    for step, ade in res.val_history:
        print(f"step {step:6d}  val ADE {ade:.4f}")
    print(f"saved {finals[0]} and {finals[1]} (best step {res.best_step})")
    return 0


def _finetune_one(exp, cfg, base: PolicyModel, data, strategy: str, mode: str, seed: int,
                  out_dir: Path, **kw):
    FineTuneStrategy.parse(strategy)
    parse_data_mode(mode)
    run = _train_run(exp, "finetune", strategy=strategy, data_mode=mode, seed=seed,
                     rank=exp.get("finetune", "rank", int), p_drop=exp.get("finetune", "p_drop", float),
                     **kw)
    tag = run.tag()
    exp.ensure_free(out_dir / f"{tag}.final.ckpt", out_dir / f"{tag}.best.ckpt")
    out_dir.mkdir(parents=True, exist_ok=True)
    log_dir = exp.out / "logs"
    log_dir.mkdir(parents=True, exist_ok=True)
    res = train(run, base, data, out_dir=None, log_path=log_dir / f"{tag}.csv")
    meta = {**exp.provenance(), "strategy": strategy, "data_mode": mode, "seed": seed,
            "rank": run.rank, "p_drop": run.p_drop, "steps": run.steps, "base_kind": "best"}
    save_run(out_dir / f"{tag}.final.ckpt", res.final, res.mask, {**meta, "kind": "final"})
    save_run(out_dir / f"{tag}.best.ckpt", res.best, res.mask,
             {**meta, "kind": "best", "best_step": res.best_step})
    print(f"{tag}: best step {res.best_step}, adapters "
          f"{[a.value for a in res.adapters]}, saved under {out_dir}")
    return tag, res


def cmd_finetune(exp: Experiment, strategies=None, modes=None) -> int:
    cfg = exp.model_config()
    strategies = strategies or exp.list("finetune", "strategies")
    modes = modes or exp.list("finetune", "data_modes")
    seeds = [int(s) for s in exp.list("finetune", "seeds")]
    # validate the whole grid before any training starts
    for s in strategies:
        st = FineTuneStrategy.parse(s)
        build_adapters(cfg, st, exp.get("finetune", "rank", int), exp.get("finetune", "p_drop", float))
    for m in modes:
        parse_data_mode(m)
    base = _base_model(exp, cfg, "best")
    need = {"ood_train", "ood_val"}
    if any(parse_data_mode(m) is None or parse_data_mode(m) > 0 for m in modes):
        need |= {"id_train", "id_val"}
    data = _datasets(exp, cfg, tuple(sorted(need)))
    for s in strategies:
        for m in modes:
            for seed in seeds:
                _finetune_one(exp, cfg, base, data, s, m, seed, exp.ckpt_dir() / "ft")
    return 0


def _load_ft(exp: Experiment, cfg: ModelConfig, path: Path):
    """A fine-tuned run over the base checkpoint it was trained from."""
    _, meta = load_checkpoint(path)
    base = _base_model(exp, cfg, meta.get("base_kind", "best"))
    return load_run(path, base)


def _runs(exp: Experiment, kind: str) -> list:
    d = exp.ckpt_dir() / "ft"
    return sorted(d.glob(f"*.{kind}.ckpt")) if d.exists() else []


def _eval_hash(exp: Experiment, extra: str) -> str:
    return hashlib.sha256(f"{exp.hash}/{extra}".encode()).hexdigest()[:16]


def _ol(model, adapters, data, thr) -> dict:
    return open_loop_eval(model, data, adapters, miss_threshold=thr).as_dict()


def cmd_eval_ol(exp: Experiment) -> int:
    exp.ensure_free(*(exp.out / "reports" / f"eval_ol.{x}" for x in ("csv", "json")))
    cfg = exp.model_config()
    thr = exp.get("eval", "miss_threshold", float)
    tests = {d: _load_data(exp, cfg, d, "test") for d in ("id", "ood")}
    base = _base_model(exp, cfg, "best")
    h = _eval_hash(exp, "ol")
    base_res = {"eval_hash": h, **{d: _ol(base, {}, tests[d], thr) for d in tests}}
    for d in tests:
        base_res[d].pop("n")
    results = {"base": (base_res, "Base", "-")}
    for path in _runs(exp, "best"):
        model, adapters, meta = _load_ft(exp, cfg, path)
        r = {"eval_hash": h, **{d: _ol(model, adapters, tests[d], thr) for d in tests}}
        for d in tests:
            r[d].pop("n")
        results[path.name[:-len(".best.ckpt")]] = (r, meta.get("strategy", "?"), meta.get("data_mode", "?"))
    _emit_reports(exp, "eval_ol", results, base_res)
    return 0


def cmd_eval_cl(exp: Experiment) -> int:
    exp.ensure_free(*(exp.out / "reports" / f"eval_cl.{x}" for x in ("csv", "json")))
    cfg = exp.model_config()
    n = exp.get("eval", "episodes", int)
    modes = exp.list("eval", "modes")
    ecfg = EpisodeConfig(duration=exp.get("eval", "duration", float),
                         replan_every=exp.get("eval", "replan_every", int), dt=cfg.dt)
    scen = {d: [sample_scenario(exp.domain(d), scenario_seed(exp.seed, "test", i), cfg.A_max, i)
                for i in range(n)] for d in ("id", "ood")}
    base = _base_model(exp, cfg, "final")
    h = _eval_hash(exp, "cl/" + ecfg.hash())

    def run(model, adapters):
        pol = ModelPolicy(model, adapters)
        out = {"eval_hash": h}
        for d, ss in scen.items():
            row = {}
            for m in modes:
                r = closed_loop_eval(pol, ss, m, ecfg, cfg)
                row[f"score_{m}"] = r["score"]
                row[f"collision_rate_{m}"] = r["collision_rate"]
                row[f"progress_{m}"] = r["progress"]
            out[d] = row
        return out

    base_res = run(base, {})
    results = {"base": (base_res, "Base", "-")}
    for path in _runs(exp, "final"):
        model, adapters, meta = _load_ft(exp, cfg, path)
        results[path.name[:-len(".final.ckpt")]] = (run(model, adapters), meta.get("strategy", "?"),
                                                    meta.get("data_mode", "?"))
    _emit_reports(exp, "eval_cl", results, base_res)
    return 0


def _emit_reports(exp, name, results: dict, base_res: dict) -> None:
    rows, summary = [], {**exp.provenance(), "runs": {}}
    for tag, (res, strategy, mode) in sorted(results.items()):
        rep = cross_domain_report(base_res, res)
        summary["runs"][tag] = json.loads(rep.to_json())
        rows.extend(rep.to_csv_rows(tag, strategy, mode, "test"))
    _write_csv(exp.out / "reports" / f"{name}.csv",
               ["method", "strategy", "data_mode", "domain", "split", "metric", "value"], rows, exp)
    _write_text(exp.out / "reports" / f"{name}.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"wrote {exp.out / 'reports' / name}.csv and .json ({len(results)} runs)")


def cmd_ablate(exp: Experiment) -> int:
    cfg = exp.model_config()
    thr = exp.get("eval", "miss_threshold", float)
    exp.ensure_free(*(exp.out / "reports" / f for f in ("ablate.csv", "ablate_alpha.svg")))
    base = _base_model(exp, cfg, "best")
    data = _datasets(exp, cfg)
    tests = {d: _load_data(exp, cfg, d, "test") for d in ("id", "ood")}
    seed = int(exp.list("finetune", "seeds")[0])
    out_dir = exp.ckpt_dir() / "ablate"
    rows = []
    alphas = [float(a) for a in exp.list("finetune", "alphas")]
    curve = {"id": [], "ood": []}
    for a in alphas:
        mode = "OOD" if a == 0 else f"Mix({a:g})"
        tag, res = _finetune_one(exp, cfg, base, data, "FtLord", mode, seed, out_dir)
        model, ads = materialize(cfg, res.best, res.adapters)
        for d in tests:
            m = _ol(model, ads, tests[d], thr)
            curve[d].append(m["ade"])
            rows.append(["alpha", f"{a:g}", d, "ade", repr(m["ade"])])
    variants = exp.cp["finetune"]["ablation_attachments"].split(",")
    for v in (x.strip() for x in variants if x.strip()):
        strat = f"FtLordVariant:{v}"
        tag, res = _finetune_one(exp, cfg, base, data, strat, "OOD", seed, out_dir)
        model, ads = materialize(cfg, res.best, res.adapters)
        added = sum(a.n_params for a in ads.values())
        for d in tests:
            m = _ol(model, ads, tests[d], thr)
            rows.append(["attachments", v, d, "ade", repr(m["ade"])])
        rows.append(["attachments", v, "-", "added_params", str(added)])
    _write_csv(exp.out / "reports" / "ablate.csv", ["sweep", "setting", "domain", "metric", "value"],
               rows, exp)
    svg = line_chart({f"{d.upper()} ADE": list(zip(alphas, curve[d])) for d in curve},
                     title=f"Added ID data ratio alpha (config {exp.hash})", xlabel="alpha",
                     ylabel="ADE [m]")
    _write_text(exp.out / "reports" / "ablate_alpha.svg", svg)
    print(f"wrote {exp.out / 'reports' / 'ablate.csv'} and ablate_alpha.svg")
    return 0


def cmd_report(exp: Experiment) -> int:
    rep = exp.out / "reports"
    exp.ensure_free(rep / "report.md", rep / "training_loss.svg")
    parts = [f"# Experiment report\n\nconfig hash `{exp.hash}`, master seed {exp.seed}\n"]
    for name in ("eval_ol", "eval_cl", "ablate"):
        p = rep / f"{name}.csv"
        if not p.exists():
            continue
        lines = [ln for ln in p.read_text().splitlines() if not ln.startswith("#")]
        rows = list(csv.reader(lines))
        parts.append(f"\n## {name}\n\n| " + " | ".join(rows[0]) + " |\n|" + "---|" * len(rows[0]) + "\n")
        for r in rows[1:]:
            parts.append("| " + " | ".join(r) + " |\n")
    logs = exp.out / "logs"
    series = {}
    for p in sorted(logs.glob("*.csv")) if logs.exists() else []:
        with open(p) as fh:
            rd = list(csv.DictReader(fh))
        pts = [(float(r["step"]), float(r["total"])) for r in rd if r["total"]]
        if pts:
            stride = max(1, len(pts) // 200)
            series[p.stem] = pts[::stride]
    if series:
        _write_text(rep / "training_loss.svg",
                    line_chart(series, title=f"training loss (config {exp.hash})", xlabel="step",
                               ylabel="loss", log_y=True))
        parts.append("\nTraining curves: `training_loss.svg`\n")
    if len(parts) == 1:
        raise DataError(f"nothing to report under {rep}")
    _write_text(rep / "report.md", "".join(parts))
    print(f"wrote {rep / 'report.md'}")
    return 0


def cmd_overhead(exp: Experiment) -> int:
    cfg = exp.model_config()
    model = PolicyModel(cfg, init_params(cfg, 0))
    ads = build_adapters(cfg, FineTuneStrategy(Strategy.FT_LORD), exp.get("finetune", "rank", int))
    o = overhead(model, ads, n_inferences=1000)
    print(f"base parameters {o.base_params}, added {o.added_params} "
          f"({100 * o.param_fraction:.3f}%), added inference time {100 * o.time_fraction:.1f}%")
    return 0


# --------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lord", description=__doc__.split("\n\n")[0],
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="INI experiment config (defaults are built in)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("--force", action="store_true", help="allow overwriting existing outputs")
    sub = ap.add_subparsers(dest="cmd", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate ID/OOD train/val/test datasets")
    sub.add_parser("train-base", parents=[common], help="train the base policy on ID data")
    ft = sub.add_parser("finetune", parents=[common], help="fine-tune the base under strategy x data mode")
    ft.add_argument("--strategy", action="append",
                    help="FullFT, PartialFT, MosaF, MosaAF, ParallelAdapter, FtLord or "
                         "FtLordVariant:<Att+Att>[:full]; repeatable (default: config list)")
    ft.add_argument("--data-mode", action="append", help="ID, OOD or Mix(alpha); repeatable")
    sub.add_parser("eval-ol", parents=[common], help="open-loop metrics (best-validation checkpoints)")
    sub.add_parser("eval-cl", parents=[common], help="closed-loop metrics (final checkpoints)")
    sub.add_parser("ablate", parents=[common], help="alpha and attachment sweeps")
    sub.add_parser("report", parents=[common], help="markdown summary and SVG training curves")
    sub.add_parser("overhead", parents=[common], help="parameter and runtime overhead of LoRD")
    sub.add_parser("show-config", parents=[common], help="print the effective config and its hash")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        exp = load_config(args.config, args.set, args.force)
        if args.cmd == "show-config":
            buf = io.StringIO()
            exp.cp.write(buf)
            print(f"# config_hash={exp.hash}\n{buf.getvalue()}", end="")
            return 0
        if args.cmd == "finetune":
            return cmd_finetune(exp, args.strategy, args.data_mode)
        return {"gen-data": cmd_gen_data, "train-base": cmd_train_base, "eval-ol": cmd_eval_ol,
                "eval-cl": cmd_eval_cl, "ablate": cmd_ablate, "report": cmd_report,
                "overhead": cmd_overhead}[args.cmd](exp)
    except (ConfigError, ContractError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except (NumericalError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
