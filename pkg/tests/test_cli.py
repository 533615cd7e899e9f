"""End-to-end runs of the command-line driver on a tiny configuration."""
import csv
import hashlib
import json
import re
import subprocess
import sys

import numpy as np
import pytest

from lord.checkpoint import load_checkpoint
from lord.cli import load_config, main
from lord.policy import init_params
from lord.training import MixtureSampler, parse_data_mode

TINY = """
[domains]
n_train = 4
n_val = 2
n_test = 2
samples_per_scenario = 3

[model]
H = 3
T = 5
A_max = 2
M = 2
d_z = 6
L = 5
agent_hidden = 5
lane_hidden = 4
fusion_hidden = 6
head_hidden = 5

[train]
steps = 60
batch_size = 8
lr = 3e-3
eval_every = 20

[finetune]
strategies = FtLord, MosaF
data_modes = OOD
steps = 6
rank = 2
alphas = 0, 0.25, 0.5, 1.0
ablation_attachments = CostWeights+Goals+InitTrajectory, CostWeights+Goals+InitTrajectory:full, FinalOutput

[eval]
episodes = 2
duration = 1.2
"""


def _cfg(tmp, name="exp"):
    p = tmp / f"{name}.ini"
    p.write_text(TINY + f"\n[experiment]\nout_dir = {tmp / name}\nmaster_seed = 3\n")
    return str(p)


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = _cfg(tmp)
    assert main(["gen-data", "-c", cfg]) == 0
    assert main(["train-base", "-c", cfg]) == 0
    return tmp, cfg, tmp / "exp"


def test_gen_data_outputs(pipeline):
    _, _, out = pipeline
    files = sorted(p.name for p in (out / "data").iterdir())
    assert files == sorted(f"{d}_{s}.lds" for d in ("id", "ood") for s in ("train", "val", "test"))
    stats = json.loads((out / "reports" / "domain_statistics.json").read_text())
    assert stats["ood"]["mean_speed"] < stats["id"]["mean_speed"]
    assert stats["master_seed"] == 3 and len(stats["config_hash"]) == 16


def test_gen_data_refuses_then_reproduces(pipeline, capsys):
    _, cfg, out = pipeline
    before = {p.name: _sha(p) for p in (out / "data").iterdir()}
    assert main(["gen-data", "-c", cfg]) == 2
    assert "refusing to overwrite" in capsys.readouterr().err
    assert main(["gen-data", "-c", cfg, "--force"]) == 0
    assert {p.name: _sha(p) for p in (out / "data").iterdir()} == before


def test_train_base_writes_both_checkpoints(pipeline):
    _, _, out = pipeline
    best, bmeta = load_checkpoint(out / "checkpoints" / "base.best.ckpt")
    final, fmeta = load_checkpoint(out / "checkpoints" / "base.final.ckpt")
    assert set(best) == set(final)
    assert bmeta["kind"] == "best" and fmeta["kind"] == "final"
    assert bmeta["config_hash"] == load_config(pipeline[1]).hash


def test_base_validation_improves(pipeline, tmp_path, capsys):
    cfg = _cfg(tmp_path)
    main(["gen-data", "-c", cfg])
    capsys.readouterr()
    assert main(["train-base", "-c", cfg]) == 0
    ades = [float(x) for x in re.findall(r"val ADE ([0-9.]+)", capsys.readouterr().out)]
    assert len(ades) == 4 and ades[-1] < ades[0]


def test_train_base_reproducible_and_zero_steps(tmp_path):
    cfgs = [_cfg(tmp_path, n) for n in ("a", "b")]
    for c in cfgs:
        assert main(["gen-data", "-c", c]) == 0
        assert main(["train-base", "-c", c, "--set", "train.steps=5", "--set", "train.eval_every=5"]) == 0
    a = load_checkpoint(tmp_path / "a" / "checkpoints" / "base.final.ckpt")[0]
    b = load_checkpoint(tmp_path / "b" / "checkpoints" / "base.final.ckpt")[0]
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    assert main(["train-base", "-c", cfgs[0], "--force", "--set", "train.steps=0"]) == 0
    z = load_checkpoint(tmp_path / "a" / "checkpoints" / "base.final.ckpt")[0]
    init = init_params(load_config(cfgs[0]).model_config(), 0)
    assert set(z) == set(init) and all(z[k].tobytes() == init[k].tobytes() for k in init)


def test_finetune_ftlord_and_mosaf(pipeline):
    _, cfg, out = pipeline
    base = out / "checkpoints" / "base.best.ckpt"
    before = _sha(base)
    assert main(["finetune", "-c", cfg]) == 0
    assert _sha(base) == before
    ft = out / "checkpoints" / "ft"
    lord, meta = load_checkpoint(ft / "FtLord_OOD_s0.best.ckpt")
    assert {k.split("/")[1] for k in lord if k.startswith("adapter/")} == {
        "CostWeights", "Goals", "InitTrajectory"}
    assert meta["has_base"] == "1"
    mosa, meta = load_checkpoint(ft / "MosaF_OOD_s0.final.ckpt")
    assert meta["has_base"] == "0"
    assert sorted(mosa) == ["adapter/EncoderFusion/A", "adapter/EncoderFusion/B"]


def test_finetune_rejects_bad_pairing_before_training(pipeline, capsys):
    _, cfg, out = pipeline
    n_before = len(list((out / "checkpoints").rglob("*.ckpt")))
    assert main(["finetune", "-c", cfg, "--strategy", "FtLord", "--strategy",
                 "FtLordVariant:EncoderFusion"]) == 2
    assert "configuration error" in capsys.readouterr().err
    assert len(list((out / "checkpoints").rglob("*.ckpt"))) == n_before


def test_mix_mode_id_fraction(tiny_datasets):
    s = MixtureSampler(tiny_datasets["id_train"], tiny_datasets["ood_train"],
                       parse_data_mode("Mix(0.25)"))
    assert s.id_fraction == pytest.approx(0.2, abs=1e-15)


def test_eval_reports(pipeline):
    _, cfg, out = pipeline
    if not (out / "checkpoints" / "ft").exists():
        assert main(["finetune", "-c", cfg]) == 0
    assert main(["eval-ol", "-c", cfg]) == 0
    csv_path = out / "reports" / "eval_ol.csv"
    first = csv_path.read_bytes()
    assert main(["eval-ol", "-c", cfg]) == 2
    assert main(["eval-ol", "-c", cfg, "--force"]) == 0
    assert csv_path.read_bytes() == first
    lines = [ln for ln in first.decode().splitlines() if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    base_domains = {r["domain"] for r in rows if r["method"] == "base"}
    assert {"ood", "average", "id"} <= base_domains
    assert {r["method"] for r in rows} >= {"base", "FtLord_OOD_s0", "MosaF_OOD_s0"}
    summary = json.loads((out / "reports" / "eval_ol.json").read_text())
    assert summary["runs"]["base"]["forgetting"]["ade"] == 0.0

    assert main(["eval-cl", "-c", cfg]) == 0
    cl = (out / "reports" / "eval_cl.csv").read_text()
    assert "score_reactive" in cl and "score_nonreactive" in cl


def test_ablate_and_report(pipeline):
    _, cfg, out = pipeline
    assert main(["ablate", "-c", cfg]) == 0
    lines = [ln for ln in (out / "reports" / "ablate.csv").read_text().splitlines()
             if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    alpha = [r for r in rows if r["sweep"] == "alpha"]
    assert sorted({r["setting"] for r in alpha}) == ["0", "0.25", "0.5", "1"]
    assert {r["domain"] for r in alpha} == {"id", "ood"}
    added = {r["setting"]: int(r["value"]) for r in rows if r["metric"] == "added_params"}
    assert "FinalOutput" in added
    assert added["CostWeights+Goals+InitTrajectory:full"] > added["CostWeights+Goals+InitTrajectory"]
    svg = (out / "reports" / "ablate_alpha.svg").read_text()
    assert svg.count("<circle") == 8

    assert main(["report", "-c", cfg]) == 0
    md = (out / "reports" / "report.md").read_text()
    assert "## ablate" in md and (out / "reports" / "training_loss.svg").exists()


def test_missing_data_exit_code(tmp_path, capsys):
    assert main(["train-base", "-c", _cfg(tmp_path)]) == 3
    assert "gen-data" in capsys.readouterr().err


def test_config_errors(tmp_path):
    cfg = _cfg(tmp_path)
    assert main(["show-config", "-c", cfg, "--set", "model.policy=nope"]) == 0
    assert main(["train-base", "-c", cfg, "--set", "model.policy=nope"]) == 2
    assert main(["gen-data", "-c", cfg, "--set", "domains.n_train=many"]) == 2
    assert main(["gen-data", "-c", cfg, "--set", "nosection.key=1"]) == 2
    assert main(["gen-data", "-c", str(tmp_path / "missing.ini")]) == 2


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "lord", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen-data", "train-base", "finetune", "eval-ol", "eval-cl", "ablate", "report"):
        assert cmd in out.stdout
