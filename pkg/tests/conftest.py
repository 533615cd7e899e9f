import numpy as np
import pytest

from lord.policy import ModelConfig


def tiny_config(policy="structured-unrolled", **kw) -> ModelConfig:
    base = dict(H=3, T=5, A_max=2, M=2, d_z=6, L=5, agent_hidden=5, lane_hidden=4,
                fusion_hidden=6, head_hidden=5, policy=policy)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict = {}


@pytest.fixture
def criterion():
    """Record one acceptance line; the summary is printed at the end of the run."""
    def record(n: int, ok: bool, detail: str = "") -> bool:
        _CRITERIA[n] = (bool(ok), detail)
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def tiny_datasets():
    from lord.domains import id_domain, make_dataset, ood_domain

    cfg = tiny_config()
    out = {"cfg": cfg}
    for name, dom in (("id", id_domain()), ("ood", ood_domain())):
        for split, n in (("train", 6), ("val", 2), ("test", 2)):
            out[f"{name}_{split}"] = make_dataset(dom, n, 4, 0, cfg, split=split)
    return out
