import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lord import autodiff as ad
from lord.checkpoint import CheckpointError, load_checkpoint, save_checkpoint, split_adapters
from lord.errors import ContractError
from lord.optim import AdamState, adam_step, clip_by_global_norm, global_norm


def test_square_gradient():
    x = ad.Parameter(3.0, "x")
    assert ad.backward(x * x)["x"] == pytest.approx(6.0, abs=0)


def test_constant_root_gives_zero_gradients():
    x = ad.Parameter(np.ones(3), "x")
    g = ad.backward(ad.Tensor(5.0), [x])
    assert np.array_equal(g["x"], np.zeros(3))


def test_non_scalar_root_rejected():
    x = ad.Parameter(np.ones(3), "x")
    with pytest.raises(ContractError):
        ad.backward(x * 2.0)


def test_constants_get_no_entry():
    x = ad.Parameter(2.0, "x")
    c = ad.Tensor(4.0)
    g = ad.backward(x * c)
    assert set(g) == {"x"}


def _three_layer(seed):
    rng = np.random.default_rng(seed)
    arrs = {"W0": rng.normal(size=(4, 5)), "b0": rng.normal(size=5),
            "W1": rng.normal(size=(5, 3)), "b1": rng.normal(size=3),
            "W2": rng.normal(size=(3, 1)), "b2": rng.normal(size=1)}
    x = rng.normal(size=(6, 4))

    def loss():
        P = {k: ad.Parameter(v, k) for k, v in arrs.items()}
        h = ad.tanh(x @ P["W0"] + P["b0"])
        h = ad.softplus(h @ P["W1"] + P["b1"]) * ad.exp(-ad.square(h @ P["W1"]) * 0.1)
        y = h @ P["W2"] + P["b2"]
        return ad.logsumexp(ad.reshape(y, (1, 6)), axis=-1).sum() + (y * y).mean()

    return arrs, loss


@pytest.mark.parametrize("seed", range(5))
def test_three_layer_net_matches_finite_differences(seed):
    arrs, loss = _three_layer(seed)
    g = ad.backward(loss())
    for name, arr in arrs.items():
        for idx in np.ndindex(arr.shape):
            num = ad.numeric_grad(lambda: float(loss().value), arr, idx)
            assert ad.relative_error(g[name][idx], num) < 1e-4, (name, idx)


OPS = {
    "mul": lambda a, b: a * b, "div": lambda a, b: a / (ad.square(b) + 1.0),
    "sub": lambda a, b: a - b, "tanh": lambda a, b: ad.tanh(a) * b,
    "relu": lambda a, b: ad.relu(a) + b, "abs": lambda a, b: ad.tabs(a) * b,
    "max": lambda a, b: ad.maximum(a, b), "min": lambda a, b: ad.minimum(a, b),
    "sqrt": lambda a, b: ad.sqrt(ad.square(a) + 1.0) * b,
    "log": lambda a, b: ad.log(ad.exp(a) + 1.0) - b,
    "softmax": lambda a, b: ad.softmax(a, axis=-1) * b,
    "logsoftmax": lambda a, b: ad.log_softmax(a * b, axis=0),
    "matmul": lambda a, b: a @ ad.swapaxes(b, 0, 1),
    "concat": lambda a, b: ad.concat([a, b], axis=1)[:, 1:4],
    "stack": lambda a, b: ad.stack([a, b], axis=0).mean(axis=0),
    "broadcast": lambda a, b: a + ad.expand_dims(b.sum(axis=1), 1),
    "power": lambda a, b: ad.power(ad.square(a) + 0.5, 1.5) * b,
    "getitem": lambda a, b: a[np.array([0, 0, 2])] * b[1],
}


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), ops=st.lists(st.sampled_from(sorted(OPS)), min_size=1, max_size=4))
def test_random_graphs_match_finite_differences(seed, ops):
    rng = np.random.default_rng(seed)
    arrs = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 4))}

    def loss():
        a, b = ad.Parameter(arrs["a"], "a"), ad.Parameter(arrs["b"], "b")
        x = a
        for op in ops:
            y = OPS[op](x, b)
            x = y if y.shape == (3, 4) else ad.broadcast_to(y.sum(), (3, 4)) * a
        return (x * ad.Tensor(np.linspace(-1, 1, 12).reshape(3, 4))).sum()

    g = ad.backward(loss(), [ad.Parameter(arrs["a"], "a"), ad.Parameter(arrs["b"], "b")])
    for name, arr in arrs.items():
        for idx in np.ndindex(arr.shape):
            num = ad.numeric_grad(lambda: float(loss().value), arr, idx)
            assert ad.relative_error(g[name][idx], num) < 1e-4, (ops, name, idx)


def test_determinism_is_bitwise():
    arrs, loss = _three_layer(7)
    a, b = loss(), loss()
    assert a.value.tobytes() == b.value.tobytes()
    ga, gb = ad.backward(a), ad.backward(b)
    assert all(ga[k].tobytes() == gb[k].tobytes() for k in ga)


# ------------------------------------------------------------------ dropout

def test_dropout_identities():
    x = ad.Tensor(np.arange(6.0))
    assert ad.dropout(x, 0.0, 1, True) is x
    assert np.array_equal(ad.dropout(x, 0.7, 1, False).value, x.value)


def test_dropout_rejects_p_one():
    with pytest.raises(ContractError):
        ad.dropout(ad.Tensor(np.ones(2)), 1.0, 0, True)


def test_dropout_is_unbiased():
    x = np.array([1.0, -2.0, 3.5, 0.25])
    draws = np.stack([ad.dropout(ad.Tensor(x), 0.5, s, True).value for s in range(100_000)])
    assert np.all(np.abs(draws.mean(axis=0) - x) <= 0.02 * np.abs(x))


def test_dropout_mask_depends_only_on_seed():
    x = ad.Tensor(np.ones(50))
    assert np.array_equal(ad.dropout(x, 0.3, 9, True).value, ad.dropout(x, 0.3, 9, True).value)
    assert not np.array_equal(ad.dropout(x, 0.3, 9, True).value, ad.dropout(x, 0.3, 10, True).value)


# --------------------------------------------------------------------- adam

def test_adam_zero_gradient_is_fixed_point():
    p = {"w": np.array([1.0, -2.0])}
    out, _ = adam_step(p, {"w": np.zeros(2)}, AdamState())
    assert np.array_equal(out["w"], p["w"])


def test_adam_first_step_hand_value():
    out, st = adam_step({"w": np.array(0.0)}, {"w": np.array(1.0)},
                        AdamState(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=None))
    # m_hat = 1, v_hat = 1  ->  delta = -0.1 / (1 + 1e-8)
    assert float(out["w"]) == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)
    assert st.step == 1


def test_clipping_to_unit_norm():
    g = {"a": np.array([6.0, 0.0]), "b": np.array([0.0, 8.0])}
    assert global_norm(clip_by_global_norm(g, 1.0)) == pytest.approx(1.0, rel=1e-12)


def test_adam_nan_names_parameter():
    with pytest.raises(FloatingPointError, match="'bad'"):
        adam_step({"ok": np.zeros(1), "bad": np.zeros(2)},
                  {"ok": np.zeros(1), "bad": np.array([0.0, np.nan])}, AdamState())


def test_adam_leaves_absent_parameters_alone():
    p = {"a": np.ones(2), "b": np.ones(2)}
    out, _ = adam_step(p, {"a": np.ones(2)}, AdamState())
    assert out["b"] is p["b"]


# --------------------------------------------------------------- checkpoint

def test_checkpoint_round_trip(tmp_path):
    t = {"enc.W": np.arange(12.0).reshape(3, 4), "s": np.array(2.5), "adapter/Goals/B": np.zeros((2, 1))}
    save_checkpoint(tmp_path / "m.ckpt", t, {"config_hash": "abc"})
    back, meta = load_checkpoint(tmp_path / "m.ckpt", {k: v.shape for k, v in t.items()})
    assert meta == {"config_hash": "abc"}
    assert all(np.array_equal(back[k], t[k]) for k in t)
    base, adp = split_adapters(back)
    assert set(adp) == {"adapter/Goals/B"} and set(base) == {"enc.W", "s"}


def test_checkpoint_shape_validation(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", {"w": np.zeros((2, 3))})
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(tmp_path / "m.ckpt", {"w": (3, 2)})
    with pytest.raises(CheckpointError, match="missing"):
        load_checkpoint(tmp_path / "m.ckpt", {"w": (2, 3), "v": (1,)})


def test_checkpoint_header_layout(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", {"a": np.ones(2), "b": np.ones((1, 3))})
    raw = (tmp_path / "m.ckpt").read_bytes()
    head = raw[:raw.index(b"\nend\n")].decode().splitlines()
    assert head == ["LORD-CKPT 1", "tensor a 2 0", "tensor b 1x3 16"]
    assert len(raw) - raw.index(b"\nend\n") - 5 == 5 * 8
