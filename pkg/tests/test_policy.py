import numpy as np
import pytest

from lord import autodiff as ad
from lord.errors import ConfigError
from lord.policy import (POLICIES, ActuationLimits, ModelConfig, ObservationSeq, PolicyModel,
                         decode, encode, infer, policy_forward, random_observation,
                         rollout_kinematics)

from conftest import tiny_config


def _const(params):
    return {k: ad.Tensor(v) for k, v in params.items()}


def test_invalid_agent_rows_do_not_matter():
    cfg = tiny_config()
    m = PolicyModel.create(cfg, 0)
    obs = random_observation(cfg, 3, seed=1)
    obs.agents[:, 1, :, 4] = 0.0
    other = ObservationSeq(obs.ego, obs.agents.copy(), obs.lane, obs.target_speed)
    other.agents[:, 1, :, :4] = np.random.default_rng(2).normal(0, 50, other.agents[:, 1, :, :4].shape)
    assert np.array_equal(encode(_const(m.params), cfg, obs).value,
                          encode(_const(m.params), cfg, other).value)


def test_zero_parameters_give_constant_latent():
    cfg = tiny_config()
    zero = {k: np.zeros_like(v) for k, v in PolicyModel.create(cfg, 0).params.items()}
    a = encode(_const(zero), cfg, random_observation(cfg, 2, seed=1)).value
    b = encode(_const(zero), cfg, random_observation(cfg, 2, seed=7)).value
    assert np.array_equal(a, b)
    assert np.array_equal(a[0], a[1])


def test_encode_is_deterministic():
    cfg = tiny_config()
    m = PolicyModel.create(cfg, 3)
    obs = random_observation(cfg, 4, seed=3)
    a = encode(_const(m.params), cfg, obs, training=True, seed=9).value
    b = encode(_const(m.params), cfg, obs, training=True, seed=9).value
    assert a.tobytes() == b.tobytes()


def test_observation_shapes_validated():
    cfg = tiny_config()
    obs = random_observation(cfg, 2, seed=0)
    with pytest.raises(ConfigError):
        encode(_const(PolicyModel.create(cfg, 0).params), tiny_config(H=4), obs)


def test_single_mode_has_probability_one():
    cfg = tiny_config(M=1)
    m = PolicyModel.create(cfg, 0)
    z = encode(_const(m.params), cfg, random_observation(cfg, 3, 0))
    dec = decode(_const(m.params), cfg, z)
    assert dec.mode_logits.shape == (3, 1)
    np.testing.assert_array_equal(ad.softmax(dec.mode_logits, axis=-1).value, 1.0)


def test_decode_is_deterministic():
    cfg = tiny_config()
    m = PolicyModel.create(cfg, 2)
    z = np.random.default_rng(0).normal(size=(2, cfg.d_z))
    a, b = decode(_const(m.params), cfg, z), decode(_const(m.params), cfg, z)
    for h in cfg.heads:
        assert a._heads[h].value.tobytes() == b._heads[h].value.tobytes()


def test_zeroed_last_layer_zeroes_joint_modes():
    cfg = tiny_config()
    p = PolicyModel.create(cfg, 2).params
    p["dec.joint_modes.1.W"][:] = 0.0
    z = np.random.default_rng(0).normal(size=(2, cfg.d_z))
    jm = decode(_const(p), cfg, z).joint_modes
    assert jm.shape == (2, cfg.M, cfg.n_agents, cfg.T, 2)
    assert not jm.value.any()


def test_disabled_head_raises():
    cfg = tiny_config("unstructured")
    m = PolicyModel.create(cfg, 0)
    dec = decode(_const(m.params), cfg, np.zeros((1, cfg.d_z)))
    with pytest.raises(ConfigError):
        dec.cost_weights_raw


@pytest.mark.parametrize("policy", POLICIES)
def test_forward_shapes(policy):
    cfg = tiny_config(policy)
    res = infer(PolicyModel.create(cfg, 0), random_observation(cfg, 3, 0))
    assert res.plan.shape == (3, cfg.T, 2)
    assert np.all(np.isfinite(res.plan.value))
    if policy == "structured-sampling":
        assert res.log_probs.shape == (3, cfg.planner.n_candidates)
        np.testing.assert_allclose(np.exp(res.log_probs.value).sum(-1), 1.0, rtol=1e-12)


def test_default_parameter_counts():
    counts = {p: PolicyModel.create(ModelConfig(policy=p), 0).n_params for p in POLICIES}
    assert counts == {"structured-unrolled": 258543, "structured-sampling": 245063,
                      "unstructured": 239710}


def test_unknown_policy_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(policy="diffusion")


# ----------------------------------------------------------- kinematics

def test_constant_velocity_line():
    s, n = rollout_kinematics(np.zeros((20, 2)), (0.0, 0.0, 0.0, 10.0), 0.2)
    assert s.shape == (20, 4) and n == 0
    assert s[-1, 0] == pytest.approx(40.0, abs=1e-12)
    assert np.all(s[:, 1] == 0.0)


def test_rest_stays_at_rest():
    s, _ = rollout_kinematics(np.zeros((10, 2)), (3.0, -1.0, 0.4, 0.0), 0.2)
    np.testing.assert_array_equal(s, np.tile([3.0, -1.0, 0.4, 0.0], (10, 1)))


def test_constant_yaw_rate_traces_circle():
    v, w = 8.0, 0.4
    s, _ = rollout_kinematics(np.tile([0.0, w], (40, 1)), (0.0, 0.0, 0.0, v), 0.2, substeps=10)
    r = np.hypot(s[:, 0], s[:, 1] - v / w)
    assert np.abs(r / (v / w) - 1).max() < 0.02


def test_controls_clamped_and_counted():
    lim = ActuationLimits(accel_min=-2, accel_max=1, yaw_rate_max=0.1)
    s, n = rollout_kinematics(np.array([[5.0, 0.0], [-9.0, 1.0], [0.5, 0.05]]),
                              (0.0, 0.0, 0.0, 5.0), 1.0, lim)
    assert n == 3   # clamped control components
    np.testing.assert_allclose(s[:, 3], [6.0, 4.0, 4.5])
    assert s[1, 2] == pytest.approx(0.1)


def test_speed_never_negative():
    s, _ = rollout_kinematics(np.tile([-8.0, 0.0], (10, 1)), (0.0, 0.0, 0.0, 3.0), 0.2)
    assert np.all(s[:, 3] >= 0.0)
    assert s[-1, 0] == pytest.approx(s[2, 0])
