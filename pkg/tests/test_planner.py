import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lord import autodiff as ad
from lord.errors import ContractError
from lord.planner import (EnergyTable, PlanContext, LaneFrame, compose_energy, cost_features,
                          energy, generate_candidates, gibbs_probs, select_argmin,
                          smooth_energy_grad, smooth_features, unrolled_descent)

STRAIGHT = np.stack([np.linspace(-20, 200, 45), np.zeros(45)], axis=1)


def _ctx(target_speed=10.0, T=20, dt=0.2, origin=(0.0, 0.0), lane=STRAIGHT):
    return PlanContext(LaneFrame(lane[None]), np.array([target_speed]),
                       np.array([origin], float), dt, T)


# --------------------------------------------------------------- candidates

def test_null_profile_follows_centreline():
    c = generate_candidates((0.0, 0.0), 10.0, STRAIGHT, [0.0], [0.0], 20, 0.2)
    assert len(c) == 1
    np.testing.assert_allclose(c.trajectories[0, :, 0], 2.0 * np.arange(1, 21), atol=1e-12)
    np.testing.assert_allclose(c.trajectories[0, :, 1], 0.0, atol=1e-12)


def test_candidate_count_is_cartesian():
    c = generate_candidates((0.0, 0.0), 10.0, STRAIGHT, np.arange(5.0) - 2, np.linspace(-1, 1, 6), 20, 0.2)
    assert len(c) == 30
    assert c.positions.shape == (30, 21, 2)


def test_braking_to_rest():
    v, T, dt = 10.0, 20, 0.2
    c = generate_candidates((0.0, 0.0), v, STRAIGHT, [-v / (T * dt)], [0.0], T, dt)
    assert c.speeds[0, -1] == pytest.approx(0.0, abs=1e-12)
    steps = np.diff(c.positions[0, :, 0])
    assert np.all(np.diff(steps) < 0)
    # distance travelled under uniform deceleration: v^2 / (2 a)
    assert c.positions[0, -1, 0] == pytest.approx(v * T * dt / 2, rel=1e-12)


def test_candidates_start_at_current_position_on_curved_lane():
    th = np.linspace(0, 1.2, 60)
    lane = np.stack([80 * np.sin(th), 80 * (1 - np.cos(th))], axis=1)
    c = generate_candidates(lane[3] + (0.0, 0.4), 8.0, lane, [-1, 0, 1], [-0.5, 0, 0.5], 10, 0.2)
    assert np.array_equal(c.positions[:, 0], np.broadcast_to(lane[3] + (0.0, 0.4), (9, 2)))


# ----------------------------------------------------------------- features

def test_centreline_has_zero_lateral_feature():
    c = generate_candidates((0.0, 0.0), 10.0, STRAIGHT, [0.0], [0.0], 20, 0.2)
    phi = cost_features(c.trajectories[None], _ctx(), np.array([[40.0, 0.0]])).value[0, 0]
    assert phi[1] == pytest.approx(0.0, abs=1e-12)
    assert phi[2] == pytest.approx(0.0, abs=1e-9)
    assert phi[6] == pytest.approx(0.0, abs=1e-5)


def test_far_agents_do_not_trigger_proximity():
    c = generate_candidates((0.0, 0.0), 10.0, STRAIGHT, [0.0, 1.0], [0.0], 20, 0.2)
    agents = np.zeros((1, 2, 20, 2))
    agents[0, 0, :, 1] = 50.0
    agents[0, 1, :, 0] = -60.0
    phi = cost_features(c.trajectories[None], _ctx(), np.zeros((1, 2)), agents,
                        np.ones((1, 2), bool)).value
    assert np.all(phi[..., 5] == 0.0)


def test_close_agent_triggers_proximity():
    c = generate_candidates((0.0, 0.0), 10.0, STRAIGHT, [0.0], [0.0], 20, 0.2)
    agents = c.trajectories[None, :1] + np.array([0.0, 2.0])
    phi = cost_features(c.trajectories[None], _ctx(), np.zeros((1, 2)), agents,
                        np.ones((1, 1), bool)).value
    # 20 steps at distance 2 from a reach of 2*1 + 3 = 5
    assert phi[0, 0, 5] == pytest.approx(20 * 9.0, rel=1e-6)


def test_constant_acceleration_has_zero_jerk():
    c = generate_candidates((0.0, 0.0), 5.0, STRAIGHT, [1.5], [0.0], 20, 0.2)
    phi = cost_features(c.trajectories[None], _ctx(), np.zeros((1, 2))).value[0, 0]
    assert phi[4] == pytest.approx(0.0, abs=1e-9)
    assert phi[3] == pytest.approx(1.5 ** 2, rel=1e-9)


# ------------------------------------------------------------------- energy

def test_zero_features_zero_energy():
    assert energy(np.random.default_rng(0).normal(size=7), np.zeros(7)).value == 0.0


def test_energy_linear_in_features():
    rng = np.random.default_rng(1)
    w, p1, p2 = rng.normal(size=7), rng.random(7), rng.random(7)
    assert energy(w, p1 + p2).value == pytest.approx(energy(w, p1).value + energy(w, p2).value, rel=1e-14)


def test_zero_raw_weights_give_ln2():
    assert energy(np.zeros(7), np.eye(7)[0]).value == pytest.approx(math.log(2), abs=1e-15)


def test_energy_rejects_dimension_mismatch():
    with pytest.raises(ContractError):
        energy(np.zeros(6), np.zeros(7))


# ------------------------------------------------------------------- argmin

@pytest.mark.parametrize("E,idx", [((3, 1, 2), 1), ((2, 2), 0), ((7.5,), 0), ((-4.0,), 0)])
def test_select_argmin(E, idx):
    assert select_argmin(EnergyTable(np.array(E, float)))[0] == idx


def test_select_argmin_returns_trajectory():
    c = generate_candidates((0.0, 0.0), 10.0, STRAIGHT, [-1, 0, 1], [0.0], 5, 0.2)
    i, traj = select_argmin(EnergyTable([3.0, 0.5, 1.0]), c)
    assert i == 1 and np.array_equal(traj, c.trajectories[1])


def test_energy_table_validation():
    with pytest.raises(ContractError):
        EnergyTable([1.0, np.nan])
    with pytest.raises(ContractError):
        EnergyTable([1.0], temperature=0.0)


# -------------------------------------------------------------------- gibbs

def test_gibbs_uniform():
    np.testing.assert_allclose(gibbs_probs(EnergyTable(np.full(5, 3.3))), 0.2, rtol=1e-15)


def test_gibbs_hand_softmax():
    np.testing.assert_allclose(gibbs_probs(EnergyTable([0.0, math.log(2)])), [2 / 3, 1 / 3], rtol=1e-14)


@settings(max_examples=200)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=30), st.floats(-1e3, 1e3),
       st.floats(0.05, 10))
def test_gibbs_shift_invariance(E, c, tau):
    p = gibbs_probs(EnergyTable(E, tau))
    q = gibbs_probs(EnergyTable(np.asarray(E) + c, tau))
    np.testing.assert_allclose(p, q, atol=1e-12)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


def test_compose_zero_residual_is_identity():
    base = EnergyTable([0.3, -1.0, 2.0])
    np.testing.assert_array_equal(gibbs_probs(compose_energy(base, EnergyTable(np.zeros(3)))),
                                  gibbs_probs(base))


def test_compose_matches_product_of_experts():
    rng = np.random.default_rng(2)
    e1, e2 = rng.normal(size=12), rng.normal(size=12)
    f = np.exp(-e1 / 0.7) * np.exp(-e2 / 0.7)
    got = gibbs_probs(compose_energy(EnergyTable(e1, 0.7), EnergyTable(e2, 0.7)))
    assert np.abs(got - f / f.sum()).max() < 1e-12


def test_cancelling_residual_ties_to_first():
    e = np.array([0.4, -2.0, 1.0])
    assert select_argmin(compose_energy(EnergyTable(e), EnergyTable(-e)))[0] == 0


def test_compose_rejects_mismatch():
    with pytest.raises(ContractError):
        compose_energy(EnergyTable([1.0, 2.0]), EnergyTable([1.0]))
    with pytest.raises(ContractError):
        compose_energy(EnergyTable([1.0], 1.0), EnergyTable([1.0], 2.0))


# ---------------------------------------------------------- unrolled descent

def _quadratic(seed=0, n=4):
    rng = np.random.default_rng(seed)
    Qm = np.linalg.qr(rng.normal(size=(2 * n, 2 * n)))[0]
    Q = Qm @ np.diag(rng.uniform(2.0, 8.0, 2 * n)) @ Qm.T
    b = rng.normal(size=2 * n) * 2

    def grad(a):
        flat = ad.reshape(a, (1, 2 * n))
        return ad.reshape(flat @ Q - b, (n, 2))
    return Q, b, grad


def test_zero_steps_returns_start():
    a0 = np.arange(8.0).reshape(4, 2)
    _, _, grad = _quadratic()
    assert np.array_equal(unrolled_descent(grad, a0, 0, 0.1).value, a0)


def test_quadratic_converges_to_closed_form():
    Q, b, grad = _quadratic()
    a = unrolled_descent(grad, np.zeros((4, 2)), 50, 0.1)
    star = np.linalg.solve(Q, b).reshape(4, 2)
    assert np.abs(a.value - star).max() < 1e-3


def test_divergent_step_stays_finite_and_bounded():
    _, _, grad = _quadratic()
    a = unrolled_descent(grad, np.zeros((4, 2)), 50, 10.0, max_disp=0.5)
    assert np.all(np.isfinite(a.value))
    assert np.all(np.linalg.norm(a.value, axis=-1) <= 50 * 0.5 + 1e-9)


def test_descent_rejects_bad_arguments():
    _, _, grad = _quadratic()
    with pytest.raises(ContractError):
        unrolled_descent(grad, np.zeros((4, 2)), -1, 0.1)
    with pytest.raises(ContractError):
        unrolled_descent(grad, np.zeros((4, 2)), 3, 0.0)


def test_smooth_gradient_matches_autodiff():
    rng = np.random.default_rng(5)
    T = 6
    ctx = _ctx(T=T, origin=(1.0, 0.3))
    plan = ad.Tensor(np.stack([1 + 2 * np.arange(1, T + 1), rng.normal(0, 0.5, T)], -1)[None])
    w = ad.Tensor(rng.uniform(0.2, 2.0, (1, 7)))
    goal = np.array([[13.0, 0.5]])
    agents = plan.value[:, None] + rng.normal(0, 1.0, (1, 2, T, 2))
    mask = np.array([[True, True]])
    p = ad.Parameter(plan.value, "p")
    E = (smooth_features(p, ctx, goal, agents, mask) * w).sum()
    auto = ad.backward(E)["p"]
    analytic = smooth_energy_grad(plan, w, ctx, goal, agents, mask).value
    np.testing.assert_allclose(analytic, auto, rtol=1e-8, atol=1e-10)
