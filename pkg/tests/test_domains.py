import numpy as np
import pytest

from lord.autodiff import derive_seed
from lord.domains import (SPLIT_BASE, VEHICLE_LENGTH, DataError, Dataset, DomainConfig, IDMParams,
                          colliding_pairs, domain_statistics, expert_rollout, id_domain,
                          idm_accel, make_dataset, mirror_scenario, ood_domain, read_dataset,
                          sample_scenario, scenario_seed, write_dataset)
from lord.errors import ConfigError
from lord.policy import ModelConfig

from conftest import tiny_config


def _same(a, b):
    return (np.array_equal(a.states, b.states) and np.array_equal(a.lanes, b.lanes)
            and np.array_equal(a.desired_speed, b.desired_speed)
            and np.array_equal(a.road.lanes, b.road.lanes) and np.array_equal(a.goal, b.goal))


def test_scenario_determinism():
    assert _same(sample_scenario(id_domain(), 42), sample_scenario(id_domain(), 42))
    assert not _same(sample_scenario(id_domain(), 42), sample_scenario(id_domain(), 43))


def _scene_stats(domain, n=1000):
    counts, speeds, nearest = [], [], []
    for seed in range(n):
        sc = sample_scenario(domain, seed)
        counts.append(sc.n_agents)
        speeds.append(sc.states[:, 3].mean())
        d = np.hypot(*(sc.states[1:, :2] - sc.states[0, :2]).T)
        nearest.append(min(d.min(), 100.0) if len(d) else 100.0)
    return np.mean(counts), np.mean(speeds), np.mean(nearest)


def test_ood_is_sparser_and_slower():
    id_c, id_v, id_d = _scene_stats(id_domain())
    ood_c, ood_v, ood_d = _scene_stats(ood_domain())
    assert ood_c < id_c and ood_v < id_v and ood_d > id_d


def test_left_hand_map_mirrors_right_hand():
    right = DomainConfig(name="r")
    left = DomainConfig(name="r", handedness="left")
    a, b = sample_scenario(right, 7), sample_scenario(left, 7)
    np.testing.assert_array_equal(b.road.lanes, a.road.lanes * [1.0, -1.0])
    np.testing.assert_array_equal(b.states[:, 2], -a.states[:, 2])
    assert _same(mirror_scenario(a), b)


def test_domain_validation():
    with pytest.raises(ConfigError):
        DomainConfig(handedness="up")
    with pytest.raises(ConfigError):
        DomainConfig(speed_range=(5.0, 2.0))


def test_split_seed_ranges_are_disjoint():
    seeds = {sp: {scenario_seed(0, sp, i) for i in range(500)} for sp in SPLIT_BASE}
    assert all(len(s) == 500 for s in seeds.values())
    assert not (seeds["train"] & seeds["val"] or seeds["train"] & seeds["test"]
                or seeds["val"] & seeds["test"])
    assert scenario_seed(0, "val", 0) == derive_seed(0, "scenario/1000000")


# --------------------------------------------------------------- expert

def _empty_scene(speed, desired):
    sc = sample_scenario(DomainConfig(lam=0.0), 3)
    sc.states[0, 3] = speed
    sc.desired_speed[:] = desired
    return sc


def test_free_road_reaches_set_speed():
    demo = expert_rollout(_empty_scene(3.0, 10.0), 75)
    assert demo.states[-1, 0, 3] == pytest.approx(10.0, rel=0.02)


def test_stops_behind_stopped_leader():
    sc = sample_scenario(DomainConfig(lam=1.0, n_lanes=1, speed_range=(10.0, 10.0)), 0)
    sc = sc.copy()
    s_ego = 60.0
    lead = sc.road.point(0, s_ego + 30.0)[0]
    sc.states = np.array([[*sc.road.point(0, s_ego)[0], sc.road.heading(0, s_ego)[0], 10.0],
                          [*lead, sc.road.heading(0, s_ego + 30)[0], 0.0]])
    sc.lanes = np.zeros(2, int)
    sc.desired_speed = np.array([10.0, 0.0])
    demo = expert_rollout(sc, 100)
    s, _ = sc.road.project(demo.states[-1, :, :2])
    assert demo.states[-1, 0, 3] < 0.05
    assert s[0, 1] - s[0, 0] - VEHICLE_LENGTH >= IDMParams().s0


def test_rollout_deterministic():
    sc = sample_scenario(id_domain(), 11)
    assert np.array_equal(expert_rollout(sc, 60).states, expert_rollout(sc, 60).states)


def test_expert_never_collides():
    for seed in range(40):
        for dom in (id_domain(), ood_domain()):
            demo = expert_rollout(sample_scenario(dom, seed), 60, check=False)
            assert not any(colliding_pairs(s) for s in demo.states)


def test_collision_is_a_data_error():
    sc = sample_scenario(DomainConfig(lam=0.0), 1).copy()
    sc.states = np.vstack([sc.states, sc.states[:1] + [1.0, 0.0, 0.0, 0.0]])
    sc.lanes = np.append(sc.lanes, sc.lanes[0])
    sc.desired_speed = np.append(sc.desired_speed, sc.desired_speed[0])
    with pytest.raises(DataError, match="collision"):
        expert_rollout(sc, 5)


def test_idm_free_road_equilibrium():
    p = IDMParams()
    assert float(idm_accel(10.0, 10.0, np.inf, 0.0, p)) == 0.0
    assert float(idm_accel(0.0, 10.0, np.inf, 0.0, p)) == p.a_max
    assert float(idm_accel(0.0, 0.0, np.inf, 0.0, p)) == 0.0


# -------------------------------------------------------------- datasets

def _eq(a: Dataset, b: Dataset):
    return all(np.array_equal(x, y) for x, y in [
        (a.obs.ego, b.obs.ego), (a.obs.agents, b.obs.agents), (a.obs.lane, b.obs.lane),
        (a.obs.target_speed, b.obs.target_speed), (a.future, b.future),
        (a.future_valid, b.future_valid), (a.scenario, b.scenario), (a.step, b.step)])


def test_empty_dataset_round_trip(tmp_path):
    cfg = tiny_config()
    ds = make_dataset(id_domain(), 0, 4, 0, cfg, path=tmp_path / "e.lds")
    back = read_dataset(tmp_path / "e.lds", cfg)
    assert len(ds) == len(back) == 0
    assert back.obs.ego.shape == (0, cfg.H, 4)


def test_dataset_round_trip(tmp_path):
    cfg = tiny_config()
    ds = make_dataset(ood_domain(), 3, 4, 5, cfg, split="val", path=tmp_path / "d.lds")
    back = read_dataset(tmp_path / "d.lds", cfg)
    assert len(ds) == 12 and _eq(ds, back)
    assert back.meta["split"] == "val" and back.meta["domain_hash"] == ood_domain().hash()


def test_dataset_bytes_reproducible(tmp_path):
    cfg = tiny_config()
    make_dataset(id_domain(), 2, 3, 1, cfg, path=tmp_path / "a.lds")
    make_dataset(id_domain(), 2, 3, 1, cfg, path=tmp_path / "b.lds")
    assert (tmp_path / "a.lds").read_bytes() == (tmp_path / "b.lds").read_bytes()


def test_corrupt_dataset_rejected(tmp_path):
    cfg = tiny_config()
    make_dataset(id_domain(), 1, 2, 1, cfg, path=tmp_path / "a.lds")
    raw = (tmp_path / "a.lds").read_bytes()
    (tmp_path / "a.lds").write_bytes(raw[:-8])
    with pytest.raises(DataError):
        read_dataset(tmp_path / "a.lds", cfg)
    (tmp_path / "b.lds").write_bytes(b"hello\n")
    with pytest.raises(DataError):
        read_dataset(tmp_path / "b.lds", cfg)


def test_ego_frame_current_pose_is_origin(tiny_datasets):
    ego = tiny_datasets["id_train"].obs.ego
    np.testing.assert_allclose(ego[:, -1, :3], 0.0, atol=1e-9)


# ------------------------------------------------------------ statistics

def test_empty_scene_statistics():
    cfg = tiny_config()
    ds = make_dataset(DomainConfig(lam=0.0), 1, 3, 0, cfg)
    st = domain_statistics(ds)
    counts, _ = st.count_hist
    assert counts[0] == st.n_samples == 3 and counts[1:].sum() == 0


def test_histograms_conserve_samples(tiny_datasets):
    st = domain_statistics(tiny_datasets["id_train"])
    for counts, _ in (st.speed_hist, st.count_hist, st.distance_hist):
        assert counts.sum() == st.n_samples


def test_ood_slower_in_generated_data(tiny_datasets):
    assert (domain_statistics(tiny_datasets["ood_train"]).mean_speed
            < domain_statistics(tiny_datasets["id_train"]).mean_speed)


def test_statistics_need_data():
    with pytest.raises(DataError):
        domain_statistics(Dataset.empty(tiny_config()))
