"""Synthetic two-domain traffic: road corridors, scripted IDM experts, datasets.

The in-distribution domain is right-hand, dense and fast; the shifted domain is
left-hand (the whole map mirrored in y), sparse and slow.  Every scenario is a
pure function of ``(DomainConfig, seed)``.

Vehicles are 4.5 x 2.0 m boxes, approximated by two discs of radius 1.0 m
placed 1.25 m ahead of and behind the reference point.
"""
from __future__ import annotations

import hashlib
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import derive_seed
from .errors import ConfigError, DataError
from .planner import LaneFrame
from .policy import ActuationLimits, ModelConfig, ObservationSeq

VEHICLE_LENGTH = 4.5
VEHICLE_WIDTH = 2.0
DISC_RADIUS = 1.0
DISC_OFFSET = 1.25
SENSING_RANGE = 100.0
SIM_SUBSTEPS = 2                 # simulation runs at dt / SIM_SUBSTEPS
SPLIT_BASE = {"train": 0, "val": 1_000_000, "test": 2_000_000}


@dataclass(frozen=True)
class IDMParams:
    headway: float = 1.5
    s0: float = 2.0
    a_max: float = 2.0
    b_comf: float = 2.5
    delta: float = 4.0


@dataclass(frozen=True)
class DomainConfig:
    name: str = "id"
    handedness: str = "right"
    lam: float = 3.0                         # Poisson mean of the agent count
    speed_range: tuple = (8.0, 14.0)
    n_lanes: int = 2
    lane_width: float = 3.5
    curvature_range: tuple = (0.0, 0.004)    # peak curvature [1/m]
    gap_mean: float = 20.0                   # mean extra gap between vehicles [m]
    corridor_length: float = 300.0
    run_out: float = 250.0                   # straight extension so 15 s episodes stay on the map
    lateral_noise: float = 0.2
    heading_noise: float = 0.02
    idm: IDMParams = field(default_factory=IDMParams)

    def __post_init__(self):
        if self.handedness not in ("right", "left"):
            raise ConfigError(f"handedness must be 'right' or 'left', got {self.handedness!r}")
        if self.lam < 0:
            raise ConfigError("agent-count mean must be >= 0")
        lo, hi = self.speed_range
        if not 0 <= lo <= hi or hi <= 0:
            raise ConfigError(f"bad speed range {self.speed_range}")
        if self.lane_width <= VEHICLE_WIDTH:
            raise ConfigError("lane width must exceed the vehicle width")
        if self.n_lanes < 1:
            raise ConfigError("need at least one lane")

    def hash(self) -> str:
        return hashlib.sha256(repr(sorted(asdict(self).items())).encode()).hexdigest()[:16]


def id_domain() -> DomainConfig:
    return DomainConfig()


def ood_domain() -> DomainConfig:
    return DomainConfig(name="ood", handedness="left", lam=1.5, speed_range=(4.0, 9.0), gap_mean=35.0)


def handedness_only_domain() -> DomainConfig:
    return DomainConfig(name="ood-mirror", handedness="left")


DOMAINS = {"id": id_domain, "ood": ood_domain, "ood-mirror": handedness_only_domain}


# ------------------------------------------------------------------------ road

class Road:
    """Parallel lane centrelines; lane 0 is the outermost lane on the driving side."""

    def __init__(self, lanes: np.ndarray, lane_width: float):
        self.lanes = np.asarray(lanes, dtype=np.float64)      # (n_lanes, P, 2)
        self.frame = LaneFrame(self.lanes)
        self.lane_width = lane_width

    @property
    def n_lanes(self) -> int:
        return self.lanes.shape[0]

    def project(self, xy: np.ndarray):
        """Arc length and lateral offset of points (N, 2) against every lane -> (n_lanes, N)."""
        P = np.broadcast_to(np.asarray(xy, float)[None], (self.n_lanes,) + np.shape(xy))
        return self.frame.frenet_np(P)

    def point(self, lane: int, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, float))
        d = np.zeros_like(s)
        big_s = np.zeros((self.n_lanes, len(s)))
        big_s[lane] = s
        return self.frame.to_cartesian(big_s, np.zeros_like(big_s))[lane]

    def heading(self, lane: int, s) -> np.ndarray:
        p = self.point(lane, np.asarray(s, float) + 0.5)
        q = self.point(lane, np.asarray(s, float) - 0.5)
        return np.arctan2(p[:, 1] - q[:, 1], p[:, 0] - q[:, 0])

    def nearest_lane(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Lane index, arc length and lateral offset of the nearest lane per point."""
        s, d = self.project(np.atleast_2d(xy))
        k = np.argmin(np.abs(d), axis=0)
        i = np.arange(s.shape[1])
        return k, s[k, i], d[k, i]

    def mirrored(self) -> "Road":
        return Road(self.lanes * np.array([1.0, -1.0]), self.lane_width)


def _reference_line(rng: np.random.Generator, cfg: DomainConfig, ds: float = 2.0) -> np.ndarray:
    n = int(round((cfg.corridor_length + cfg.run_out) / ds)) + 1
    s = np.arange(n) * ds
    amp = rng.uniform(*cfg.curvature_range)
    period = rng.uniform(150.0, 300.0)
    phase = rng.uniform(0.0, 2 * np.pi)
    # curvature fades out at the ends so the start and the run-out are straight
    env = np.clip(np.minimum(s / 30.0, (cfg.corridor_length - s) / 30.0), 0.0, 1.0)
    kappa = amp * np.sin(2 * np.pi * s / period + phase) * env
    heading = np.concatenate([[0.0], np.cumsum(0.5 * (kappa[1:] + kappa[:-1]) * ds)])
    heading -= heading[0]
    step = np.stack([np.cos(heading), np.sin(heading)], axis=1) * ds
    pts = np.concatenate([[[0.0, 0.0]], np.cumsum(0.5 * (step[1:] + step[:-1]), axis=0)])
    return pts


def _build_road(rng, cfg: DomainConfig) -> Road:
    ref = _reference_line(rng, cfg)
    t = np.gradient(ref, axis=0)
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    nrm = np.stack([-t[:, 1], t[:, 0]], axis=1)
    offs = (np.arange(cfg.n_lanes) - (cfg.n_lanes - 1) / 2.0) * cfg.lane_width
    return Road(ref[None] + offs[:, None, None] * nrm[None], cfg.lane_width)


# ------------------------------------------------------------------- scenarios

@dataclass
class Scenario:
    road: Road
    states: np.ndarray          # (N, 4) x, y, heading, speed; row 0 is the ego
    lanes: np.ndarray           # (N,) lane index each vehicle follows
    desired_speed: np.ndarray   # (N,)
    goal: np.ndarray            # (2,) point on the ego lane far ahead
    scenario_id: int
    seed: int
    domain: str = "id"
    idm: IDMParams = field(default_factory=IDMParams)

    @property
    def n_agents(self) -> int:
        return self.states.shape[0] - 1

    def copy(self) -> "Scenario":
        return Scenario(self.road, self.states.copy(), self.lanes.copy(),
                        self.desired_speed.copy(), self.goal.copy(), self.scenario_id,
                        self.seed, self.domain, self.idm)


def sample_scenario(domain: DomainConfig, seed: int, A_max: int = 4, scenario_id: int = 0,
                    max_retries: int = 50) -> Scenario:
    """Seeded scene: a corridor, an ego vehicle and up to ``A_max`` agents."""
    rng = np.random.default_rng(seed)
    road = _build_road(rng, domain)
    lo, hi = domain.speed_range
    n_agents = min(int(rng.poisson(domain.lam)), A_max)
    ego_lane = int(rng.integers(domain.n_lanes))
    ego_s = 60.0
    for _ in range(max_retries):
        speeds = rng.uniform(lo, hi, n_agents + 1)
        desired = rng.uniform(lo, hi, n_agents + 1)
        lanes = np.concatenate([[ego_lane], rng.integers(domain.n_lanes, size=n_agents)])
        ahead = rng.random(n_agents) < 0.6
        s = np.empty(n_agents + 1)
        s[0] = ego_s
        for lane in range(domain.n_lanes):
            for sign in (1, -1):
                members = [i + 1 for i in range(n_agents)
                           if lanes[i + 1] == lane and bool(ahead[i]) == (sign > 0)]
                prev = 0
                for m in members:
                    fol, lead = (prev, m) if sign > 0 else (m, prev)
                    # room for the follower to settle behind its leader
                    min_gap = (VEHICLE_LENGTH + domain.idm.s0 + 1.2 * speeds[fol]
                               + max(0.0, speeds[fol] - speeds[lead]))
                    s[m] = s[prev] + sign * (min_gap + rng.exponential(domain.gap_mean))
                    prev = m
        if np.all(s > 5.0) and np.all(s < domain.corridor_length):
            break
    else:
        raise DataError(f"scenario seed {seed}: no feasible placement after {max_retries} tries")
    states = np.empty((n_agents + 1, 4))
    for i in range(n_agents + 1):
        p = road.point(int(lanes[i]), s[i])[0]
        h = road.heading(int(lanes[i]), s[i])[0]
        lat = rng.normal(0.0, domain.lateral_noise)
        states[i] = (p[0] - math.sin(h) * lat, p[1] + math.cos(h) * lat,
                     h + rng.normal(0.0, domain.heading_noise), speeds[i])
    goal = road.point(ego_lane, ego_s + 250.0)[0]
    scen = Scenario(road, states, lanes.astype(int), desired, goal, scenario_id, seed,
                    domain.name, domain.idm)
    return mirror_scenario(scen) if domain.handedness == "left" else scen


def mirror_scenario(scen: Scenario) -> Scenario:
    st = scen.states.copy()
    st[:, 1] *= -1.0
    st[:, 2] *= -1.0
    return Scenario(scen.road.mirrored(), st, scen.lanes.copy(), scen.desired_speed.copy(),
                    scen.goal * np.array([1.0, -1.0]), scen.scenario_id, scen.seed,
                    scen.domain, scen.idm)


def scenario_seed(master_seed: int, split: str, index: int) -> int:
    """Seed of scenario ``index`` of a split; splits use disjoint index ranges."""
    if split not in SPLIT_BASE:
        raise ConfigError(f"unknown split {split!r}")
    return derive_seed(master_seed, f"scenario/{SPLIT_BASE[split] + index}")


# ---------------------------------------------------------------- expert model

def idm_accel(v, v0, gap, dv, p: IDMParams):
    """Intelligent driver model acceleration; ``gap`` = inf means free road.

    A vehicle with desired speed 0 (parked) brakes at ``b_comf`` until at rest.
    """
    v = np.asarray(v, float)
    v0 = np.asarray(v0, float)
    moving = v0 > 1e-6
    free = 1.0 - (v / np.where(moving, v0, 1.0)) ** p.delta
    s_star = p.s0 + np.maximum(0.0, v * p.headway + v * dv / (2.0 * math.sqrt(p.a_max * p.b_comf)))
    inter = np.where(np.isfinite(gap), (s_star / np.maximum(gap, 0.1)) ** 2, 0.0)
    a = p.a_max * (free - inter)
    return np.where(moving, a, np.where(v > 0, np.minimum(-p.b_comf, a), 0.0))


def pure_pursuit(state, target_xy, limits: ActuationLimits) -> float:
    """Yaw rate steering a unicycle toward ``target_xy``."""
    x, y, h, v = state
    dx, dy = target_xy[0] - x, target_xy[1] - y
    ld = max(math.hypot(dx, dy), 1e-6)
    alpha = math.atan2(dy, dx) - h
    alpha = math.atan2(math.sin(alpha), math.cos(alpha))
    w = 2.0 * max(v, 1.0) * math.sin(alpha) / ld
    return float(np.clip(w, -limits.yaw_rate_max, limits.yaw_rate_max))


def lookahead(v: float) -> float:
    return max(6.0, 0.8 * v)


def _lane_leaders(road: Road, states: np.ndarray, lanes: np.ndarray):
    """Gap and closing speed to the nearest vehicle ahead in the same lane, per vehicle.

    Vehicles are assigned to a lane by proximity, so a vehicle drifting across
    is seen by followers in either lane it overlaps.
    """
    N = len(states)
    s_all, d_all = road.project(states[:, :2])            # (n_lanes, N)
    gaps = np.full(N, np.inf)
    dv = np.zeros(N)
    occupies = np.abs(d_all) < (road.lane_width + VEHICLE_WIDTH) / 2.0
    for i in range(N):
        l = lanes[i]
        si = s_all[l, i]
        for j in range(N):
            if j == i or not occupies[l, j]:
                continue
            g = s_all[l, j] - si - VEHICLE_LENGTH
            if s_all[l, j] > si and g < gaps[i]:
                gaps[i] = g
                dv[i] = states[i, 3] - states[j, 3]
    return gaps, dv, s_all


def idm_controls(road: Road, states, lanes, desired, p: IDMParams, limits: ActuationLimits,
                 only=None):
    """(N, 2) acceleration / yaw-rate controls for IDM plus pure pursuit."""
    gaps, dv, s_all = _lane_leaders(road, states, lanes)
    acc = idm_accel(states[:, 3], desired, gaps, dv, p)
    out = np.zeros((len(states), 2))
    for i in (range(len(states)) if only is None else only):
        l = int(lanes[i])
        tgt = road.point(l, s_all[l, i] + lookahead(states[i, 3]))[0]
        out[i] = (acc[i], pure_pursuit(states[i], tgt, limits))
    return out


def step_unicycle(states: np.ndarray, controls: np.ndarray, dt: float,
                  limits: ActuationLimits) -> np.ndarray:
    a = np.clip(controls[:, 0], limits.accel_min, limits.accel_max)
    w = np.clip(controls[:, 1], -limits.yaw_rate_max, limits.yaw_rate_max)
    x, y, h, v = states.T
    return np.stack([x + v * np.cos(h) * dt, y + v * np.sin(h) * dt, h + w * dt,
                     np.maximum(0.0, v + a * dt)], axis=1)


def vehicle_discs(states: np.ndarray) -> np.ndarray:
    """(N, 2, 2) disc centres."""
    off = DISC_OFFSET * np.stack([np.cos(states[:, 2]), np.sin(states[:, 2])], axis=1)
    return np.stack([states[:, :2] + off, states[:, :2] - off], axis=1)


def colliding_pairs(states: np.ndarray) -> list:
    c = vehicle_discs(states)
    N = len(states)
    out = []
    for i in range(N):
        for j in range(i + 1, N):
            d = np.linalg.norm(c[i][:, None] - c[j][None], axis=-1)
            if np.any(d < 2 * DISC_RADIUS):
                out.append((i, j))
    return out


@dataclass
class Demonstration:
    """Expert rollout sampled every ``dt`` seconds: ``states`` is (n_steps+1, N, 4)."""

    scenario: Scenario
    states: np.ndarray
    dt: float

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - 1

    def window(self, t: int, cfg: ModelConfig):
        """Observation at step ``t`` plus the joint future (A, T, 2) and its validity."""
        return make_window(self.scenario.road, self.states, self.scenario.lanes[0],
                           self.scenario.desired_speed[0], t, cfg)

    def windows(self, cfg: ModelConfig, steps=None):
        steps = range(cfg.H - 1, self.n_steps - cfg.T + 1) if steps is None else steps
        return [self.window(t, cfg) for t in steps]


def expert_rollout(scenario: Scenario, n_steps: int, dt: float = 0.2,
                   limits: ActuationLimits | None = None, check: bool = True) -> Demonstration:
    """Scripted IDM + pure-pursuit rollout of every vehicle, including the ego."""
    limits = limits or ActuationLimits()
    st = scenario.states.copy()
    out = np.empty((n_steps + 1,) + st.shape)
    out[0] = st
    h = dt / SIM_SUBSTEPS
    for k in range(n_steps):
        for _ in range(SIM_SUBSTEPS):
            u = idm_controls(scenario.road, st, scenario.lanes, scenario.desired_speed,
                             scenario.idm, limits)
            st = step_unicycle(st, u, h, limits)
        out[k + 1] = st
        if check and colliding_pairs(st):
            raise DataError(f"expert collision in scenario seed {scenario.seed} at step {k + 1}: "
                            f"{colliding_pairs(st)}")
    return Demonstration(scenario, out, dt)


# ------------------------------------------------------------------ windowing

def to_ego_frame(xy: np.ndarray, origin: np.ndarray, heading: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    rel = np.asarray(xy, float) - origin
    return np.stack([c * rel[..., 0] + s * rel[..., 1], -s * rel[..., 0] + c * rel[..., 1]], axis=-1)


def from_ego_frame(xy: np.ndarray, origin: np.ndarray, heading: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    xy = np.asarray(xy, float)
    return np.stack([c * xy[..., 0] - s * xy[..., 1], s * xy[..., 0] + c * xy[..., 1]], axis=-1) + origin


def lane_context(road: Road, ego_state: np.ndarray, L: int, spacing: float = 5.0,
                 back: float = 10.0) -> np.ndarray:
    """L points of the ego's nearest lane, from ``back`` metres behind, in the ego frame."""
    k, s, _ = road.nearest_lane(ego_state[None, :2])
    pts = road.point(int(k[0]), s[0] - back + spacing * np.arange(L))
    return to_ego_frame(pts, ego_state[:2], ego_state[2])


def observe(road: Road, history: np.ndarray, target_speed: float, cfg: ModelConfig) -> ObservationSeq:
    """Single observation from a state history (H, N, 4); row 0 of N is the ego."""
    H = cfg.H
    if history.shape[0] != H:
        raise ConfigError(f"history has {history.shape[0]} steps, expected H={H}")
    cur = history[-1, 0]
    o, h0 = cur[:2], cur[2]
    ego = np.empty((H, 4))
    ego[:, :2] = to_ego_frame(history[:, 0, :2], o, h0)
    ego[:, 2] = np.arctan2(np.sin(history[:, 0, 2] - h0), np.cos(history[:, 0, 2] - h0))
    ego[:, 3] = history[:, 0, 3]
    agents = np.zeros((cfg.A_max, H, 5))
    n_ag = min(history.shape[1] - 1, cfg.A_max)
    for i in range(n_ag):
        tr = history[:, i + 1]
        if np.hypot(*(tr[-1, :2] - o)) > SENSING_RANGE:
            continue
        agents[i, :, :2] = to_ego_frame(tr[:, :2], o, h0)
        agents[i, :, 2] = np.arctan2(np.sin(tr[:, 2] - h0), np.cos(tr[:, 2] - h0))
        agents[i, :, 3] = tr[:, 3]
        agents[i, :, 4] = 1.0
    lane = lane_context(road, cur, cfg.L)
    return ObservationSeq(ego[None], agents[None], lane[None], np.array([float(target_speed)]))


def make_window(road: Road, states: np.ndarray, ego_lane: int, target_speed: float, t: int,
                cfg: ModelConfig):
    H, T = cfg.H, cfg.T
    if t < H - 1 or t + T >= states.shape[0]:
        raise ConfigError(f"window at step {t} does not fit H={H}, T={T} in {states.shape[0]} steps")
    obs = observe(road, states[t - H + 1:t + 1], target_speed, cfg)
    cur = states[t, 0]
    fut = np.zeros((cfg.n_agents, T, 2))
    valid = np.zeros(cfg.n_agents, dtype=bool)
    valid[0] = True
    valid[1:] = obs.agent_valid[0]
    n = min(states.shape[1], cfg.n_agents)
    fut[:n] = np.swapaxes(to_ego_frame(states[t + 1:t + T + 1, :n, :2], cur[:2], cur[2]), 0, 1)
    fut[~valid] = 0.0
    return obs, fut, valid


# -------------------------------------------------------------------- datasets

DATASET_MAGIC = "LORD-DATA 1"


@dataclass
class Dataset:
    obs: ObservationSeq
    future: np.ndarray          # (N, A, T, 2) joint future in the ego frame; row 0 is the ego
    future_valid: np.ndarray    # (N, A) bool
    scenario: np.ndarray        # (N,) scenario index within the split
    step: np.ndarray            # (N,) window step within the rollout
    meta: dict = field(default_factory=dict)
    candidates: np.ndarray | None = None   # (N, K, T, 2), filled by attach_candidates
    cand_label: np.ndarray | None = None   # (N,) candidate nearest the expert plan

    def __len__(self):
        return len(self.scenario)

    def attach_candidates(self, cfg: ModelConfig) -> "Dataset":
        """Cache the planner's candidate set and the expert-nearest label per window."""
        from .planner import batch_candidates
        if self.candidates is None:
            self.candidates = batch_candidates(self.obs, cfg.planner, cfg.T, cfg.dt) if len(self) \
                else np.zeros((0, cfg.planner.n_candidates, cfg.T, 2))
            self.cand_label = nearest_candidate(self.candidates, self.expert_plan)
        return self

    @property
    def expert_plan(self) -> np.ndarray:
        return self.future[:, 0]

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.obs.take(idx), self.future[idx], self.future_valid[idx],
                       self.scenario[idx], self.step[idx], dict(self.meta),
                       None if self.candidates is None else self.candidates[idx],
                       None if self.cand_label is None else self.cand_label[idx])

    @staticmethod
    def concat(items) -> "Dataset":
        items = [d for d in items if len(d)] or items[:1]
        cands = None if any(d.candidates is None for d in items) else \
            np.concatenate([d.candidates for d in items])
        labels = None if cands is None else np.concatenate([d.cand_label for d in items])
        return Dataset(ObservationSeq.concat([d.obs for d in items]),
                       np.concatenate([d.future for d in items]),
                       np.concatenate([d.future_valid for d in items]),
                       np.concatenate([d.scenario for d in items]),
                       np.concatenate([d.step for d in items]), dict(items[0].meta), cands, labels)

    @staticmethod
    def empty(cfg: ModelConfig, meta=None) -> "Dataset":
        A, T, H, L = cfg.n_agents, cfg.T, cfg.H, cfg.L
        obs = ObservationSeq(np.zeros((0, H, 4)), np.zeros((0, cfg.A_max, H, 5)),
                             np.zeros((0, L, 2)), np.zeros(0))
        return Dataset(obs, np.zeros((0, A, T, 2)), np.zeros((0, A), bool),
                       np.zeros(0, int), np.zeros(0, int), dict(meta or {}))


def nearest_candidate(candidates: np.ndarray, expert: np.ndarray) -> np.ndarray:
    """Index of the candidate with the smallest mean squared displacement to ``expert``."""
    d = np.sum((candidates - expert[:, None]) ** 2, axis=-1).mean(axis=-1)
    return np.argmin(d, axis=1)


def _record_layout(cfg: ModelConfig) -> list:
    A, T, H, L = cfg.n_agents, cfg.T, cfg.H, cfg.L
    return [("ego", (H, 4)), ("agents", (cfg.A_max, H, 5)), ("lane", (L, 2)), ("target_speed", ()),
            ("future", (A, T, 2)), ("future_valid", (A,)), ("scenario", ()), ("step", ())]


def _fields(ds: Dataset) -> dict:
    return {"ego": ds.obs.ego, "agents": ds.obs.agents, "lane": ds.obs.lane,
            "target_speed": ds.obs.target_speed, "future": ds.future,
            "future_valid": ds.future_valid.astype(float), "scenario": ds.scenario.astype(float),
            "step": ds.step.astype(float)}


def write_dataset(path, ds: Dataset, cfg: ModelConfig) -> None:
    """Text manifest terminated by ``end``, then one fixed-size float64 record per window."""
    layout = _record_layout(cfg)
    rec = sum(int(np.prod(s)) for _, s in layout)
    meta = dict(ds.meta)
    meta.update(count=len(ds), record_floats=rec, H=cfg.H, T=cfg.T, A_max=cfg.A_max, L=cfg.L, dt=cfg.dt)
    lines = [DATASET_MAGIC] + [f"{k} {meta[k]}" for k in sorted(meta)]
    lines.append("layout " + " ".join(f"{n}:{'x'.join(map(str, s)) or '-'}" for n, s in layout))
    lines.append("end")
    f = _fields(ds)
    n = len(ds)
    payload = np.concatenate([f[name].reshape(n, -1) for name, _ in layout], axis=1) if n else np.zeros((0, rec))
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(payload, dtype="<f8").tobytes())
    os.replace(tmp, path)


def read_dataset(path, cfg: ModelConfig | None = None) -> Dataset:
    data = Path(path).read_bytes()
    end = data.find(b"\nend\n")
    if not data.startswith(DATASET_MAGIC.encode()) or end < 0:
        raise DataError(f"{path}: not a dataset file")
    meta = {}
    for line in data[:end].decode("ascii").splitlines()[1:]:
        k, _, v = line.partition(" ")
        meta[k] = v
    dims = {k: int(meta[k]) for k in ("H", "T", "A_max", "L")}
    if cfg is None:
        cfg = ModelConfig(**dims, dt=float(meta["dt"]))
    elif any(getattr(cfg, k) != v for k, v in dims.items()):
        raise DataError(f"{path}: dataset dims {dims} do not match the model configuration")
    layout = _record_layout(cfg)
    rec = int(meta["record_floats"])
    n = int(meta["count"])
    flat = np.frombuffer(data, dtype="<f8", offset=end + 5)
    if flat.size != n * rec:
        raise DataError(f"{path}: payload has {flat.size} floats, expected {n * rec}")
    flat = flat.reshape(n, rec).astype(np.float64)
    out, col = {}, 0
    for name, shape in layout:
        k = int(np.prod(shape))
        out[name] = flat[:, col:col + k].reshape((n,) + shape)
        col += k
    meta = {k: v for k, v in meta.items() if k != "layout"}
    obs = ObservationSeq(out["ego"], out["agents"], out["lane"], out["target_speed"])
    return Dataset(obs, out["future"], out["future_valid"] > 0.5,
                   out["scenario"].astype(int), out["step"].astype(int), meta)


def make_dataset(domain: DomainConfig, n_scenarios: int, samples_per_scenario: int, seed: int,
                 cfg: ModelConfig | None = None, split: str = "train", path=None) -> Dataset:
    """Expert windows from ``n_scenarios`` scenarios with derived per-scenario seeds."""
    if n_scenarios < 0:
        raise ConfigError("n_scenarios must be >= 0")
    cfg = cfg or ModelConfig()
    n_steps = cfg.H - 1 + cfg.T + 40
    meta = {"domain": domain.name, "domain_hash": domain.hash(), "master_seed": seed,
            "split": split, "version": 1}
    obs, fut, val, sc, stp = [], [], [], [], []
    for i in range(n_scenarios):
        s = scenario_seed(seed, split, i)
        scen = sample_scenario(domain, s, cfg.A_max, scenario_id=i)
        demo = expert_rollout(scen, n_steps, cfg.dt)
        rng = np.random.default_rng(derive_seed(s, "windows"))
        lo, hi = cfg.H - 1, demo.n_steps - cfg.T
        ts = np.sort(rng.choice(np.arange(lo, hi + 1), size=min(samples_per_scenario, hi - lo + 1),
                                replace=False))
        for t in ts:
            o, f, v = demo.window(int(t), cfg)
            obs.append(o)
            fut.append(f)
            val.append(v)
            sc.append(i)
            stp.append(int(t))
    if obs:
        ds = Dataset(ObservationSeq.concat(obs), np.stack(fut), np.stack(val),
                     np.array(sc), np.array(stp), meta)
    else:
        ds = Dataset.empty(cfg, meta)
    if path is not None:
        write_dataset(path, ds, cfg)
    return ds


# ------------------------------------------------------------------ statistics

@dataclass
class DomainStatistics:
    n_samples: int
    mean_speed: float
    mean_agent_count: float
    mean_nearest_distance: float
    speed_hist: tuple            # (counts, edges)
    count_hist: tuple
    distance_hist: tuple

    def table(self) -> str:
        rows = [("samples", self.n_samples), ("mean ego speed [m/s]", f"{self.mean_speed:.3f}"),
                ("mean agent count", f"{self.mean_agent_count:.3f}"),
                ("mean nearest-agent distance [m]", f"{self.mean_nearest_distance:.3f}")]
        return "\n".join(f"{k:<34}{v}" for k, v in rows)


SPEED_BINS = np.linspace(0.0, 20.0, 11)
DISTANCE_BINS = np.array([0, 10, 20, 30, 40, 60, 80, 100, np.inf])


def domain_statistics(ds: Dataset, A_max: int | None = None) -> DomainStatistics:
    """Histograms of ego speed, valid-agent count and nearest-agent distance.

    Samples without any valid agent are counted at ``SENSING_RANGE`` in the
    distance histogram, so every histogram sums to the sample count.
    """
    if len(ds) == 0:
        raise DataError("domain statistics need a non-empty dataset")
    A_max = ds.obs.agents.shape[1] if A_max is None else A_max
    speed = ds.obs.ego[:, -1, 3]
    valid = ds.obs.agent_valid
    counts = valid.sum(axis=1)
    pos = ds.obs.agents[:, :, -1, :2]
    dist = np.where(valid, np.hypot(pos[..., 0], pos[..., 1]), np.inf).min(axis=1)
    dist = np.minimum(dist, SENSING_RANGE)
    return DomainStatistics(
        len(ds), float(speed.mean()), float(counts.mean()), float(dist.mean()),
        np.histogram(np.clip(speed, 0, SPEED_BINS[-1] - 1e-9), SPEED_BINS),
        np.histogram(counts, np.arange(A_max + 2) - 0.5),
        np.histogram(dist, DISTANCE_BINS))
