"""Open-loop metrics, the closed-loop episode engine and cross-domain reports."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from decimal import Decimal

import numpy as np

from . import autodiff as ad
from .domains import (SIM_SUBSTEPS, VEHICLE_WIDTH, Dataset, Scenario, colliding_pairs,
                      expert_rollout, from_ego_frame, idm_accel, idm_controls, lookahead,
                      observe, pure_pursuit, step_unicycle)
from .errors import ConfigError, ContractError, DataError
from .planner import LaneFrame
from .policy import ActuationLimits, ModelConfig, ObservationSeq, PolicyModel, infer

MISS_THRESHOLD = 3.6


# ------------------------------------------------------------------ open loop

def ade_fde(pred, gt) -> tuple[float, float]:
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    if pred.shape != gt.shape or pred.ndim != 2 or len(pred) == 0:
        raise ContractError(f"ade_fde needs equal (T, 2) arrays, got {pred.shape} and {gt.shape}")
    d = np.hypot(*(pred - gt).T)
    return float(d.mean()), float(d[-1])


@dataclass(frozen=True)
class JointMetrics:
    min_sade: float
    min_sfde: float
    bmin_sfde: float
    miss: bool


def joint_metrics(modes, probs, gt, valid, miss_threshold: float = MISS_THRESHOLD) -> JointMetrics:
    """Scene-level metrics of M joint modes (M, A, T, 2) against ``gt`` (A, T, 2).

    SADE and SFDE average over valid agents; the two minima are taken over
    modes independently.  The Brier term uses the probability of the
    SFDE-minimising mode (first one on ties).
    """
    modes, gt = np.asarray(modes, float), np.asarray(gt, float)
    probs = np.asarray(probs, float)
    valid = np.asarray(valid, bool)
    if abs(probs.sum() - 1.0) > 1e-9:
        raise ContractError(f"mode probabilities sum to {probs.sum()!r}, not 1")
    if not valid.any():
        raise DataError("joint metrics need at least one valid agent")
    d = np.sqrt(np.sum((modes[:, valid] - gt[None, valid]) ** 2, axis=-1))    # (M, n, T)
    sade = d.mean(axis=(1, 2))
    sfde = d[:, :, -1].mean(axis=1)
    k = int(np.argmin(sfde))
    min_sfde = float(sfde[k])
    return JointMetrics(float(sade.min()), min_sfde, min_sfde + (1.0 - float(probs[k])) ** 2,
                        bool(min_sfde >= miss_threshold))


@dataclass
class OpenLoopMetrics:
    ade: float
    fde: float
    min_sade: float
    min_sfde: float
    bmin_sfde: float
    smr: float
    n: int

    def as_dict(self) -> dict:
        return asdict(self)


def open_loop_eval(model: PolicyModel, data: Dataset, adapters: dict | None = None,
                   batch_size: int = 256, miss_threshold: float = MISS_THRESHOLD) -> OpenLoopMetrics:
    """Ego-plan ADE/FDE and joint-prediction metrics over a dataset."""
    if len(data) == 0:
        raise DataError("open-loop evaluation needs a non-empty dataset")
    cfg = model.cfg
    if cfg.policy == "structured-sampling":
        data.attach_candidates(cfg)
    acc = np.zeros(6)
    P = {k: ad.Tensor(v) for k, v in model.params.items()}
    for a in (adapters or {}).values():
        P.update({k: ad.Tensor(v) for k, v in a.tensors().items()})
    from .policy import policy_forward
    for i in range(0, len(data), batch_size):
        b = data.take(np.arange(i, min(i + batch_size, len(data))))
        res = policy_forward(P, cfg, b.obs, adapters, training=False, seed=0, candidates=b.candidates)
        plan = res.plan.value
        jm = res.dec.joint_modes.value
        probs = _softmax(res.dec.mode_logits.value)
        for j in range(len(b)):
            a_, f_ = ade_fde(plan[j], b.expert_plan[j])
            m = joint_metrics(jm[j], probs[j], b.future[j], b.future_valid[j], miss_threshold)
            acc += (a_, f_, m.min_sade, m.min_sfde, m.bmin_sfde, float(m.miss))
    acc /= len(data)
    return OpenLoopMetrics(*map(float, acc), n=len(data))


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- closed loop

@dataclass(frozen=True)
class EpisodeConfig:
    duration: float = 15.0
    replan_every: int = 2
    dt: float = 0.2
    accel_limit: float = 3.0        # comfort thresholds
    jerk_limit: float = 5.0
    corridor_margin: float = 0.5
    limits: ActuationLimits = field(default_factory=ActuationLimits)

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))

    def hash(self) -> str:
        return hashlib.sha256(repr(asdict(self)).encode()).hexdigest()[:16]


@dataclass
class ClosedLoopMetrics:
    collision: bool
    off_corridor: bool
    progress: float
    comfort: float
    score: float
    mode: str
    failed: bool = False

    def as_dict(self) -> dict:
        return asdict(self)


def driving_score(collision: bool, off_corridor: bool, progress: float, comfort: float) -> float:
    if collision:
        return 0.0
    return (0.5 if off_corridor else 1.0) * 0.5 * (progress + comfort)


class ModelPolicy:
    """Closed-loop wrapper: observation -> ego-frame plan (T, 2)."""

    def __init__(self, model: PolicyModel, adapters: dict | None = None):
        self.model, self.adapters = model, adapters or {}
        self.cfg = model.cfg

    def __call__(self, obs: ObservationSeq) -> np.ndarray:
        return infer(self.model, obs, self.adapters).plan.value[0]


class ExpertPolicy:
    """The scripted expert, driven from the observation alone.

    IDM along the observed lane behind the nearest in-lane agent (predicted at
    constant speed), with the lateral offset decaying toward the centreline.
    """

    def __init__(self, cfg: ModelConfig, idm=None, lane_width: float = 3.5, settle: float = 1.5):
        from .domains import IDMParams
        self.cfg, self.idm = cfg, idm or IDMParams()
        self.lane_width, self.settle = lane_width, settle

    def __call__(self, obs: ObservationSeq) -> np.ndarray:
        cfg, p = self.cfg, self.idm
        lane = LaneFrame(obs.lane[0])
        v = float(obs.ego[0, -1, 3])
        v0 = float(obs.target_speed[0])
        s_e, d_e = (a[0, 0] for a in lane.frenet_np(np.zeros((1, 1, 2))))
        valid = obs.agent_valid[0]
        lead_s, lead_v = math.inf, 0.0
        if valid.any():
            cur = obs.agents[0, valid, -1]
            s_a, d_a = lane.frenet_np(cur[None, :, :2])
            for sa, da, va in zip(s_a[0], d_a[0], cur[:, 3]):
                if abs(da) < (self.lane_width + VEHICLE_WIDTH) / 2 and s_e < sa < lead_s:
                    lead_s, lead_v = sa, float(va)
        from .domains import VEHICLE_LENGTH
        h = cfg.dt / SIM_SUBSTEPS
        s, out = s_e, np.empty(cfg.T)
        lim = ActuationLimits()
        for k in range(cfg.T):
            for _ in range(SIM_SUBSTEPS):
                gap = lead_s - s - VEHICLE_LENGTH
                a = float(idm_accel(v, v0, gap, v - lead_v, p))
                a = min(max(a, lim.accel_min), lim.accel_max)
                s += v * h
                v = max(0.0, v + a * h)
                lead_s += lead_v * h
            out[k] = s
        t = cfg.dt * np.arange(1, cfg.T + 1)
        d = d_e * np.exp(-t / self.settle)
        return lane.to_cartesian(out[None], d[None])[0]


class StationaryPolicy:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg

    def __call__(self, obs: ObservationSeq) -> np.ndarray:
        return np.zeros((self.cfg.T, 2))


def _track(state: np.ndarray, plan_world: np.ndarray, j: int, prev: np.ndarray, dt: float,
           limits: ActuationLimits) -> np.ndarray:
    """Controls reaching waypoint ``j`` of ``plan_world`` one step from now."""
    v_target = float(np.hypot(*(plan_world[j] - prev))) / dt
    a = 2.0 * (v_target - state[3]) / dt
    ahead = np.hypot(*(plan_world - state[:2]).T)
    idx = np.flatnonzero((np.arange(len(plan_world)) >= j) & (ahead >= lookahead(state[3])))
    tgt = plan_world[idx[0]] if len(idx) else plan_world[-1]
    if np.hypot(*(tgt - state[:2])) < 0.5:
        return np.array([a, 0.0])
    return np.array([a, pure_pursuit(state, tgt, limits)])


def at_fault_collisions(states: np.ndarray) -> list:
    """Ego collisions, excluding agents striking the ego from behind."""
    out = []
    h = states[0, 2]
    fwd = np.array([math.cos(h), math.sin(h)])
    for i, j in colliding_pairs(states):
        if i != 0:
            continue
        if float((states[j, :2] - states[0, :2]) @ fwd) < 0.0:
            continue
        out.append(j)
    return out


@dataclass
class EpisodeResult:
    metrics: ClosedLoopMetrics
    times: np.ndarray
    states: np.ndarray          # (n+1, N, 4)
    events: list

    def write_trace(self, path) -> None:
        N = self.states.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"{v}{i}" for i in range(N) for v in ("x", "y", "h", "v")])
            for t, row in zip(self.times, self.states):
                w.writerow([f"{t:.3f}"] + [repr(float(x)) for x in row.reshape(-1)])
            for e in self.events:
                w.writerow(["#", e])


def closed_loop_episode(policy, scenario: Scenario, mode: str, ecfg: EpisodeConfig | None = None,
                        cfg: ModelConfig | None = None) -> EpisodeResult:
    """Run ``policy`` on ``scenario`` for ``ecfg.duration`` seconds.

    The first H-1 steps of the expert log serve as history.  Every
    ``replan_every`` steps the policy plans; the tracker executes the plan's
    leading waypoints.  ``mode`` is ``reactive`` (IDM agents react to the
    ego) or ``nonreactive`` (agents replay the expert log).
    """
    if mode not in ("reactive", "nonreactive"):
        raise ConfigError(f"episode mode must be reactive or nonreactive, got {mode!r}")
    ecfg = ecfg or EpisodeConfig()
    cfg = cfg or getattr(policy, "cfg", None) or ModelConfig()
    H, n, dt = cfg.H, ecfg.n_steps, ecfg.dt
    lim = ecfg.limits
    t0 = H - 1
    log = expert_rollout(scenario, t0 + n, dt, lim, check=False).states
    road = scenario.road
    states = np.empty((t0 + n + 1,) + scenario.states.shape)
    states[:t0 + 1] = log[:t0 + 1]
    events, failed, collided, off = [], False, False, False
    plan_world = prev = None
    j = 0
    h = dt / SIM_SUBSTEPS
    for k in range(t0, t0 + n):
        st = states[k].copy()
        if (k - t0) % ecfg.replan_every == 0:
            obs = observe(road, states[k - H + 1:k + 1], scenario.desired_speed[0], cfg)
            plan = np.asarray(policy(obs), float)
            if plan.shape != (cfg.T, 2) or not np.all(np.isfinite(plan)):
                events.append(f"step {k - t0}: non-finite or malformed plan")
                failed = True
                states = states[:k + 1]
                break
            plan_world = from_ego_frame(plan, st[0, :2], st[0, 2])
            prev, j = st[0, :2].copy(), 0
        u_ego = _track(st[0], plan_world, min(j, cfg.T - 1), prev, dt, lim)
        prev = plan_world[min(j, cfg.T - 1)]
        j += 1
        for _ in range(SIM_SUBSTEPS):
            if mode == "reactive":
                u = idm_controls(road, st, scenario.lanes, scenario.desired_speed, scenario.idm,
                                 lim, only=range(1, len(st)))
            else:
                u = np.zeros((len(st), 2))
            u[0] = u_ego
            st = step_unicycle(st, u, h, lim)
        if mode == "nonreactive":
            st[1:] = log[k + 1, 1:]
        states[k + 1] = st
        hit = at_fault_collisions(st)
        if hit and not collided:
            events.append(f"step {k + 1 - t0}: collision with agent(s) {hit}")
            collided = True
        _, _, dlat = road.nearest_lane(st[0:1, :2])
        if abs(dlat[0]) > road.lane_width / 2 + ecfg.corridor_margin and not off:
            events.append(f"step {k + 1 - t0}: left the corridor ({dlat[0]:.2f} m)")
            off = True
    ep = states[t0:]
    times = dt * np.arange(len(ep))
    if failed:
        m = ClosedLoopMetrics(collided, off, 0.0, 0.0, 0.0, mode, failed=True)
        return EpisodeResult(m, times, ep, events)
    lane = int(scenario.lanes[0])
    s_all, _ = road.project(np.stack([ep[0, 0, :2], ep[-1, 0, :2], log[t0, 0, :2], log[-1, 0, :2]]))
    ego_prog = s_all[lane, 1] - s_all[lane, 0]
    exp_prog = s_all[lane, 3] - s_all[lane, 2]
    progress = float(np.clip(ego_prog / exp_prog, 0.0, 1.0)) if exp_prog > 1e-6 else 1.0
    v = ep[:, 0, 3]
    acc = np.diff(v) / dt
    jerk = np.diff(acc, prepend=acc[0]) / dt
    ok = (np.abs(acc) <= ecfg.accel_limit) & (np.abs(jerk) <= ecfg.jerk_limit)
    comfort = float(ok.mean()) if len(ok) else 1.0
    m = ClosedLoopMetrics(collided, off, progress, comfort,
                          driving_score(collided, off, progress, comfort), mode)
    return EpisodeResult(m, times, ep, events)


def closed_loop_eval(policy, scenarios, mode: str, ecfg: EpisodeConfig | None = None,
                     cfg: ModelConfig | None = None) -> dict:
    """Mean metrics over scenarios plus the per-episode records."""
    recs = [closed_loop_episode(policy, s, mode, ecfg, cfg).metrics for s in scenarios]
    if not recs:
        raise DataError("closed-loop evaluation needs at least one scenario")
    return {"score": float(np.mean([r.score for r in recs])),
            "collision_rate": float(np.mean([r.collision for r in recs])),
            "off_corridor_rate": float(np.mean([r.off_corridor for r in recs])),
            "progress": float(np.mean([r.progress for r in recs])),
            "comfort": float(np.mean([r.comfort for r in recs])),
            "n": len(recs), "mode": mode, "episodes": [r.as_dict() for r in recs]}


# -------------------------------------------------------------------- reports

def _dec(x) -> Decimal:
    return Decimal(repr(float(x)))


def recovered_id(avg: float, ood: float) -> float:
    """ID value implied by a reported ID/OOD average: ``2 * avg - ood``.

    Computed in decimal on the shortest representation of each input, so
    reported two-decimal figures combine without binary rounding residue.
    """
    return float(2 * _dec(avg) - _dec(ood))


def domain_average(id_value: float, ood_value: float) -> float:
    return float((_dec(id_value) + _dec(ood_value)) / 2)


@dataclass
class CrossDomainReport:
    rows: dict                 # row name -> {metric: value}
    forgetting: dict           # metric -> adapted ID - base ID
    eval_hash: str

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "forgetting": self.forgetting,
                           "eval_hash": self.eval_hash}, indent=2, sort_keys=True)

    def to_csv_rows(self, method: str, strategy: str, data_mode: str, split: str) -> list:
        out = []
        for name, metrics in self.rows.items():
            for k, v in sorted(metrics.items()):
                out.append([method, strategy, data_mode, name, split, k, repr(float(v))])
        return out


def cross_domain_report(base: dict, adapted: dict, ood_only: bool = False) -> CrossDomainReport:
    """Assemble per-domain rows, the ID/OOD average, the recovered ID row and forgetting.

    ``base`` and ``adapted`` each map ``"id"``/``"ood"`` to metric dicts and
    ``"eval_hash"`` to the evaluation config hash; hashes must agree.  With
    ``ood_only`` the ID row of ``adapted`` is dropped and rebuilt from the
    average, mirroring tables that report only OOD and ID+OOD.
    """
    hashes = {base.get("eval_hash"), adapted.get("eval_hash")}
    if len(hashes) != 1:
        raise DataError(f"evaluation config hash mismatch: {sorted(map(str, hashes))}")
    for name, res in (("base", base), ("adapted", adapted)):
        if set(res["id"]) != set(res["ood"]):
            raise DataError(f"{name}: ID and OOD metric sets differ")
    keys = sorted(adapted["ood"])
    ood = adapted["ood"]
    avg = {k: domain_average(adapted["id"][k], ood[k]) for k in keys}
    rec = {k: recovered_id(avg[k], ood[k]) for k in keys}
    rows = {"ood": dict(ood), "average": avg, "id_recovered": rec}
    if not ood_only:
        rows["id"] = dict(adapted["id"])
    forgetting = {k: float(_dec(rec[k]) - _dec(base["id"][k])) for k in keys}
    return CrossDomainReport(rows, forgetting, hashes.pop())
