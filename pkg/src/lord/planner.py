"""Cost-based planning: candidate scoring and unrolled gradient descent.

Both planners minimise ``E_w(a, o) = softplus(w_raw) . phi(a, o)`` over the ego
trajectory ``a`` (T x 2 positions in the ego frame).  Candidate scoring
evaluates ``phi`` on a finite lane-aligned set; unrolled descent takes explicit
gradient steps on a smooth variant of the same seven features, written with
graph operations so the whole unroll stays differentiable.

Feature order: progress shortfall, lateral offset, speed deviation,
acceleration, jerk, agent proximity, goal distance.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError, NumericalError

N_FEATURES = 7
FEATURE_NAMES = ("progress", "lateral", "speed", "accel", "jerk", "proximity", "goal")


@dataclass(frozen=True)
class PlannerConfig:
    accel_set: tuple = (-4.0, -2.0, -1.0, 0.0, 1.0, 2.0)
    lateral_set: tuple = (-1.0, -0.5, 0.0, 0.5, 1.0)
    v_max: float = 20.0
    temperature: float = 1.0
    unroll_steps: int = 10
    step_size: float = 0.05
    max_disp: float = 0.5
    agent_radius: float = 1.0
    margin: float = 3.0

    @property
    def n_candidates(self) -> int:
        return len(self.accel_set) * len(self.lateral_set)


# ------------------------------------------------------------------ lane frame

class LaneFrame:
    """Piecewise-linear lane centrelines, one per batch row.

    Arc length ``s`` and signed lateral offset ``d`` (positive to the left) are
    computed against the nearest segment; the first and last segments extend
    indefinitely.  Segment choice is a constant of the graph, so within one
    segment ``(s, d)`` is affine in the position.
    """

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 2:
            pts = pts[None]
        if pts.shape[1] < 2:
            raise ContractError("lane polyline needs at least 2 points")
        seg = pts[:, 1:] - pts[:, :-1]
        length = np.hypot(seg[..., 0], seg[..., 1])
        if np.any(length.sum(axis=1) <= 1e-9):
            raise ContractError("degenerate lane polyline (zero length)")
        self.valid = length > 1e-9
        safe = np.where(self.valid, length, 1.0)
        self.tangent = seg / safe[..., None]
        self.normal = np.stack([-self.tangent[..., 1], self.tangent[..., 0]], axis=-1)
        self.start = pts[:, :-1]
        self.length = length
        self.arc = np.concatenate([np.zeros((pts.shape[0], 1)), np.cumsum(length, axis=1)[:, :-1]], axis=1)
        self.points = pts

    @property
    def n_segments(self) -> int:
        return self.start.shape[1]

    def select(self, P: np.ndarray) -> np.ndarray:
        """Index of the nearest segment for positions ``P`` of shape (B, N, 2)."""
        rel = P[:, :, None, :] - self.start[:, None]
        u = np.einsum("bnsk,bsk->bns", rel, self.tangent)
        S = self.n_segments
        lo = np.where(np.arange(S) == 0, -np.inf, 0.0)
        hi = np.where(np.arange(S) == S - 1, np.inf, self.length)[:, None, :]
        uc = np.clip(u, lo, hi)
        closest = self.start[:, None] + uc[..., None] * self.tangent[:, None]
        dist2 = np.sum((P[:, :, None, :] - closest) ** 2, axis=-1)
        dist2 = np.where(self.valid[:, None, :], dist2, np.inf)
        return np.argmin(dist2, axis=-1)

    def gather(self, idx: np.ndarray):
        b = np.arange(idx.shape[0])[:, None]
        return self.start[b, idx], self.tangent[b, idx], self.normal[b, idx], self.arc[b, idx]

    def frenet(self, P):
        """``(s, d, tangent, normal)`` for positions (B, N, 2); ``s``/``d`` are graph tensors."""
        P = ad.as_tensor(P)
        q, e, n, arc = self.gather(self.select(P.value))
        rel = P - q
        s = (rel * e).sum(axis=-1) + arc
        d = (rel * n).sum(axis=-1)
        return s, d, e, n

    def frenet_np(self, P: np.ndarray):
        s, d, _, _ = self.frenet(P)
        return s.value, d.value

    def to_cartesian(self, s: np.ndarray, d: np.ndarray) -> np.ndarray:
        """Positions for arc lengths ``s`` and offsets ``d`` of shape (B, N)."""
        B = s.shape[0]
        out = np.empty(s.shape + (2,))
        for b in range(B):
            segs = np.flatnonzero(self.valid[b])
            ends = self.arc[b, segs] + self.length[b, segs]
            idx = segs[np.clip(np.searchsorted(ends, s[b], side="left"), 0, len(segs) - 1)]
            u = s[b] - self.arc[b, idx]
            out[b] = (self.start[b, idx] + u[:, None] * self.tangent[b, idx]
                      + d[b][:, None] * self.normal[b, idx])
        return out


# ------------------------------------------------------------------ candidates

@dataclass
class CandidateSet:
    positions: np.ndarray          # (K, T+1, 2), row 0 is the start position
    accel: np.ndarray              # (K,) longitudinal acceleration level
    lateral: np.ndarray            # (K,) lateral target offset
    speeds: np.ndarray             # (K, T+1) longitudinal speed profile

    @property
    def trajectories(self) -> np.ndarray:
        return self.positions[:, 1:]

    def __len__(self):
        return self.positions.shape[0]


def _quintic(u):
    return u ** 3 * (10.0 - 15.0 * u + 6.0 * u * u)


def generate_candidates(start, speed: float, lane_points, accel_set, lateral_set,
                        T: int, dt: float, v_max: float = 20.0) -> CandidateSet:
    """Constant-acceleration arc profiles x quintic lateral blends to target offsets.

    Candidate ``k = i * len(lateral_set) + j`` pairs ``accel_set[i]`` with
    ``lateral_set[j]``.  Every candidate's row 0 equals ``start`` exactly.
    """
    if not len(accel_set) or not len(lateral_set):
        raise ContractError("empty accel or lateral set")
    start = np.asarray(start, dtype=np.float64)
    lane = LaneFrame(lane_points)
    s0, d0 = lane.frenet_np(start[None, None])
    s0, d0 = float(s0[0, 0]), float(d0[0, 0])
    acc = np.repeat(np.asarray(accel_set, float), len(lateral_set))
    lat = np.tile(np.asarray(lateral_set, float), len(accel_set))
    t = np.arange(T + 1) * dt
    v = np.clip(speed + acc[:, None] * t[None], 0.0, v_max)
    ds = 0.5 * (v[:, 1:] + v[:, :-1]) * dt
    s = s0 + np.concatenate([np.zeros((len(acc), 1)), np.cumsum(ds, axis=1)], axis=1)
    blend = _quintic(np.arange(T + 1) / T)
    d = d0 + (lat[:, None] - d0) * blend[None]
    K = len(acc)
    xy = lane.to_cartesian(s.reshape(1, -1), d.reshape(1, -1)).reshape(K, T + 1, 2)
    xy = xy - xy[:, :1] + start
    return CandidateSet(xy, acc, lat, v)


def batch_candidates(obs, pcfg: PlannerConfig, T: int, dt: float) -> np.ndarray:
    """Candidate trajectories (B, K, T, 2) for a batch of observations."""
    out = np.empty((len(obs), pcfg.n_candidates, T, 2))
    for b in range(len(obs)):
        c = generate_candidates(obs.ego[b, -1, :2], obs.ego[b, -1, 3], obs.lane[b],
                                pcfg.accel_set, pcfg.lateral_set, T, dt, pcfg.v_max)
        out[b] = c.trajectories
    return out


# -------------------------------------------------------------------- features

@dataclass
class PlanContext:
    """Per-batch constants shared by the cost features of one observation batch."""

    lane: LaneFrame
    target_speed: np.ndarray      # (B,)
    origin: np.ndarray            # (B, 2) current ego position
    dt: float
    T: int
    agent_radius: float = 1.0
    margin: float = 3.0
    s0: np.ndarray = field(init=False)

    def __post_init__(self):
        self.s0 = self.lane.frenet_np(self.origin[:, None])[0][:, 0]

    @classmethod
    def from_obs(cls, obs, T: int, dt: float, pcfg: PlannerConfig | None = None):
        pcfg = pcfg or PlannerConfig()
        return cls(LaneFrame(obs.lane), np.asarray(obs.target_speed, float),
                   obs.ego[:, -1, :2].astype(float), dt, T, pcfg.agent_radius, pcfg.margin)

    @property
    def target_distance(self) -> np.ndarray:
        return self.target_speed * self.T * self.dt


def _with_origin(traj: ad.Tensor, origin: np.ndarray) -> ad.Tensor:
    """(B, K, T, 2) -> (B, K, T+1, 2) with the current position prepended."""
    B, K = traj.shape[:2]
    o = np.broadcast_to(origin[:, None, None, :], (B, K, 1, 2))
    return ad.concat([ad.Tensor(o), traj], axis=2)


def _proximity_hinge(traj: ad.Tensor, agents, agent_mask, reach: float, eps: float = 1e-9):
    """Sum over steps and valid agents of hinge(reach - distance)^2 -> (B, K)."""
    if agents is None:
        B, K = traj.shape[:2]
        return ad.Tensor(np.zeros((B, K)))
    agents = ad.as_tensor(agents)                                  # (B, N, T, 2)
    diff = ad.expand_dims(traj, 2) - ad.expand_dims(agents, 1)     # (B, K, N, T, 2)
    dist = ad.sqrt((diff * diff).sum(axis=-1) + eps)
    h = ad.relu(reach - dist)
    m = np.asarray(agent_mask, float)[:, None, :, None]
    return (h * h * m).sum(axis=(2, 3))


def cost_features(traj, ctx: PlanContext, goal, agents=None, agent_mask=None) -> ad.Tensor:
    """Seven penalty features for trajectories ``traj`` (B, K, T, 2) -> (B, K, 7).

    progress   max(0, v_target * T * dt - arc progress)            [m]
    lateral    mean |lateral offset from the centreline|           [m]
    speed      mean |arc speed - v_target|                         [m/s]
    accel      mean squared acceleration                           [m^2/s^4]
    jerk       mean squared jerk                                   [m^2/s^6]
    proximity  sum of hinge(2 r_agent + margin - distance)^2       [m^2]
    goal       final distance to ``goal``                          [m]
    """
    traj = ad.as_tensor(traj)
    B, K, T, _ = traj.shape
    full = _with_origin(traj, ctx.origin)                          # (B, K, T+1, 2)
    s, d, _, _ = ctx.lane.frenet(full.reshape(B, K * (T + 1), 2))
    s = s.reshape(B, K, T + 1)
    d = d.reshape(B, K, T + 1)
    dt = ctx.dt
    vt = ctx.target_speed[:, None]

    progress = ad.relu(ctx.target_distance[:, None] - (s[:, :, T] - ctx.s0[:, None]))
    lateral = ad.tabs(d[:, :, 1:]).mean(axis=-1)
    speed = ad.tabs((s[:, :, 1:] - s[:, :, :-1]) * (1.0 / dt) - vt[..., None]).mean(axis=-1)
    vel = (full[:, :, 1:] - full[:, :, :-1]) * (1.0 / dt)
    acc = (vel[:, :, 1:] - vel[:, :, :-1]) * (1.0 / dt)
    jerk = (acc[:, :, 1:] - acc[:, :, :-1]) * (1.0 / dt)
    accel = (acc * acc).sum(axis=-1).mean(axis=-1)
    jerk2 = (jerk * jerk).sum(axis=-1).mean(axis=-1)
    prox = _proximity_hinge(traj, agents, agent_mask, 2 * ctx.agent_radius + ctx.margin)
    g = ad.as_tensor(goal)
    gd = traj[:, :, T - 1] - ad.expand_dims(g, 1)
    goal_dist = ad.sqrt((gd * gd).sum(axis=-1) + 1e-12)
    return ad.stack([progress, lateral, speed, accel, jerk2, prox, goal_dist], axis=-1)


def cost_features_np(traj, ctx: PlanContext, goal, agents=None, agent_mask=None) -> np.ndarray:
    return cost_features(traj, ctx, goal, agents, agent_mask).value


# --------------------------------------------------------------------- energy

def effective_weights(raw) -> ad.Tensor:
    return ad.softplus(raw)


def energy(w_raw, phi) -> ad.Tensor:
    """``softplus(w_raw) . phi`` along the last axis; ``w_raw`` broadcasts over candidates."""
    w = effective_weights(w_raw)
    phi = ad.as_tensor(phi)
    if w.shape[-1] != phi.shape[-1]:
        raise ContractError(f"weight dim {w.shape[-1]} != feature dim {phi.shape[-1]}")
    if w.ndim == phi.ndim - 1:
        w = ad.expand_dims(w, -2)
    return (w * phi).sum(axis=-1)


def residual_energy(w_res, phi) -> ad.Tensor:
    """Linear residual energy ``w_res . phi``; zero when ``w_res`` is zero."""
    w_res, phi = ad.as_tensor(w_res), ad.as_tensor(phi)
    if w_res.ndim == phi.ndim - 1:
        w_res = ad.expand_dims(w_res, -2)
    return (w_res * phi).sum(axis=-1)


@dataclass
class EnergyTable:
    energies: np.ndarray
    temperature: float = 1.0
    residual: np.ndarray | None = None

    def __post_init__(self):
        self.energies = np.asarray(self.energies, dtype=np.float64)
        if self.energies.shape[-1] < 1:
            raise ContractError("energy table needs K >= 1")
        if not self.temperature > 0:
            raise ContractError(f"temperature must be positive, got {self.temperature}")
        if not np.all(np.isfinite(self.energies)):
            raise ContractError("energy table contains non-finite values")

    @property
    def total(self) -> np.ndarray:
        return self.energies if self.residual is None else self.energies + self.residual


def select_argmin(table: EnergyTable, candidates=None):
    """Index of the lowest total energy (first index on ties) and its trajectory."""
    idx = int(np.argmin(table.total))
    traj = None
    if candidates is not None:
        traj = candidates.trajectories[idx] if isinstance(candidates, CandidateSet) else candidates[idx]
    return idx, traj


def gibbs_probs(table: EnergyTable) -> np.ndarray:
    z = -table.total / table.temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def gibbs_log_probs(E, temperature: float = 1.0) -> ad.Tensor:
    """Graph version: log softmax of ``-E / temperature`` along the last axis."""
    return ad.log_softmax(ad.as_tensor(E) * (-1.0 / temperature), axis=-1)


def compose_energy(base: EnergyTable, residual: EnergyTable) -> EnergyTable:
    """Product of experts: energies add, so Gibbs factors multiply."""
    if base.total.shape != residual.total.shape:
        raise ContractError(f"cannot compose energy tables of shapes "
                            f"{base.total.shape} and {residual.total.shape}")
    if base.temperature != residual.temperature:
        raise ContractError("cannot compose energy tables with different temperatures")
    return EnergyTable(base.total + residual.total, base.temperature)


# ------------------------------------------------------------ unrolled descent

SMOOTH_SCALE = np.array([0.1, 1.0, 1.0, 0.25, 1.0 / 16.0, 1.0, 1.0])


def _second_diff_ops(T: int):
    """Gradient operators for sum ||D2 p||^2 and sum ||D3 p||^2 over p_0..p_T,
    restricted to the free rows p_1..p_T."""
    n = T + 1
    D2 = np.zeros((n - 2, n))
    for i in range(n - 2):
        D2[i, i:i + 3] = (1.0, -2.0, 1.0)
    D3 = np.zeros((n - 3, n))
    for i in range(n - 3):
        D3[i, i:i + 4] = (-1.0, 3.0, -3.0, 1.0)
    return 2.0 * (D2.T @ D2)[1:], 2.0 * (D3.T @ D3)[1:], D2, D3


_DIFF_CACHE: dict = {}


def _diff_ops(T: int):
    if T not in _DIFF_CACHE:
        _DIFF_CACHE[T] = _second_diff_ops(T)
    return _DIFF_CACHE[T]


def smooth_features(plan, ctx: PlanContext, goal, agents=None, agent_mask=None) -> ad.Tensor:
    """Differentiable squared-form features of ``plan`` (B, T, 2) -> (B, 7).

    Same seven quantities as :func:`cost_features`, summed over waypoints in
    squared form and scaled by ``SMOOTH_SCALE`` so gradient steps stay stable.
    """
    plan = ad.as_tensor(plan)
    B, T, _ = plan.shape
    s, d, _, _ = ctx.lane.frenet(plan)
    _, _, D2, D3 = _diff_ops(T)
    full = ad.concat([ad.Tensor(ctx.origin[:, None]), plan], axis=1)
    short = ad.relu(ctx.target_distance - (s[:, T - 1] - ctx.s0))
    s_full = ad.concat([ad.Tensor(ctx.s0[:, None]), s], axis=1)
    r = s_full[:, 1:] - s_full[:, :-1] - (ctx.target_speed * ctx.dt)[:, None]
    a2 = ad.matmul(ad.Tensor(D2), full)
    j3 = ad.matmul(ad.Tensor(D3), full)
    prox = _proximity_hinge(ad.expand_dims(plan, 1), agents, agent_mask,
                            2 * ctx.agent_radius + ctx.margin)[:, 0]
    gd = plan[:, T - 1] - ad.as_tensor(goal)
    feats = ad.stack([short * short, (d * d).sum(axis=-1), (r * r).sum(axis=-1),
                      (a2 * a2).sum(axis=(1, 2)), (j3 * j3).sum(axis=(1, 2)),
                      prox, (gd * gd).sum(axis=-1)], axis=-1)
    return feats * SMOOTH_SCALE


def smooth_energy_grad(plan, w, ctx: PlanContext, goal, agents=None, agent_mask=None,
                       eps: float = 1e-9) -> ad.Tensor:
    """Analytic gradient of ``w . smooth_features(plan)`` w.r.t. ``plan``.

    Written in graph operations, so it is itself differentiable w.r.t. ``w``,
    ``plan``, ``goal`` and ``agents``.  Segment choice is held fixed.
    """
    plan, w = ad.as_tensor(plan), ad.as_tensor(w)
    B, T, _ = plan.shape
    w = w * SMOOTH_SCALE
    wc = [w[:, i:i + 1] for i in range(N_FEATURES)]
    s, d, e, n = ctx.lane.frenet(plan)
    G2, G3, _, _ = _diff_ops(T)
    full = ad.concat([ad.Tensor(ctx.origin[:, None]), plan], axis=1)

    last = np.zeros((1, T, 1))
    last[0, -1, 0] = 1.0
    # d/ds_t of each arc-length term
    short = ad.relu(ctx.target_distance - (s[:, T - 1] - ctx.s0))
    g_s_prog = ad.expand_dims(-2.0 * short, 1) * last[..., 0]
    s_full = ad.concat([ad.Tensor(ctx.s0[:, None]), s], axis=1)
    r = s_full[:, 1:] - s_full[:, :-1] - (ctx.target_speed * ctx.dt)[:, None]
    r_next = ad.concat([r[:, 1:], ad.Tensor(np.zeros((B, 1)))], axis=1)
    g_s_speed = 2.0 * (r - r_next)
    g_s = wc[0] * g_s_prog + wc[2] * g_s_speed
    grad = ad.expand_dims(g_s, -1) * e
    grad = grad + ad.expand_dims(wc[1] * (2.0 * d), -1) * n
    smooth = ad.matmul(ad.Tensor(G2), full) * ad.expand_dims(wc[3], -1) \
        + ad.matmul(ad.Tensor(G3), full) * ad.expand_dims(wc[4], -1)
    grad = grad + smooth
    if agents is not None:
        agents = ad.as_tensor(agents)                          # (B, N, T, 2)
        diff = ad.expand_dims(plan, 1) - agents
        dist = ad.sqrt((diff * diff).sum(axis=-1) + eps)
        reach = 2 * ctx.agent_radius + ctx.margin
        h = ad.relu(reach - dist) * np.asarray(agent_mask, float)[:, :, None]
        g_prox = (ad.expand_dims(-2.0 * h / dist, -1) * diff).sum(axis=1)
        grad = grad + g_prox * ad.expand_dims(wc[5], -1)
    gd = plan[:, T - 1] - ad.as_tensor(goal)
    grad = grad + ad.expand_dims(2.0 * gd * wc[6], 1) * last
    return grad


def unrolled_descent(grad_fn, a0, n_steps: int, step_size: float,
                     max_disp: float = 0.5) -> ad.Tensor:
    """``n_steps`` explicit gradient steps from ``a0``; each waypoint moves at most
    ``max_disp`` per step.  ``grad_fn(a)`` returns the energy gradient as a tensor."""
    if n_steps < 0:
        raise ContractError("n_steps must be >= 0")
    if not step_size > 0:
        raise ContractError("step size must be positive")
    a = ad.as_tensor(a0)
    for k in range(n_steps):
        g = ad.as_tensor(grad_fn(a))
        if not np.all(np.isfinite(g.value)):
            raise NumericalError(f"non-finite energy gradient at unroll step {k}")
        delta = g * step_size
        norm = ad.sqrt((delta * delta).sum(axis=-1, keepdims=True) + 1e-18)
        delta = delta * ad.minimum(1.0, max_disp / norm)
        a = a - delta
    return a


def plan_unrolled(w, ctx: PlanContext, goal, a0, pcfg: PlannerConfig,
                  agents=None, agent_mask=None, n_steps: int | None = None) -> ad.Tensor:
    """Unrolled descent on the smooth energy with effective weights ``w`` (B, 7)."""
    n = pcfg.unroll_steps if n_steps is None else n_steps
    return unrolled_descent(
        lambda a: smooth_energy_grad(a, w, ctx, goal, agents, agent_mask),
        a0, n, pcfg.step_size, pcfg.max_disp)
