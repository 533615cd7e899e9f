"""Encoder-decoder driving policy with structured and unstructured planning heads.

Encoder: per-agent MLP over each flattened history, masked mean pool across
agents, an ego MLP and a lane MLP, then a fusion MLP producing the latent code.
Decoder: one two-layer MLP per output head.  Positions are produced in units of
``pos_scale`` metres and rescaled on the way out.

Parameter names follow ``<module>.<part>.<layer>.<W|b>``, e.g. ``enc.agent.0.W``
or ``dec.goals.1.b``; adapter tensors live under ``adapter/<Attachment>/``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .adapters import (HEAD_OF_ATTACHMENT, LAYER_OF_ATTACHMENT, Attachment,
                       apply_residual)
from .errors import ConfigError
from .planner import (PlanContext, PlannerConfig, batch_candidates, cost_features,
                      effective_weights, energy, gibbs_log_probs, plan_unrolled,
                      residual_energy)

POLICIES = ("structured-unrolled", "structured-sampling", "unstructured")

HEADS_OF_POLICY = {
    "structured-unrolled": ("joint_modes", "mode_logits", "cost_weights", "goals", "init_trajectory"),
    "structured-sampling": ("joint_modes", "mode_logits", "cost_weights", "goals"),
    "unstructured": ("joint_modes", "mode_logits", "sdv_trajectory"),
}


@dataclass(frozen=True)
class ModelConfig:
    H: int = 10
    T: int = 20
    A_max: int = 4
    M: int = 6
    d_z: int = 64
    n_w: int = 7
    L: int = 20
    dt: float = 0.2
    agent_hidden: int = 64
    lane_hidden: int = 64
    fusion_hidden: int = 128
    head_hidden: int = 128
    policy: str = "structured-unrolled"
    pos_scale: float = 20.0
    speed_scale: float = 10.0
    planner: PlannerConfig = field(default_factory=PlannerConfig)

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy head {self.policy!r}; expected one of {POLICIES}")
        if min(self.H, self.T, self.A_max, self.M, self.d_z, self.L) < 1:
            raise ConfigError("model dimensions must be positive")
        if self.L < 2:
            raise ConfigError("lane context needs at least 2 points")
        if self.n_w != 7:
            raise ConfigError("the cost model has exactly 7 features (n_w=7)")

    @property
    def n_agents(self) -> int:
        """Joint agent count; index 0 is the ego vehicle."""
        return self.A_max + 1

    @property
    def heads(self) -> tuple:
        return HEADS_OF_POLICY[self.policy]

    def head_dims(self) -> dict:
        return {
            "joint_modes": self.M * self.n_agents * self.T * 2,
            "mode_logits": self.M,
            "cost_weights": self.n_w,
            "goals": self.n_agents * 2,
            "init_trajectory": self.T * 2,
            "sdv_trajectory": self.T * 2,
        }

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


# ---------------------------------------------------------------- observations

@dataclass
class ObservationSeq:
    """A batch of observation windows in the ego frame at the current step.

    ego:          (B, H, 4)       x, y, heading, speed
    agents:       (B, A_max, H, 5) same plus validity flag
    lane:         (B, L, 2)       ego-lane centreline points
    target_speed: (B,)
    """

    ego: np.ndarray
    agents: np.ndarray
    lane: np.ndarray
    target_speed: np.ndarray

    def __len__(self):
        return self.ego.shape[0]

    def take(self, idx) -> "ObservationSeq":
        idx = np.asarray(idx)
        return ObservationSeq(self.ego[idx], self.agents[idx], self.lane[idx],
                              self.target_speed[idx])

    @property
    def agent_valid(self) -> np.ndarray:
        """(B, A_max) validity at the current step."""
        return self.agents[:, :, -1, 4] > 0.5

    def validate(self, cfg: ModelConfig) -> None:
        B = len(self)
        want = {"ego": (B, cfg.H, 4), "agents": (B, cfg.A_max, cfg.H, 5),
                "lane": (B, cfg.L, 2), "target_speed": (B,)}
        for name, shape in want.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ConfigError(f"observation field {name} has shape {got}, expected {shape}")

    @staticmethod
    def concat(items) -> "ObservationSeq":
        return ObservationSeq(*(np.concatenate([getattr(o, f) for o in items])
                                for f in ("ego", "agents", "lane", "target_speed")))


def random_observation(cfg: ModelConfig, B: int, seed: int) -> ObservationSeq:
    """Plausible random observations (straight lane, random agents) for tests and timing."""
    rng = np.random.default_rng(seed)
    H, dt = cfg.H, cfg.dt
    v = rng.uniform(3.0, 14.0, B)
    t = (np.arange(H) - (H - 1)) * dt
    ego = np.zeros((B, H, 4))
    ego[:, :, 0] = v[:, None] * t
    ego[:, :, 1] = rng.normal(0, 0.2, (B, 1)) * (t / t.min() if H > 1 else 0)
    ego[:, :, 3] = v[:, None]
    agents = np.zeros((B, cfg.A_max, H, 5))
    valid = rng.random((B, cfg.A_max)) < 0.7
    x0 = rng.uniform(-30, 50, (B, cfg.A_max))
    y0 = rng.choice([-3.5, 0.0, 3.5], (B, cfg.A_max))
    va = rng.uniform(3.0, 14.0, (B, cfg.A_max))
    agents[..., 0] = x0[..., None] + va[..., None] * t
    agents[..., 1] = y0[..., None]
    agents[..., 3] = va[..., None]
    agents[..., 4] = 1.0
    agents[~valid] = 0.0
    lane = np.zeros((B, cfg.L, 2))
    lane[:, :, 0] = -8.0 + 4.0 * np.arange(cfg.L)
    lane[:, :, 1] = rng.normal(0, 0.002, (B, 1)) * lane[:, :, 0] ** 2
    return ObservationSeq(ego, agents, lane, v * rng.uniform(0.9, 1.2, B))


# ------------------------------------------------------------------ parameters

def _layers(cfg: ModelConfig) -> dict:
    """Linear layer name -> (fan_in, fan_out)."""
    ah, lh = cfg.agent_hidden, cfg.lane_hidden
    out = {
        "enc.ego.0": (cfg.H * 4, ah), "enc.ego.1": (ah, ah),
        "enc.agent.0": (cfg.H * 5, ah), "enc.agent.1": (ah, ah),
        "enc.lane.0": (cfg.L * 2 + 1, lh), "enc.lane.1": (lh, lh),
        "enc.fusion.0": (2 * ah + lh, cfg.fusion_hidden), "enc.fusion.1": (cfg.fusion_hidden, cfg.d_z),
    }
    dims = cfg.head_dims()
    for head in cfg.heads:
        out[f"dec.{head}.0"] = (cfg.d_z, cfg.head_hidden)
        out[f"dec.{head}.1"] = (cfg.head_hidden, dims[head])
    return out


def param_shapes(cfg: ModelConfig) -> dict:
    shapes = {}
    for name, (i, o) in _layers(cfg).items():
        shapes[f"{name}.W"] = (i, o)
        shapes[f"{name}.b"] = (o,)
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> dict:
    """Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases."""
    params = {}
    for name, (i, o) in _layers(cfg).items():
        rng = np.random.default_rng(ad.derive_seed(seed, name))
        lim = np.sqrt(6.0 / (i + o))
        params[f"{name}.W"] = rng.uniform(-lim, lim, size=(i, o))
        params[f"{name}.b"] = np.zeros(o)
    return params


@dataclass
class PolicyModel:
    cfg: ModelConfig
    params: dict

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int) -> "PolicyModel":
        return cls(cfg, init_params(cfg, seed))

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def last_layer_names(self) -> list:
        return [f"dec.{h}.1.{k}" for h in self.cfg.heads for k in ("W", "b")]


# --------------------------------------------------------------------- forward

def _linear(P: dict, name: str, x, adapters: dict, training: bool, seed: int):
    y = x @ P[f"{name}.W"] + P[f"{name}.b"]
    for att, layer in LAYER_OF_ATTACHMENT.items():
        if layer == name and att in adapters:
            y = _residual(P, adapters[att], x, y, training, seed)
    return y


def _residual(P: dict, adapter, x, base, training, seed):
    a_name, b_name = adapter.names()
    weights = (P[a_name], P[b_name]) if a_name in P else None
    return apply_residual(adapter, x, base, training, seed, weights)


def _mlp2(P, name, x, adapters, training, seed, final_tanh=True):
    h = ad.tanh(_linear(P, f"{name}.0", x, adapters, training, seed))
    y = _linear(P, f"{name}.1", h, adapters, training, seed)
    return ad.tanh(y) if final_tanh else y


def encode(P: dict, cfg: ModelConfig, obs: ObservationSeq, training: bool = False,
           seed: int = 0, adapters: dict | None = None) -> ad.Tensor:
    """Latent code (B, d_z).  Invalid agents are zeroed and excluded from the pool."""
    obs.validate(cfg)
    adapters = adapters or {}
    B, H = len(obs), cfg.H
    ps, vs = cfg.pos_scale, cfg.speed_scale
    ego = obs.ego * np.array([1 / ps, 1 / ps, 1.0, 1 / vs])
    valid = obs.agent_valid
    agents = np.where(valid[:, :, None, None], obs.agents, 0.0)
    agents = agents * np.array([1 / ps, 1 / ps, 1.0, 1 / vs, 1.0])
    lane = np.concatenate([obs.lane.reshape(B, -1) / ps, obs.target_speed[:, None] / vs], axis=1)

    e = _mlp2(P, "enc.ego", ad.Tensor(ego.reshape(B, H * 4)), adapters, training, seed)
    h = _mlp2(P, "enc.agent", ad.Tensor(agents.reshape(B, cfg.A_max, H * 5)), adapters, training, seed)
    count = np.maximum(valid.sum(axis=1), 1).astype(float)[:, None]
    pooled = (h * valid[:, :, None].astype(float)).sum(axis=1) / count
    ln = _mlp2(P, "enc.lane", ad.Tensor(lane), adapters, training, seed)
    fused = ad.concat([e, pooled, ln], axis=1)
    return _mlp2(P, "enc.fusion", fused, adapters, training, seed, final_tanh=False)


class DecoderOutput:
    """Decoder heads of one batch; disabled heads raise ConfigError on access.

    joint_modes (B, M, A, T, 2), mode_logits (B, M), cost_weights_raw (B, n_w),
    goals (B, A, 2), init_trajectory (B, T, 2), sdv_trajectory (B, T, 2).
    ``cost_residual`` holds the CostWeights adapter output, if attached.
    """

    _FIELDS = {"joint_modes": "joint_modes", "mode_logits": "mode_logits",
               "cost_weights_raw": "cost_weights", "goals": "goals",
               "init_trajectory": "init_trajectory", "sdv_trajectory": "sdv_trajectory"}

    def __init__(self, heads: dict, cost_residual=None):
        self._heads = heads
        self.cost_residual = cost_residual

    def __getattr__(self, name):
        if name.startswith("_") or name not in DecoderOutput._FIELDS:
            raise AttributeError(name)
        head = DecoderOutput._FIELDS[name]
        if head not in self._heads:
            raise ConfigError(f"decoder head {head!r} is disabled in this configuration")
        return self._heads[head]

    def has(self, head: str) -> bool:
        return head in self._heads

    @property
    def enabled(self) -> tuple:
        return tuple(self._heads)


def decode(P: dict, cfg: ModelConfig, z, training: bool = False, seed: int = 0,
           adapters: dict | None = None) -> DecoderOutput:
    adapters = adapters or {}
    z = ad.as_tensor(z)
    B = z.shape[0]
    if z.shape[-1] != cfg.d_z:
        raise ConfigError(f"latent width {z.shape[-1]} != d_z={cfg.d_z}")
    by_head = {h: att for att, h in HEAD_OF_ATTACHMENT.items() if att in adapters}
    for att in adapters:
        if att in HEAD_OF_ATTACHMENT and HEAD_OF_ATTACHMENT[att] not in cfg.heads:
            raise ConfigError(f"{att.value} adapter needs the disabled head "
                              f"{HEAD_OF_ATTACHMENT[att]!r}")
    out, cost_res = {}, None
    A, T, M = cfg.n_agents, cfg.T, cfg.M
    for head in cfg.heads:
        y = _mlp2(P, f"dec.{head}", z, adapters, training, seed, final_tanh=False)
        att = by_head.get(head)
        if att is Attachment.COST_WEIGHTS:
            # additive residual energy: E = softplus(w) . phi + w_res . phi
            zero = ad.Tensor(np.zeros((B, cfg.n_w)))
            cost_res = _residual(P, adapters[att], z, zero, training, seed)
        elif att is not None:
            y = _residual(P, adapters[att], z, y, training, seed)
        if head == "joint_modes":
            y = (y * cfg.pos_scale).reshape(B, M, A, T, 2)
        elif head == "goals":
            y = (y * cfg.pos_scale).reshape(B, A, 2)
        elif head in ("init_trajectory", "sdv_trajectory"):
            y = (y * cfg.pos_scale).reshape(B, T, 2)
        out[head] = y
    return DecoderOutput(out, cost_res)


@dataclass
class ForwardResult:
    dec: DecoderOutput
    plan: ad.Tensor                      # (B, T, 2) selected / optimised ego plan
    z: ad.Tensor
    candidates: np.ndarray | None = None  # (B, K, T, 2)
    energies: ad.Tensor | None = None     # (B, K) base energies
    residual_energies: ad.Tensor | None = None
    log_probs: ad.Tensor | None = None    # (B, K) Gibbs log-probabilities
    features: ad.Tensor | None = None     # (B, K, 7)
    best_mode: np.ndarray | None = None


def predicted_agents(dec: DecoderOutput):
    """Agent futures of the most likely joint mode, (B, A_max, T, 2), and mode index."""
    jm = dec.joint_modes
    best = np.argmax(dec.mode_logits.value, axis=1)
    return jm[np.arange(jm.shape[0]), best][:, 1:], best


def policy_forward(P: dict, cfg: ModelConfig, obs: ObservationSeq, adapters: dict | None = None,
                   training: bool = False, seed: int = 0,
                   candidates: np.ndarray | None = None) -> ForwardResult:
    """Encode, decode and plan.  ``P`` maps parameter names to graph tensors."""
    adapters = adapters or {}
    z = encode(P, cfg, obs, training, seed, adapters)
    dec = decode(P, cfg, z, training, seed, adapters)
    pc = cfg.planner
    agents, best = predicted_agents(dec)
    mask = obs.agent_valid
    res = ForwardResult(dec, None, z, best_mode=best)
    if cfg.policy == "unstructured":
        plan = dec.sdv_trajectory
    else:
        ctx = PlanContext.from_obs(obs, cfg.T, cfg.dt, pc)
        goal = dec.goals[:, 0]
        if cfg.policy == "structured-unrolled":
            w = effective_weights(dec.cost_weights_raw)
            if dec.cost_residual is not None:
                w = w + dec.cost_residual
            plan = plan_unrolled(w, ctx, goal, dec.init_trajectory, pc, agents, mask)
        else:
            cand = batch_candidates(obs, pc, cfg.T, cfg.dt) if candidates is None else candidates
            phi = cost_features(ad.Tensor(cand), ctx, goal, agents, mask)
            E = energy(dec.cost_weights_raw, phi)
            total = E
            if dec.cost_residual is not None:
                res.residual_energies = residual_energy(dec.cost_residual, phi)
                total = E + res.residual_energies
            res.candidates, res.energies, res.features = cand, E, phi
            res.log_probs = gibbs_log_probs(total, pc.temperature)
            pick = np.argmin(total.value, axis=1)
            plan = ad.Tensor(cand[np.arange(len(obs)), pick])
    if Attachment.FINAL_OUTPUT in adapters:
        B = len(obs)
        flat = _residual(P, adapters[Attachment.FINAL_OUTPUT], z,
                         ad.Tensor(np.zeros((B, cfg.T * 2))), training, seed)
        plan = plan + (flat * cfg.pos_scale).reshape(B, cfg.T, 2)
    res.plan = plan
    return res


def as_graph(params: dict, trainable=None) -> dict:
    """Wrap arrays as Parameters (names in ``trainable``, or all) or constants."""
    out = {}
    for k, v in params.items():
        if trainable is None or trainable.get(k, False):
            out[k] = ad.Parameter(v, k)
        else:
            out[k] = ad.Tensor(v)
    return out


def infer(model: PolicyModel, obs: ObservationSeq, adapters: dict | None = None,
          seed: int = 0) -> ForwardResult:
    """Evaluation-mode forward pass with constant parameters."""
    P = {k: ad.Tensor(v) for k, v in model.params.items()}
    for a in (adapters or {}).values():
        P.update({k: ad.Tensor(v) for k, v in a.tensors().items()})
    return policy_forward(P, model.cfg, obs, adapters, training=False, seed=seed)


# ------------------------------------------------------------------ kinematics

@dataclass(frozen=True)
class ActuationLimits:
    accel_min: float = -8.0
    accel_max: float = 4.0
    yaw_rate_max: float = 1.0


def rollout_kinematics(controls, start, dt: float, limits: ActuationLimits | None = None,
                       substeps: int = 1):
    """Unicycle Euler integration.

    controls: (T, 2) acceleration [m/s^2] and yaw rate [rad/s]; start: (x, y,
    heading, speed).  Controls are clamped to ``limits`` and speed to >= 0.
    Returns ``(states (T, 4), n_clamped)``, the state after each step.
    """
    if not dt > 0:
        raise ConfigError("dt must be positive")
    limits = limits or ActuationLimits()
    u = np.asarray(controls, dtype=np.float64)
    lo = np.array([limits.accel_min, -limits.yaw_rate_max])
    hi = np.array([limits.accel_max, limits.yaw_rate_max])
    clamped = np.clip(u, lo, hi)
    n_clamped = int(np.sum(clamped != u))
    x, y, h, v = (float(c) for c in start)
    h_dt = dt / substeps
    out = np.empty((len(u), 4))
    for k, (a, w) in enumerate(clamped):
        for _ in range(substeps):
            x += v * np.cos(h) * h_dt
            y += v * np.sin(h) * h_dt
            h += w * h_dt
            v = max(0.0, v + a * h_dt)
        out[k] = (x, y, h, v)
    return out, n_clamped
