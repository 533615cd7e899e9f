"""Imitation training, fine-tuning strategies and the ID/OOD training mixture."""
from __future__ import annotations

import csv
import math
import re
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .adapters import (ADAPTER_PREFIX, Attachment, FineTuneStrategy, Strategy, build_adapters,
                       trainable_mask)
from .checkpoint import load_checkpoint, save_checkpoint
from .domains import Dataset
from .errors import ConfigError, DataError, NumericalError
from .optim import AdamState, adam_step
from .planner import PlanContext
from .policy import ModelConfig, ObservationSeq, PolicyModel, as_graph, param_shapes, policy_forward


@dataclass(frozen=True)
class LossConfig:
    w_reg: float = 1.0        # winner-takes-all joint regression
    w_cls: float = 1.0        # mode classification
    w_plan: float = 1.0       # ego plan regression (unrolled / unstructured heads)
    w_cand: float = 1.0       # candidate classification (sampling head)
    w_prog: float = 0.0       # progress reward regularizer
    w_coll: float = 0.0       # collision reward regularizer
    p_hist: float = 0.0       # history dropout rate

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if v < 0:
                raise ConfigError(f"loss weight {k} must be >= 0")
        if self.p_hist > 1:
            raise ConfigError("history dropout rate must lie in [0, 1]")


# ------------------------------------------------------------------- losses

def wta_terms(joint_modes, mode_logits, future: np.ndarray, valid: np.ndarray):
    """Winner-takes-all regression and mode cross-entropy, both averaged over the batch.

    Per mode the regression is the mean squared displacement over valid agents
    and all steps; the winning mode is the one with the smallest value.
    """
    valid = np.asarray(valid, bool)
    n_valid = valid.sum(axis=1)
    if np.any(n_valid == 0):
        raise DataError("imitation loss needs at least one valid agent per sample")
    jm = ad.as_tensor(joint_modes)
    diff = jm - future[:, None]                                    # (B, M, A, T, 2)
    msd = (diff * diff).sum(axis=-1).mean(axis=-1)                 # (B, M, A)
    w = (valid / n_valid[:, None])[:, None, :]
    per_mode = (msd * w).sum(axis=-1)                              # (B, M)
    best = np.argmin(per_mode.value, axis=1)
    rows = np.arange(len(best))
    reg = per_mode[rows, best].mean()
    ce = -ad.log_softmax(ad.as_tensor(mode_logits), axis=-1)[rows, best].mean()
    return reg, ce, best


def plan_regression(plan, expert: np.ndarray):
    d = ad.as_tensor(plan) - expert
    return (d * d).sum(axis=-1).mean()


def candidate_ce(log_probs, labels: np.ndarray):
    rows = np.arange(len(labels))
    return -ad.as_tensor(log_probs)[rows, np.asarray(labels, int)].mean()


def reward_regularization(probs, progress, expert_progress, proximity,
                          w_prog: float = 1.0, w_coll: float = 1.0):
    """``w_prog * E_p[max(0, expert progress - progress)] + w_coll * E_p[proximity]``.

    probs, progress, proximity are (B, K); expert_progress is (B,).  The
    expectation is under the candidate distribution, averaged over the batch.
    """
    p = ad.as_tensor(probs)
    short = ad.relu(ad.expand_dims(ad.as_tensor(expert_progress), 1) - ad.as_tensor(progress))
    prog = (p * short).sum(axis=-1).mean()
    coll = (p * ad.as_tensor(proximity)).sum(axis=-1).mean()
    return prog * w_prog + coll * w_coll


def arc_progress(traj: np.ndarray, ctx: PlanContext) -> np.ndarray:
    """Arc-length progress of final waypoints; ``traj`` is (B, K, T, 2) -> (B, K)."""
    B, K = traj.shape[:2]
    s, _ = ctx.lane.frenet_np(traj[:, :, -1].reshape(B, K, 2))
    return s - ctx.s0[:, None]


@dataclass
class LossOutput:
    total: ad.Tensor
    parts: dict


def imitation_loss(res, batch: Dataset, cfg: ModelConfig, lc: LossConfig = LossConfig()) -> LossOutput:
    """Total training loss for one forward result and its expert batch."""
    reg, ce, _ = wta_terms(res.dec.joint_modes, res.dec.mode_logits, batch.future, batch.future_valid)
    total = reg * lc.w_reg + ce * lc.w_cls
    parts = {"reg": float(reg.value), "cls": float(ce.value)}
    expert = batch.expert_plan
    if cfg.policy == "structured-sampling":
        labels = batch.cand_label
        if labels is None:
            from .domains import nearest_candidate
            labels = nearest_candidate(res.candidates, expert)
        cand = candidate_ce(res.log_probs, labels)
        total = total + cand * lc.w_cand
        parts["cand"] = float(cand.value)
    else:
        pr = plan_regression(res.plan, expert)
        total = total + pr * lc.w_plan
        parts["plan"] = float(pr.value)
    if lc.w_prog > 0 or lc.w_coll > 0:
        ctx = PlanContext.from_obs(batch.obs, cfg.T, cfg.dt, cfg.planner)
        exp_prog = arc_progress(expert[:, None], ctx)[:, 0]
        if cfg.policy == "structured-sampling":
            probs = ad.exp(res.log_probs)
            prog = arc_progress(res.candidates, ctx)
            prox = res.features[..., 5]
        else:
            from .planner import _proximity_hinge
            from .policy import predicted_agents
            plan = ad.expand_dims(res.plan, 1)
            probs = np.ones((len(batch), 1))
            s, _, _, _ = ctx.lane.frenet(res.plan[:, -1:])
            prog = s - ctx.s0[:, None]
            agents, _ = predicted_agents(res.dec)
            prox = _proximity_hinge(plan, agents, batch.obs.agent_valid,
                                    2 * ctx.agent_radius + ctx.margin)
        rr = reward_regularization(probs, prog, exp_prog, prox, lc.w_prog, lc.w_coll)
        total = total + rr
        parts["reward"] = float(rr.value)
    parts["total"] = float(total.value)
    return LossOutput(total, parts)


# ---------------------------------------------------------- history dropout

def history_dropout(obs: ObservationSeq, p_hist: float, seed: int, training: bool) -> ObservationSeq:
    """Drop whole non-ego agent histories and, independently, the ego's past steps."""
    if not 0.0 <= p_hist <= 1.0:
        raise ConfigError(f"history dropout rate {p_hist} outside [0, 1]")
    if not training or p_hist == 0.0:
        return obs
    rng = np.random.default_rng(seed)
    B, A = obs.agents.shape[:2]
    drop_agent = rng.random((B, A)) < p_hist
    drop_ego = rng.random(B) < p_hist
    agents = np.where(drop_agent[:, :, None, None], 0.0, obs.agents)
    ego = obs.ego.copy()
    ego[drop_ego, :-1] = 0.0
    return ObservationSeq(ego, agents, obs.lane, obs.target_speed)


# ------------------------------------------------------------------ mixture

@dataclass
class MixtureSampler:
    """Draws each element from ID with probability alpha / (1 + alpha), else OOD.

    Within a domain, elements come from a seeded per-epoch permutation.
    """

    id_data: Dataset | None
    ood_data: Dataset
    alpha: float
    seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False)
    _perm: dict = field(init=False, repr=False, default_factory=dict)
    _epoch: dict = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("mixture ratio alpha must be >= 0")
        if self.ood_data is None or len(self.ood_data) == 0:
            raise ConfigError("mixture sampling needs a non-empty OOD dataset")
        if self.alpha > 0 and (self.id_data is None or len(self.id_data) == 0):
            raise ConfigError(f"alpha={self.alpha} needs a non-empty ID dataset")
        self._rng = np.random.default_rng(ad.derive_seed(self.seed, "mixture"))

    @property
    def id_fraction(self) -> float:
        return self.alpha / (1.0 + self.alpha)

    def _next(self, key: str, ds: Dataset, n: int) -> np.ndarray:
        out = []
        while n > 0:
            perm, pos = self._perm.get(key, (np.zeros(0, int), 0))
            if pos >= len(perm):
                ep = self._epoch.get(key, 0)
                self._epoch[key] = ep + 1
                rng = np.random.default_rng(ad.derive_seed(self.seed, f"perm/{key}/{ep}"))
                perm, pos = rng.permutation(len(ds)), 0
            take = min(n, len(perm) - pos)
            out.append(perm[pos:pos + take])
            self._perm[key] = (perm, pos + take)
            n -= take
        return np.concatenate(out) if out else np.zeros(0, int)

    def draw_sources(self, n: int) -> np.ndarray:
        """Boolean (n,) array, True where the element comes from ID."""
        return self._rng.random(n) < self.id_fraction

    def sample(self, batch_size: int) -> tuple[Dataset, np.ndarray]:
        is_id = self.draw_sources(batch_size)
        n_id = int(is_id.sum())
        parts = []
        if n_id:
            parts.append(self.id_data.take(self._next("id", self.id_data, n_id)))
        if batch_size - n_id:
            parts.append(self.ood_data.take(self._next("ood", self.ood_data, batch_size - n_id)))
        return Dataset.concat(parts), np.sort(is_id)[::-1]


def mixture_sample(sampler: MixtureSampler, batch_size: int):
    return sampler.sample(batch_size)


def parse_data_mode(mode: str) -> float | None:
    """``ID`` -> None, ``OOD`` -> 0.0, ``Mix(a)`` -> a."""
    if mode == "ID":
        return None
    if mode == "OOD":
        return 0.0
    m = re.fullmatch(r"Mix\(([0-9.eE+-]+)\)", mode)
    if not m:
        raise ConfigError(f"unknown data mode {mode!r}; use ID, OOD or Mix(alpha)")
    a = float(m.group(1))
    if not a >= 0 or not math.isfinite(a):
        raise ConfigError(f"mixture ratio must be finite and >= 0, got {a}")
    return a


# -------------------------------------------------------------------- train

@dataclass
class TrainRun:
    strategy: str = "FullFT"
    data_mode: str = "ID"
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    base_lr_scale: float = 1.0     # multiplier on base-parameter lr when adapters are present
    clip_norm: float = 5.0
    eval_every: int = 100
    checkpoint_every: int = 0
    seed: int = 0
    rank: int = 4
    p_drop: float = 0.1
    loss: LossConfig = field(default_factory=LossConfig)

    @property
    def parsed_strategy(self) -> FineTuneStrategy:
        return FineTuneStrategy.parse(self.strategy)

    def tag(self) -> str:
        return f"{self.strategy}_{self.data_mode}_s{self.seed}".replace(":", "-").replace("+", "-")


@dataclass
class TrainResult:
    final: dict                  # all tensors (base + adapter/...) at the last step
    best: dict                   # tensors at the lowest validation ADE
    best_step: int
    log: list
    mask: dict
    adapters: dict
    val_history: list = field(default_factory=list)


def plan_ade(model_params: dict, cfg: ModelConfig, data: Dataset, adapters: dict,
             batch_size: int = 256) -> float:
    """Mean ego-plan displacement error on ``data`` in evaluation mode."""
    if len(data) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    P = {k: ad.Tensor(v) for k, v in model_params.items()}
    total = 0.0
    for i in range(0, len(data), batch_size):
        b = data.take(np.arange(i, min(i + batch_size, len(data))))
        res = policy_forward(P, cfg, b.obs, adapters, training=False, seed=0,
                             candidates=b.candidates)
        d = res.plan.value - b.expert_plan
        total += float(np.sqrt((d * d).sum(-1)).mean(-1).sum())
    return total / len(data)


def _split_adapter_tensors(tensors: dict, adapters: dict) -> None:
    for a in adapters.values():
        an, bn = a.names()
        a.A, a.B = tensors[an], tensors[bn]


def train(run: TrainRun, model: PolicyModel, datasets: dict, adapters: dict | None = None,
          out_dir=None, log_path=None) -> TrainResult:
    """Optimise the trainable subset of ``model`` (+ adapters) under ``run``.

    ``datasets`` maps ``id_train``, ``ood_train``, ``id_val``, ``ood_val`` to
    Dataset objects; only those the data mode needs must be present.
    """
    cfg = model.cfg
    strategy = run.parsed_strategy
    if adapters is None:
        adapters = build_adapters(cfg, strategy, run.rank, run.p_drop, run.seed)
    mask = trainable_mask(list(model.params), adapters, strategy)
    alpha = parse_data_mode(run.data_mode)
    if alpha is None:
        sampler = MixtureSampler(None, _need(datasets, "id_train"), 0.0, run.seed)
        val = _need(datasets, "id_val")
    else:
        sampler = MixtureSampler(datasets.get("id_train"), _need(datasets, "ood_train"), alpha, run.seed)
        val = _need(datasets, "ood_val")
        if alpha > 0:
            val = Dataset.concat([_need(datasets, "id_val"), val])
    if cfg.policy == "structured-sampling":
        for ds in (sampler.id_data, sampler.ood_data, val):
            if ds is not None:
                ds.attach_candidates(cfg)

    tensors = dict(model.params)
    for a in adapters.values():
        tensors.update(a.tensors())
    tensors = {k: np.array(v, copy=True) for k, v in tensors.items()}
    state = AdamState(lr=run.lr, clip_norm=run.clip_norm)
    lr_scale = None
    if run.base_lr_scale != 1.0 and adapters:
        lr_scale = {k: run.base_lr_scale for k in tensors if not k.startswith(ADAPTER_PREFIX)}

    best, best_step, best_ade = dict(tensors), 0, math.inf
    val_hist, log = [], []

    def evaluate(step):
        nonlocal best, best_step, best_ade
        _split_adapter_tensors(tensors, adapters)
        ade = plan_ade(tensors, cfg, val, adapters)
        val_hist.append((step, ade))
        if ade < best_ade:
            best, best_step, best_ade = dict(tensors), step, ade
        return ade

    if run.steps > 0 and run.eval_every > 0:
        evaluate(0)
    t0 = time.perf_counter()
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "total", "reg", "cls", "plan", "cand", "reward", "lr", "wall_s"])
    try:
        for step in range(1, run.steps + 1):
            batch, _ = sampler.sample(run.batch_size)
            step_seed = ad.derive_seed(run.seed, f"step/{step}")
            obs = history_dropout(batch.obs, run.loss.p_hist, step_seed, True)
            P = as_graph(tensors, mask)
            res = policy_forward(P, cfg, obs, adapters, training=True, seed=step_seed,
                                 candidates=batch.candidates)
            out = imitation_loss(res, batch, cfg, run.loss)
            if not math.isfinite(out.parts["total"]):
                raise NumericalError(f"non-finite loss at step {step} (seed {run.seed}, "
                                     f"strategy {run.strategy}, data {run.data_mode})")
            names = [k for k, v in mask.items() if v]
            grads = ad.backward(out.total, [P[k] for k in names])
            try:
                tensors, state = adam_step(tensors, grads, state, lr_scale)
            except FloatingPointError as e:
                raise NumericalError(f"{e} (seed {run.seed}, strategy {run.strategy})") from None
            row = {"step": step, **out.parts, "lr": run.lr, "wall_s": time.perf_counter() - t0}
            log.append(row)
            if writer:
                writer.writerow([step] + [f"{row.get(k, ''):.10g}" if k in row else ""
                                          for k in ("total", "reg", "cls", "plan", "cand", "reward")]
                                + [f"{run.lr:g}", f"{row['wall_s']:.3f}"])
            if run.eval_every > 0 and (step % run.eval_every == 0 or step == run.steps):
                evaluate(step)
            if out_dir is not None and run.checkpoint_every > 0 and step % run.checkpoint_every == 0:
                save_checkpoint(Path(out_dir) / f"{run.tag()}_step{step:06d}.ckpt", tensors,
                                {"step": step})
    finally:
        if fh:
            fh.close()
    _split_adapter_tensors(tensors, adapters)
    result = TrainResult(tensors, best if val_hist else tensors, best_step, log, mask, adapters, val_hist)
    if out_dir is not None:
        meta = {"strategy": str(strategy), "data_mode": run.data_mode, "seed": run.seed,
                "rank": run.rank, "p_drop": run.p_drop, "steps": run.steps}
        save_run(Path(out_dir) / f"{run.tag()}.final.ckpt", result.final, mask, {**meta, "kind": "final"})
        save_run(Path(out_dir) / f"{run.tag()}.best.ckpt", result.best, mask,
                 {**meta, "kind": "best", "best_step": best_step})
    return result


def materialize(cfg: ModelConfig, tensors: dict, adapters: dict):
    """(PolicyModel, adapters) holding the values in ``tensors`` (e.g. a best checkpoint)."""
    import copy
    ads = {k: copy.copy(a) for k, a in adapters.items()}
    _split_adapter_tensors(tensors, ads)
    base = {k: v for k, v in tensors.items() if not k.startswith(ADAPTER_PREFIX)}
    return PolicyModel(cfg, base), ads


def _need(datasets: dict, key: str) -> Dataset:
    ds = datasets.get(key)
    if ds is None or len(ds) == 0:
        raise DataError(f"training needs a non-empty {key} dataset")
    return ds


def save_run(path, tensors: dict, mask: dict, meta: dict) -> None:
    """Checkpoint a run; base tensors are omitted when the strategy froze all of them."""
    base_trained = any(v for k, v in mask.items() if not k.startswith(ADAPTER_PREFIX))
    keep = {k: v for k, v in tensors.items() if base_trained or k.startswith(ADAPTER_PREFIX)}
    save_checkpoint(path, keep, {**meta, "has_base": int(base_trained)})


def load_run(path, model: PolicyModel, base_tensors: dict | None = None):
    """Rebuild (PolicyModel, adapters) from a run checkpoint over a base model."""
    tensors, meta = load_checkpoint(path)
    strategy = FineTuneStrategy.parse(meta["strategy"]) if "strategy" in meta else None
    adapters = {}
    if strategy is not None:
        adapters = build_adapters(model.cfg, strategy, int(meta.get("rank", 4)),
                                  float(meta.get("p_drop", 0.1)))
        for a in adapters.values():
            an, bn = a.names()
            if an not in tensors or bn not in tensors:
                raise DataError(f"{path}: missing adapter tensors for {a.attachment.value}")
            if tensors[an].shape != a.A.shape or tensors[bn].shape != a.B.shape:
                raise DataError(f"{path}: adapter {a.attachment.value} shape mismatch")
            a.A, a.B = tensors[an], tensors[bn]
    base = {k: v for k, v in tensors.items() if not k.startswith(ADAPTER_PREFIX)}
    if not base:
        base = dict(base_tensors if base_tensors is not None else model.params)
    shapes = param_shapes(model.cfg)
    if set(base) != set(shapes) or any(base[k].shape != shapes[k] for k in shapes):
        raise DataError(f"{path}: base tensors do not match the model configuration")
    return PolicyModel(model.cfg, base), adapters, meta
