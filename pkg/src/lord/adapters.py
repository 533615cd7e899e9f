"""Low-rank residual decoders, encoder adapters and fine-tuning masks.

A residual adapter computes ``B @ A @ dropout(x)`` and adds it to a base
quantity.  ``B`` starts at zero so a freshly attached adapter leaves every
output unchanged, bit for bit.
"""
from __future__ import annotations

import enum
import re
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError

ADAPTER_PREFIX = "adapter/"


class Attachment(str, enum.Enum):
    COST_WEIGHTS = "CostWeights"
    GOALS = "Goals"
    INIT_TRAJECTORY = "InitTrajectory"
    PREDICTED_AGENT_TRAJ = "PredictedAgentTraj"
    SDV_TRAJECTORY = "SdvTrajectory"
    ENCODER_FUSION = "EncoderFusion"
    ENCODER_AGENT = "EncoderAgent"
    FINAL_OUTPUT = "FinalOutput"

    @property
    def is_encoder(self) -> bool:
        return self in (Attachment.ENCODER_FUSION, Attachment.ENCODER_AGENT)


# decoder head that each decoder attachment adds onto
HEAD_OF_ATTACHMENT = {
    Attachment.COST_WEIGHTS: "cost_weights",
    Attachment.GOALS: "goals",
    Attachment.INIT_TRAJECTORY: "init_trajectory",
    Attachment.PREDICTED_AGENT_TRAJ: "joint_modes",
    Attachment.SDV_TRAJECTORY: "sdv_trajectory",
}
# encoder linear layer each encoder attachment runs parallel to
LAYER_OF_ATTACHMENT = {
    Attachment.ENCODER_AGENT: "enc.agent.0",
    Attachment.ENCODER_FUSION: "enc.fusion.0",
}

LORD_DEFAULT = (Attachment.COST_WEIGHTS, Attachment.GOALS, Attachment.INIT_TRAJECTORY)


class Strategy(str, enum.Enum):
    FULL_FT = "FullFT"
    PARTIAL_FT = "PartialFT"
    MOSA_F = "MosaF"
    MOSA_AF = "MosaAF"
    PARALLEL_ADAPTER = "ParallelAdapter"
    FT_LORD = "FtLord"
    FT_LORD_VARIANT = "FtLordVariant"


@dataclass(frozen=True)
class FineTuneStrategy:
    kind: Strategy
    attachments: tuple = ()
    full_rank: bool = False     # "no low-rank" ablation

    @classmethod
    def parse(cls, text: str) -> "FineTuneStrategy":
        """``FtLord``, ``MosaF``, ... or ``FtLordVariant:Goals+FinalOutput[:full]``."""
        name, *rest = text.split(":")
        try:
            kind = Strategy(name)
        except ValueError:
            raise ConfigError(f"unknown fine-tuning strategy {name!r}") from None
        atts, full = (), False
        if rest:
            if kind is not Strategy.FT_LORD_VARIANT:
                raise ConfigError(f"{name} takes no attachment list")
            try:
                atts = tuple(Attachment(a) for a in rest[0].split("+") if a)
            except ValueError as e:
                raise ConfigError(str(e)) from None
            full = len(rest) > 1 and rest[1] == "full"
        elif kind is Strategy.FT_LORD_VARIANT:
            raise ConfigError("FtLordVariant needs an attachment list")
        return cls(kind, atts, full)

    def __str__(self):
        if self.kind is not Strategy.FT_LORD_VARIANT:
            return self.kind.value
        s = f"{self.kind.value}:{'+'.join(a.value for a in self.attachments)}"
        return s + (":full" if self.full_rank else "")

    def default_attachments(self) -> tuple:
        return {
            Strategy.FULL_FT: (),
            Strategy.PARTIAL_FT: (),
            Strategy.MOSA_F: (Attachment.ENCODER_FUSION,),
            Strategy.MOSA_AF: (Attachment.ENCODER_AGENT, Attachment.ENCODER_FUSION),
            Strategy.PARALLEL_ADAPTER: (Attachment.ENCODER_AGENT, Attachment.ENCODER_FUSION),
            Strategy.FT_LORD: LORD_DEFAULT,
            Strategy.FT_LORD_VARIANT: self.attachments,
        }[self.kind]


@dataclass
class LowRankAdapter:
    """Residual ``B @ A`` (or a single full matrix when ``full_rank``)."""

    attachment: Attachment
    n_B: int
    n_A: int
    rank: int
    p_drop: float
    A: np.ndarray
    B: np.ndarray
    full_rank: bool = False

    @property
    def n_params(self) -> int:
        return self.A.size + self.B.size

    def names(self) -> tuple[str, str]:
        stem = f"{ADAPTER_PREFIX}{self.attachment.value}"
        return f"{stem}/A", f"{stem}/B"

    def tensors(self) -> dict:
        a, b = self.names()
        return {a: self.A, b: self.B}


def init_adapter(n_B: int, n_A: int, r: int, p_drop: float, attachment: Attachment,
                 seed: int, full_rank: bool = False) -> LowRankAdapter:
    """Zero-influence initialisation: ``B = 0``, ``A ~ N(0, 0.02^2)``.

    With ``full_rank`` the residual is a single ``n_B x n_A`` matrix stored in
    ``B`` (zeros); ``A`` is then empty and unused.
    """
    attachment = Attachment(attachment)
    if not 0.0 <= p_drop < 1.0:
        raise ConfigError(f"{attachment.value}: dropout rate {p_drop} outside [0, 1)")
    if full_rank:
        return LowRankAdapter(attachment, n_B, n_A, min(n_A, n_B), p_drop,
                              A=np.zeros((0, n_A)), B=np.zeros((n_B, n_A)), full_rank=True)
    if not 1 <= r < min(n_A, n_B):
        raise ConfigError(
            f"{attachment.value}: rank {r} violates 1 <= r < min(n_A={n_A}, n_B={n_B})")
    rng = np.random.default_rng(ad.derive_seed(seed, f"adapter-init/{attachment.value}"))
    return LowRankAdapter(attachment, n_B, n_A, r, p_drop,
                          A=rng.normal(0.0, 0.02, size=(r, n_A)), B=np.zeros((n_B, r)))


def apply_residual(adapter: LowRankAdapter, z, base, training: bool, seed: int,
                   weights: tuple | None = None) -> ad.Tensor:
    """``base + dropout(z) @ A^T @ B^T`` along the last axis.

    ``weights`` optionally supplies ``(A, B)`` as graph tensors (for training);
    otherwise the adapter's arrays are used as constants.
    """
    z, base = ad.as_tensor(z), ad.as_tensor(base)
    if z.shape[-1] != adapter.n_A or base.shape[-1] != adapter.n_B:
        raise ContractError(
            f"{adapter.attachment.value}: input width {z.shape[-1]} / base width "
            f"{base.shape[-1]} do not match n_A={adapter.n_A}, n_B={adapter.n_B}")
    A, B = weights if weights is not None else (adapter.A, adapter.B)
    x = ad.dropout(z, adapter.p_drop,
                   ad.derive_seed(seed, f"adapter/{adapter.attachment.value}"), training)
    if not adapter.full_rank:
        x = x @ ad.swapaxes(ad.as_tensor(A), 0, 1)
    return base + x @ ad.swapaxes(ad.as_tensor(B), 0, 1)


# ------------------------------------------------------------------- masks

_LAST_DECODER_LAYER = re.compile(r"^dec\.[a-z_]+\.1\.(W|b)$")


def _check_pairing(strategy: FineTuneStrategy, adapters: dict) -> None:
    present = set(adapters)
    kind = strategy.kind
    if kind in (Strategy.FULL_FT, Strategy.PARTIAL_FT):
        if present:
            raise ConfigError(f"{kind.value} takes no adapters, got "
                              f"{sorted(a.value for a in present)}")
        return
    if kind in (Strategy.MOSA_F, Strategy.MOSA_AF, Strategy.PARALLEL_ADAPTER):
        wrong = [a.value for a in present if not a.is_encoder]
        if wrong or not present:
            raise ConfigError(f"{kind.value} needs encoder adapters only, got "
                              f"{sorted(a.value for a in present)}")
        if kind is not Strategy.PARALLEL_ADAPTER and present != set(strategy.default_attachments()):
            raise ConfigError(f"{kind.value} expects adapters at "
                              f"{[a.value for a in strategy.default_attachments()]}")
        return
    wrong = [a.value for a in present if a.is_encoder]
    if wrong or not present:
        raise ConfigError(f"{kind.value} needs decoder adapters, got "
                          f"{sorted(a.value for a in present)}")
    if kind is Strategy.FT_LORD:
        allowed = set(LORD_DEFAULT) | {Attachment.SDV_TRAJECTORY}
        if not present <= allowed:
            raise ConfigError(f"FtLord adapters must sit on game-parameter heads, got "
                              f"{sorted(a.value for a in present - allowed)}")
    elif present != set(strategy.default_attachments()):
        raise ConfigError(f"{strategy} expects adapters at "
                          f"{[a.value for a in strategy.default_attachments()]}")


def trainable_mask(base_names, adapters: dict, strategy: FineTuneStrategy) -> dict:
    """Map every base and adapter parameter name to True (trainable) / False."""
    _check_pairing(strategy, adapters)
    adapter_names = [n for ad_ in adapters.values() for n in ad_.names()]
    kind = strategy.kind
    if kind is Strategy.FULL_FT:
        mask = {n: True for n in base_names}
    elif kind is Strategy.PARTIAL_FT:
        mask = {n: bool(_LAST_DECODER_LAYER.match(n)) for n in base_names}
    elif kind in (Strategy.MOSA_F, Strategy.MOSA_AF):
        mask = {n: False for n in base_names}
    else:
        mask = {n: True for n in base_names}
    for n in adapter_names:
        if n in mask:
            raise ConfigError(f"parameter {n} appears twice")
        mask[n] = True
    return mask


def build_adapters(cfg, strategy: FineTuneStrategy, rank: int = 4, p_drop: float = 0.1,
                   seed: int = 0) -> dict:
    """Instantiate the adapters a strategy needs for model configuration ``cfg``."""
    out = {}
    atts = strategy.default_attachments()
    if strategy.kind is Strategy.FT_LORD:
        atts = lord_attachments(cfg)
    for att in atts:
        n_B, n_A = attachment_dims(cfg, att)
        out[att] = init_adapter(n_B, n_A, rank, p_drop, att, seed, full_rank=strategy.full_rank)
    return out


def lord_attachments(cfg) -> tuple:
    """Default LoRD sites for a model: the game-parameter heads it actually has,
    or the trajectory head of the unstructured policy."""
    if cfg.policy == "unstructured":
        return (Attachment.SDV_TRAJECTORY,)
    return tuple(a for a in LORD_DEFAULT if HEAD_OF_ATTACHMENT[a] in cfg.heads)


def attachment_dims(cfg, att: Attachment) -> tuple[int, int]:
    """``(n_B, n_A)`` for an attachment under model configuration ``cfg``."""
    att = Attachment(att)
    if att is Attachment.ENCODER_AGENT:
        return cfg.agent_hidden, cfg.H * 5
    if att is Attachment.ENCODER_FUSION:
        return cfg.fusion_hidden, cfg.agent_hidden * 2 + cfg.lane_hidden
    if att is Attachment.FINAL_OUTPUT:
        return cfg.T * 2, cfg.d_z
    return cfg.head_dims()[HEAD_OF_ATTACHMENT[att]], cfg.d_z


# ---------------------------------------------------------------- overhead

@dataclass
class Overhead:
    param_fraction: float
    time_fraction: float
    base_params: int
    added_params: int
    n_inferences: int = 0
    timings: dict = field(default_factory=dict)


def overhead(model, adapters: dict, n_inferences: int = 1000, seed: int = 0) -> Overhead:
    """Added parameter and inference-time fractions relative to the base model."""
    base_params = sum(v.size for v in model.params.values())
    added = sum(a.n_params for a in adapters.values())
    if not adapters:
        return Overhead(0.0, 0.0, base_params, 0)
    from .policy import policy_forward, random_observation

    obs = random_observation(model.cfg, n_inferences, seed)
    consts = {k: ad.Tensor(v) for k, v in model.params.items()}
    with_ad = dict(consts)
    for a in adapters.values():
        with_ad.update({k: ad.Tensor(v) for k, v in a.tensors().items()})

    def timed(params, adp):
        t0 = time.perf_counter()
        for i in range(n_inferences):
            policy_forward(params, model.cfg, obs.take([i]), adapters=adp, training=False, seed=i)
        return time.perf_counter() - t0

    # interleave to share drift between the two measurements
    t_base = t_ad = 0.0
    for _ in range(2):
        t_base += timed(consts, {})
        t_ad += timed(with_ad, adapters)
    return Overhead(added / base_params, t_ad / t_base - 1.0, base_params, added,
                    n_inferences, {"base_s": t_base / 2, "adapted_s": t_ad / 2})
