"""Low-rank residual decoders for adapting structured driving policies across domains.

Modules: ``autodiff`` (reverse-mode AD and Adam), ``policy`` (encoder-decoder
policy), ``planner`` (cost-based planning), ``adapters`` (residual adapters and
fine-tuning masks), ``domains`` (synthetic traffic), ``training``,
``evaluation`` and ``cli``.
"""
from .adapters import Attachment, FineTuneStrategy, LowRankAdapter, Strategy, apply_residual, init_adapter
from .errors import ConfigError, ContractError, DataError, NumericalError
from .policy import ModelConfig, ObservationSeq, PolicyModel

__version__ = "0.1.0"

__all__ = ["Attachment", "FineTuneStrategy", "LowRankAdapter", "Strategy", "apply_residual",
           "init_adapter", "ConfigError", "ContractError", "DataError", "NumericalError",
           "ModelConfig", "ObservationSeq", "PolicyModel"]
