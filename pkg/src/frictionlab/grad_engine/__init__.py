"""Reverse-mode tape, policy networks, Adam and snapshot serialization."""

from .adam import AdamState, adam_step
from .gradcheck import finite_diff_check, value_and_grad
from .models import (MLPConfig, TransformerConfig, TransformerDecoder, count_parameters, init_mlp,
                     init_transformer, mlp_policy_forward, stack_params, transformer_policy_forward)
from .serialize import dumps, loads
from .tape import Tape, Tensor

__all__ = [
    "AdamState", "adam_step", "finite_diff_check", "value_and_grad", "MLPConfig",
    "TransformerConfig", "TransformerDecoder", "count_parameters", "init_mlp", "init_transformer",
    "mlp_policy_forward", "stack_params", "transformer_policy_forward", "dumps", "loads", "Tape", "Tensor",
]
