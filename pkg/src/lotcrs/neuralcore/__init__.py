from .checkpoint import Checkpoint, CheckpointError
from .gradcheck import LOSS_KINDS, check_gradient, grad_check
from .model import (
    EncodedContext,
    ModelParams,
    context_ids,
    decode_logits,
    encode_context,
    tokenize,
    tokenize_with_flags,
)
from .optim import Adam
from .vocab import Vocabulary

__all__ = [
    "Adam",
    "Checkpoint",
    "CheckpointError",
    "EncodedContext",
    "LOSS_KINDS",
    "ModelParams",
    "Vocabulary",
    "check_gradient",
    "context_ids",
    "decode_logits",
    "encode_context",
    "grad_check",
    "tokenize",
    "tokenize_with_flags",
]
