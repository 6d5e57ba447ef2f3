"""The in-context segmentation backbone and its checkpoint format."""

from .checkpoint import CheckpointError, checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint
from .model import (
    Architecture,
    ContextPair,
    ContextSet,
    ModelWeights,
    embed,
    forward,
    forward_logits,
    forward_shared_context,
)

__all__ = [
    "Architecture", "CheckpointError", "ContextPair", "ContextSet", "ModelWeights",
    "checkpoint_bytes", "embed", "forward", "forward_logits", "forward_shared_context",
    "load_checkpoint", "parse_checkpoint", "save_checkpoint",
]
