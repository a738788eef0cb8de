"""Training-free construction of multi-task models from finetuned checkpoints.

Modules:
    tensor_core       dense arithmetic, magnitude top-k, Jacobi SVD kernels
    checkpoint_store  binary container for checkpoints, sparse deltas and LoRA files
    merging           baseline mergers (task arithmetic, weighted average, TIES, ...)
    byom              merge-then-prune deltas, LoRA rank truncation, accounting
    desk_lab          synthetic tasks and a tiny MLP for interference experiments
    cli               command-line entry point
"""

from byomkit.checkpoint_store import (
    Checkpoint,
    LoraFile,
    SparseDelta,
    fingerprint,
    read_checkpoint,
    read_lora,
    read_sparse_delta,
    write_checkpoint,
    write_lora,
    write_sparse_delta,
)
from byomkit.errors import ByomError

__version__ = "0.1.0"

__all__ = [
    "ByomError",
    "Checkpoint",
    "LoraFile",
    "SparseDelta",
    "fingerprint",
    "read_checkpoint",
    "read_lora",
    "read_sparse_delta",
    "write_checkpoint",
    "write_lora",
    "write_sparse_delta",
]
