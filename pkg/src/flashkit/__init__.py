"""flashkit: gated attention units and mixed chunk attention, desk scale.

A self-contained numpy implementation of the GAU block, its chunked
linear-attention variant, and the plumbing needed to verify them: a tape
autodiff core, byte-level LM training, constant-memory streaming decode,
and a latency-scaling benchmark harness.
"""

from .tensor import ShapeError, Tape, Tensor, active_tape, backward, record_tape

__version__ = "0.1.0"

__all__ = [
    "ShapeError",
    "Tape",
    "Tensor",
    "active_tape",
    "backward",
    "record_tape",
    "__version__",
]
