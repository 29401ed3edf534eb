from .layers import (
    AffineParams,
    MabParams,
    MhaParams,
    activation,
    affine,
    graph_mha,
    init_affine,
    mab,
    mha,
)
from .optim import AdamState, DivergenceError, adam_step
from .tensor import (
    DegenerateAttentionError,
    Segments,
    ShapeError,
    Tape,
    Tensor,
    masked_softmax,
    numeric_gradient,
    relative_error,
)

__all__ = [
    "AdamState",
    "AffineParams",
    "DegenerateAttentionError",
    "DivergenceError",
    "MabParams",
    "MhaParams",
    "Segments",
    "ShapeError",
    "Tape",
    "Tensor",
    "activation",
    "adam_step",
    "affine",
    "graph_mha",
    "init_affine",
    "mab",
    "masked_softmax",
    "mha",
    "numeric_gradient",
    "relative_error",
]
