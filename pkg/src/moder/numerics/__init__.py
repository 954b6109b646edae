"""Dense float64 numerics: autograd tape, parameters, AdamW, RNG."""

from moder.numerics.autograd import Tensor, backward
from moder.numerics.functional import (
    Activation,
    cosine_sim,
    forward_mlp,
    init_mlp,
    l2_normalize,
    l2_normalize_rows,
    softmax,
)
from moder.numerics.hashing import fnv1a_64
from moder.numerics.optim import AdamWState, adamw_step
from moder.numerics.params import Param, ParamSet
from moder.numerics.rng import SeededRng

__all__ = [
    "Activation",
    "AdamWState",
    "Param",
    "ParamSet",
    "SeededRng",
    "Tensor",
    "adamw_step",
    "backward",
    "cosine_sim",
    "fnv1a_64",
    "forward_mlp",
    "init_mlp",
    "l2_normalize",
    "l2_normalize_rows",
    "softmax",
]
