"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from moder.errors import ContractError
from moder.numerics.params import ParamSet

# Not given by the source method; the usual Adam defaults.
DEFAULT_BETAS = (0.9, 0.999)
DEFAULT_EPS = 1e-8


@dataclass
class AdamWState:
    lr: float = 1e-3
    weight_decay: float = 1e-2
    beta1: float = DEFAULT_BETAS[0]
    beta2: float = DEFAULT_BETAS[1]
    eps: float = DEFAULT_EPS
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ContractError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ContractError(f"weight_decay must be >= 0, got {self.weight_decay}")


def adamw_step(
    params: ParamSet, grads: Mapping[str, np.ndarray], state: AdamWState
) -> tuple[ParamSet, AdamWState]:
    """One AdamW update of every trainable entry.

    ``grads`` must hold exactly the trainable names; frozen entries are carried
    over untouched.
    """
    trainable = params.trainable_names()
    missing = [k for k in trainable if k not in grads]
    if missing:
        raise ContractError(f"missing gradients for trainable parameters: {missing}")
    extra = [k for k in grads if k not in trainable]
    if extra:
        raise ContractError(f"gradients given for non-trainable or unknown parameters: {extra}")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    updated = {}
    for name in trainable:
        p = params[name]
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            v = state.v[name] = np.zeros_like(p)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / bc1
        denom = np.sqrt(v / bc2)
        denom += state.eps
        m_hat /= denom
        m_hat *= state.lr
        new = p * (1.0 - state.lr * state.weight_decay)
        new -= m_hat
        updated[name] = new
    return params.replace(updated), state
