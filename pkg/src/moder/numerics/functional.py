"""Vector helpers and the generic MLP forward pass."""

from __future__ import annotations

import enum
from typing import Mapping

import numpy as np

from moder.errors import DimensionError, DomainError
from moder.numerics import autograd as ag
from moder.numerics.autograd import Tensor
from moder.numerics.params import ParamSet


class Activation(str, enum.Enum):
    SELU = "selu"
    GELU = "gelu"
    TANH = "tanh"


_ACTIVATIONS = {
    Activation.SELU: ag.selu,
    Activation.GELU: ag.gelu,
    Activation.TANH: ag.tanh,
}


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DomainError("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def softmax(v, temperature: float = 1.0) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64) / temperature
    e = np.exp(v - v.max())
    return e / e.sum()


def l2_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise DomainError("cannot normalize a zero vector")
    return v / n


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise DomainError("cannot normalize a zero vector")
    return x / n


# Differentiable counterparts -------------------------------------------------

def normalize_t(x: Tensor) -> Tensor:
    """Row-wise (or whole-vector for 1-D) L2 normalization."""
    axis = -1
    norm = ag.sqrt(ag.sum_(ag.square(x), axis=axis, keepdims=True))
    return x / norm


def layer_norm_t(x: Tensor, gain, bias, eps: float = 1e-5) -> Tensor:
    mu = ag.mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = ag.mean(ag.square(centered), axis=-1, keepdims=True)
    return centered / ag.sqrt(var + eps) * gain + bias


def mlp_layer_count(params: Mapping) -> int:
    n = 0
    while f"l{n}.weight" in params:
        n += 1
    return n


def forward_mlp(params, x, activation: Activation | str = Activation.SELU) -> Tensor:
    """Run ``l0 .. l{n-1}`` linear layers with ``activation`` between them.

    ``params`` holds ``l{i}.weight`` of shape (out, in) and ``l{i}.bias`` of
    shape (out,); it may be a :class:`ParamSet` (constants) or a mapping of
    bound :class:`Tensor` leaves, in which case the graph is recorded.
    ``x`` is a vector or a (batch, in) matrix.
    """
    act = _ACTIVATIONS[Activation(activation)]
    if isinstance(params, ParamSet):
        params = {k: Tensor(v) for k, v in params.items()}
    n = mlp_layer_count(params)
    if n == 0:
        raise DimensionError("no layers found (expected l0.weight ...)")
    h = ag.as_tensor(x)
    for i in range(n):
        w, b = params[f"l{i}.weight"], params[f"l{i}.bias"]
        if w.shape[1] != h.shape[-1]:
            raise DimensionError(f"input width {h.shape[-1]} != weight in-features {w.shape[1]}", layer=i)
        if b.shape != (w.shape[0],):
            raise DimensionError(f"bias shape {b.shape} != ({w.shape[0]},)", layer=i)
        h = h @ w.T + b
        if i < n - 1:
            h = act(h)
    return h


def init_mlp(widths: list[int], rng, prefix: str = "", trainable: bool = True) -> dict[str, np.ndarray]:
    """LeCun-normal weights and zero biases for the given layer widths."""
    out = {}
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        out[f"{prefix}l{i}.weight"] = rng.normal((fan_out, fan_in), scale=1.0 / np.sqrt(fan_in))
        out[f"{prefix}l{i}.bias"] = np.zeros(fan_out)
    return out
