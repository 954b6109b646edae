"""Frozen stand-in text encoder.

prompt -> hashed tokens -> mean-pooled token embeddings -> linear (l0) ->
GELU -> linear (l1) -> layer norm -> L2 normalize.  The two linears are the
adapted layers; everything else is frozen.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from moder.encoder.adapters import AdapterModule, TaskVector, materialize
from moder.encoder.text import ClassPrompt, tokenize
from moder.errors import ContractError, DimensionError
from moder.numerics import autograd as ag
from moder.numerics.autograd import Tensor
from moder.numerics.functional import layer_norm_t, normalize_t
from moder.numerics.params import Param, ParamSet
from moder.numerics.rng import SeededRng

ADAPTED_LAYERS = ("l0", "l1")


@dataclass(frozen=True)
class EncoderSpec:
    seed: int = 0
    vocab_size: int = 512
    d_tok: int = 64
    hidden: int = 128
    dim: int = 64


class ReferenceEncoder:
    """Deterministic function of its :class:`EncoderSpec`; never mutated."""

    def __init__(self, spec: EncoderSpec | None = None, **kwargs):
        spec = spec or EncoderSpec(**kwargs)
        self.spec = spec
        rng = SeededRng(spec.seed, "encoder")
        self.theta0 = ParamSet(
            {
                "tok_emb": Param(rng.normal((spec.vocab_size, spec.d_tok)), False),
                "l0.weight": Param(rng.normal((spec.hidden, spec.d_tok), 1.0 / np.sqrt(spec.d_tok)), False),
                "l0.bias": Param(rng.normal(spec.hidden, 0.1), False),
                "l1.weight": Param(rng.normal((spec.dim, spec.hidden), 1.0 / np.sqrt(spec.hidden)), False),
                "l1.bias": Param(rng.normal(spec.dim, 0.1), False),
                "ln.gain": Param(np.ones(spec.dim), False),
                "ln.bias": Param(np.zeros(spec.dim), False),
            }
        )
        self._pool_cache = lru_cache(maxsize=4096)(self._pool_uncached)

    def __repr__(self) -> str:
        return f"ReferenceEncoder({self.spec}, fingerprint={self.fingerprint:#018x})"

    @property
    def dim(self) -> int:
        return self.spec.dim

    @property
    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        return {k: self.theta0[f"{k}.weight"].shape for k in ADAPTED_LAYERS}

    @property
    def fingerprint(self) -> int:
        """64-bit hash of the frozen weights."""
        h = hashlib.blake2b(digest_size=8)
        for name in self.theta0:
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.theta0[name], dtype="<f8").tobytes())
        return int.from_bytes(h.digest(), "little")

    def spec_dict(self) -> dict:
        return asdict(self.spec)

    # --- forward -------------------------------------------------------------

    def _pool_uncached(self, text: str) -> np.ndarray:
        ids = tokenize(text, self.spec.vocab_size)
        if not ids:
            raise ContractError(f"prompt has no tokens: {text!r}")
        out = self.theta0["tok_emb"][ids].mean(axis=0)
        out.setflags(write=False)
        return out

    def pooled(self, text: str) -> np.ndarray:
        return self._pool_cache(text)

    def check_task_vector(self, tv: TaskVector) -> None:
        shapes = self.layer_shapes
        if set(tv.deltas) != set(shapes):
            raise DimensionError(f"task vector layers {sorted(tv.deltas)} != adapted layers {sorted(shapes)}")
        for k, d in tv.deltas.items():
            if d.shape != shapes[k]:
                raise DimensionError(f"task vector {k} has shape {d.shape}, encoder expects {shapes[k]}")

    def forward_t(self, pooled, displacement: dict | None = None, alpha: float = 1.0) -> dict[str, Tensor]:
        """Forward pass with effective weights ``W0 + alpha * delta`` on the adapted layers.

        ``displacement`` maps layer -> array or graph tensor; ``pooled`` is one
        vector or a (n, d_tok) batch.  Returns every intermediate so callers can
        inspect pre-normalization activations.
        """
        th = self.theta0
        weights = {}
        for layer in ADAPTED_LAYERS:
            w0 = Tensor(th[f"{layer}.weight"])
            if displacement is None:
                weights[layer] = w0
            else:
                weights[layer] = w0 + ag.as_tensor(displacement[layer]) * alpha
        x = ag.as_tensor(pooled)
        pre0 = x @ weights["l0"].T + th["l0.bias"]
        act0 = ag.gelu(pre0)
        pre1 = act0 @ weights["l1"].T + th["l1.bias"]
        ln = layer_norm_t(pre1, th["ln.gain"], th["ln.bias"])
        out = normalize_t(ln)
        return {"weights_l0": weights["l0"], "weights_l1": weights["l1"], "pre0": pre0,
                "act0": act0, "pre1": pre1, "ln": ln, "out": out}

    def encode_text(self, text: str, tv: TaskVector | None = None, alpha: float = 1.0) -> np.ndarray:
        if not 0.0 <= alpha <= 1.0:
            raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
        if tv is not None:
            self.check_task_vector(tv)
        disp = None if tv is None else tv.deltas
        return self.forward_t(self.pooled(text), disp, alpha)["out"].value.copy()

    def trace(self, prompt: ClassPrompt | str, tv: TaskVector | None = None, alpha: float = 1.0) -> dict[str, np.ndarray]:
        text = prompt.text if isinstance(prompt, ClassPrompt) else prompt
        if tv is not None:
            self.check_task_vector(tv)
        out = self.forward_t(self.pooled(text), None if tv is None else tv.deltas, alpha)
        return {k: v.value for k, v in out.items()}


def encode(
    encoder: ReferenceEncoder,
    prompt: ClassPrompt | str,
    tv: TaskVector | AdapterModule | None = None,
    alpha: float = 1.0,
) -> np.ndarray:
    """Unit-norm text embedding of ``prompt`` under weights ``theta0 + alpha * tau``.

    With ``tv=None`` or ``alpha=0`` this is the frozen zero-shot embedding.
    """
    if isinstance(tv, AdapterModule):
        tv = materialize(tv)
    text = prompt.text if isinstance(prompt, ClassPrompt) else prompt
    return encoder.encode_text(text, tv, alpha)
