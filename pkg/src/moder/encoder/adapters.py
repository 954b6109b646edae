"""Low-rank adapters (LoRA, VeRA) and dense task vectors."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from moder.errors import ContractError, DimensionError
from moder.numerics import autograd as ag
from moder.numerics.autograd import Tensor
from moder.numerics.params import Param, ParamSet
from moder.numerics.rng import SeededRng


class Variant(str, enum.Enum):
    LORA = "lora"
    VERA = "vera"


LayerShapes = Mapping[str, tuple[int, int]]


@dataclass(frozen=True)
class VeraBasis:
    """Frozen random factors shared by every VeRA adapter of one hub."""

    hub_seed: int
    rank: int
    mats: Mapping[str, tuple[np.ndarray, np.ndarray]]  # layer -> (B~ (out, r), A~ (r, in))


@lru_cache(maxsize=32)
def _vera_basis_cached(hub_seed: int, shapes: tuple[tuple[str, int, int], ...], rank: int) -> VeraBasis:
    mats = {}
    for layer, d_out, d_in in shapes:
        rng = SeededRng(hub_seed, "vera", layer)
        b = rng.normal((d_out, rank), scale=1.0 / np.sqrt(rank))
        a = rng.normal((rank, d_in), scale=1.0 / np.sqrt(d_in))
        b.setflags(write=False)
        a.setflags(write=False)
        mats[layer] = (b, a)
    return VeraBasis(hub_seed, rank, mats)


def vera_basis(hub_seed: int, shapes: LayerShapes, rank: int) -> VeraBasis:
    """Shared VeRA matrices; identical (same objects) for equal arguments."""
    key = tuple((k, int(o), int(i)) for k, (o, i) in shapes.items())
    return _vera_basis_cached(int(hub_seed), key, int(rank))


@dataclass
class AdapterModule:
    """Raw low-rank displacement tau for one class (no alpha applied)."""

    variant: Variant
    class_id: int
    rank: int
    shapes: dict[str, tuple[int, int]]
    params: ParamSet
    basis: VeraBasis | None = None

    @property
    def layers(self) -> list[str]:
        return list(self.shapes)

    def with_params(self, params: ParamSet) -> "AdapterModule":
        return AdapterModule(self.variant, self.class_id, self.rank, dict(self.shapes), params, self.basis)

    def displacement_t(self, bound: Mapping[str, Tensor] | None = None) -> dict[str, Tensor]:
        """Per-layer displacement as graph tensors (constants when ``bound`` is None)."""
        p = bound if bound is not None else {k: Tensor(v) for k, v in self.params.items()}
        out = {}
        for layer in self.shapes:
            if self.variant is Variant.LORA:
                out[layer] = p[f"{layer}.B"] @ p[f"{layer}.A"]
            else:
                b_basis, a_basis = self.basis.mats[layer]
                scaled_a = ag.reshape(p[f"{layer}.d"], (-1, 1)) * a_basis
                out[layer] = ag.reshape(p[f"{layer}.b"], (-1, 1)) * (Tensor(b_basis) @ scaled_a)
        return out


def new_adapter(
    class_id: int,
    shapes: LayerShapes,
    rank: int,
    rng: SeededRng,
    variant: Variant | str = Variant.LORA,
    hub_seed: int = 0,
) -> AdapterModule:
    """Fresh adapter whose displacement is exactly zero.

    LoRA: B = 0, A ~ N(0, 1/d_in).  VeRA: b = 0, d = 0.1 over the hub's shared basis.
    """
    variant = Variant(variant)
    shapes = {k: (int(o), int(i)) for k, (o, i) in shapes.items()}
    for layer, (d_out, d_in) in shapes.items():
        if not 0 < rank < min(d_out, d_in):
            raise ContractError(f"rank {rank} must be in (0, min{(d_out, d_in)}) for layer {layer}")
    entries = {}
    basis = None
    if variant is Variant.LORA:
        for layer, (d_out, d_in) in shapes.items():
            entries[f"{layer}.B"] = Param(np.zeros((d_out, rank)))
            entries[f"{layer}.A"] = Param(rng.normal((rank, d_in), scale=1.0 / np.sqrt(d_in)))
    else:
        basis = vera_basis(hub_seed, shapes, rank)
        for layer, (d_out, _) in shapes.items():
            entries[f"{layer}.d"] = Param(np.full(rank, 0.1))
            entries[f"{layer}.b"] = Param(np.zeros(d_out))
    return AdapterModule(variant, int(class_id), int(rank), shapes, ParamSet(entries), basis)


@dataclass
class TaskVector:
    """Dense per-layer weight displacements."""

    deltas: dict[str, np.ndarray]
    provenance: str = ""
    contributors: list[tuple[int | str, float]] = field(default_factory=list)

    def __post_init__(self):
        self.deltas = {k: np.asarray(v, dtype=np.float64) for k, v in self.deltas.items()}

    @property
    def shapes(self) -> dict[str, tuple[int, int]]:
        return {k: v.shape for k, v in self.deltas.items()}

    def scale(self, w: float) -> "TaskVector":
        return TaskVector({k: w * v for k, v in self.deltas.items()}, f"{w}*({self.provenance})")

    def __add__(self, other: "TaskVector") -> "TaskVector":
        _check_same_shapes(self, other)
        return TaskVector(
            {k: v + other.deltas[k] for k, v in self.deltas.items()},
            f"({self.provenance})+({other.provenance})",
        )

    def __mul__(self, w: float) -> "TaskVector":
        return self.scale(w)

    __rmul__ = __mul__

    def equal(self, other: "TaskVector") -> bool:
        return self.shapes == other.shapes and all(
            np.array_equal(v, other.deltas[k]) for k, v in self.deltas.items()
        )


def _check_same_shapes(a: TaskVector, b: TaskVector) -> None:
    if list(a.deltas) != list(b.deltas) or a.shapes != b.shapes:
        raise DimensionError(f"task vector shapes differ: {a.shapes} vs {b.shapes}")


def materialize(adapter: AdapterModule) -> TaskVector:
    deltas = {k: v.value.copy() for k, v in adapter.displacement_t().items()}
    for layer, d in deltas.items():
        if d.shape != adapter.shapes[layer]:
            raise DimensionError(f"displacement {d.shape} != layer shape {adapter.shapes[layer]} ({layer})")
    return TaskVector(deltas, f"expert:{adapter.class_id}", [(adapter.class_id, 1.0)])


def combine(weighted: Sequence[tuple[TaskVector, float]]) -> TaskVector:
    """Weighted sum of task vectors, sum_i w_i * tau_i, elementwise."""
    if not weighted:
        raise ContractError("combine() needs at least one task vector")
    first = weighted[0][0]
    for tv, _ in weighted[1:]:
        _check_same_shapes(first, tv)
    deltas = {}
    for layer in first.deltas:
        acc = float(weighted[0][1]) * weighted[0][0].deltas[layer]
        for tv, w in weighted[1:]:
            acc = acc + float(w) * tv.deltas[layer]
        deltas[layer] = acc
    contributors = []
    for tv, w in weighted:
        ids = [c for c, _ in tv.contributors] or [tv.provenance]
        contributors.extend((c, float(w)) for c in ids)
    provenance = "merge[" + ", ".join(f"{w:.6g}*{tv.provenance}" for tv, w in weighted) + "]"
    return TaskVector(deltas, provenance, contributors)
