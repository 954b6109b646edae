"""Named parameter collections with a per-entry trainable flag."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from moder.errors import ContractError
from moder.numerics.autograd import Tensor


@dataclass(frozen=True)
class Param:
    value: np.ndarray
    trainable: bool = True


class ParamSet(Mapping[str, np.ndarray]):
    """Ordered, immutable mapping ``name -> float64 array``.

    Updates go through :meth:`replace`, which returns a new set sharing the
    untouched arrays, so frozen entries stay the very same objects.
    """

    def __init__(self, entries: Mapping[str, Param] | None = None):
        self._entries: dict[str, Param] = {}
        for name, p in (entries or {}).items():
            value = np.asarray(p.value, dtype=np.float64)
            if value.ndim not in (1, 2) or 0 in value.shape:
                raise ContractError(f"parameter {name!r} must be a non-empty 1-D or 2-D array")
            if not np.all(np.isfinite(value)):
                raise ContractError(f"parameter {name!r} has non-finite entries")
            value.setflags(write=False)
            self._entries[name] = Param(value, p.trainable)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], trainable: bool = True) -> "ParamSet":
        return cls({k: Param(np.array(v, dtype=np.float64), trainable) for k, v in arrays.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name].value

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        inner = ", ".join(
            f"{k}{tuple(p.value.shape)}{'' if p.trainable else '*'}" for k, p in self._entries.items()
        )
        return f"ParamSet({inner})"

    def is_trainable(self, name: str) -> bool:
        return self._entries[name].trainable

    def trainable_names(self) -> list[str]:
        return [k for k, p in self._entries.items() if p.trainable]

    def merge(self, other: "ParamSet") -> "ParamSet":
        clash = set(self) & set(other)
        if clash:
            raise ContractError(f"duplicate parameter names: {sorted(clash)}")
        return ParamSet({**self._entries, **other._entries})

    def replace(self, values: Mapping[str, np.ndarray]) -> "ParamSet":
        entries = dict(self._entries)
        for name, v in values.items():
            if name not in entries:
                raise ContractError(f"unknown parameter {name!r}")
            old = entries[name]
            if np.shape(v) != old.value.shape:
                raise ContractError(f"shape change for {name!r}: {old.value.shape} -> {np.shape(v)}")
            entries[name] = Param(np.asarray(v, dtype=np.float64), old.trainable)
        return ParamSet(entries)

    def bind(self, prefix: str = "") -> dict[str, Tensor]:
        """Leaf tensors for a graph: trainable entries require grad, frozen ones do not."""
        return {
            name: Tensor(p.value, requires_grad=p.trainable, name=prefix + name)
            for name, p in self._entries.items()
        }

    def fingerprint(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for name, p in self._entries.items():
            h.update(name.encode())
            h.update(b"T" if p.trainable else b"F")
            h.update(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
        return h.hexdigest()

    def equal(self, other: "ParamSet") -> bool:
        return list(self) == list(other) and all(
            np.array_equal(self[k], other[k]) and self.is_trainable(k) == other.is_trainable(k)
            for k in self
        )
