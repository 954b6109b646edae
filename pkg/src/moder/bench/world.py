"""Synthetic visual-embedding worlds and incremental task streams.

A class's visual mean is its zero-shot text embedding pushed by a shift shared
with its family (the domain gap) and a small private shift, then normalized.
Samples add isotropic Gaussian noise in the tangent space at the mean, so they
are not unit vectors; cosine scoring is scale-free and the pipeline normalizes
before classification.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from moder.encoder.model import ReferenceEncoder, encode
from moder.encoder.text import ClassPrompt
from moder.errors import ContractError
from moder.hub.core import Protocol
from moder.numerics.functional import l2_normalize
from moder.numerics.rng import SeededRng

FAMILY_WORDS = (
    "maple", "sparrow", "beetle", "orchid", "trout", "falcon", "cactus", "lizard",
    "mushroom", "moth", "coral", "fern", "heron", "spider", "tulip", "salmon",
)

MODIFIERS = (
    "red", "silver", "golden", "striped", "dwarf", "giant", "spotted", "northern",
    "mountain", "desert", "swamp", "crested", "pale", "black", "royal", "common",
    "hairy", "little", "great", "scarlet", "woolly", "painted", "horned", "bearded",
    "marsh", "coastal", "alpine", "velvet", "ivory", "copper", "jade", "amber",
)


@dataclass(frozen=True)
class WorldSpec:
    n_classes: int = 20
    n_families: int = 5
    gamma: float = 0.4
    delta: float = 0.15
    sigma: float = 0.08

    def __post_init__(self):
        if self.n_classes < 1:
            raise ContractError(f"n_classes must be >= 1, got {self.n_classes}")
        if not 1 <= self.n_families <= min(self.n_classes, len(FAMILY_WORDS)):
            raise ContractError(
                f"n_families must be in [1, {min(self.n_classes, len(FAMILY_WORDS))}], got {self.n_families}"
            )
        if -(-self.n_classes // self.n_families) > len(MODIFIERS):
            raise ContractError(f"at most {len(MODIFIERS)} classes per family are supported")
        for name in ("gamma", "delta", "sigma"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0, got {getattr(self, name)}")


@dataclass
class SyntheticWorld:
    spec: WorldSpec
    seed: int
    names: list[str]
    families: list[int]
    means: np.ndarray  # (n_classes, d), unit rows

    @property
    def n_classes(self) -> int:
        return len(self.names)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def family_members(self, family: int) -> list[int]:
        return [c for c, f in enumerate(self.families) if f == family]

    def sample(self, class_id: int, n: int, rng: SeededRng) -> np.ndarray:
        """``n`` draws of mean + sigma * (I - m m^T) g with g standard normal."""
        m = self.means[class_id]
        g = rng.normal((n, self.dim))
        tangent = g - np.outer(g @ m, m)
        return m + self.spec.sigma * tangent


def generate_world(spec: WorldSpec, encoder: ReferenceEncoder, seed: int = 0) -> SyntheticWorld:
    """Class ``c`` belongs to family ``c % n_families`` and is named "<modifier> <family word>"."""
    names, families, means = [], [], []
    fam_shift = [
        l2_normalize(SeededRng(seed, "world", "family", f).normal(encoder.dim)) for f in range(spec.n_families)
    ]
    for c in range(spec.n_classes):
        f = c % spec.n_families
        name = f"{MODIFIERS[c // spec.n_families]} {FAMILY_WORDS[f]}"
        private = l2_normalize(SeededRng(seed, "world", "private", c).normal(encoder.dim))
        z_text = encode(encoder, ClassPrompt(c, name))
        names.append(name)
        families.append(f)
        means.append(l2_normalize(z_text + spec.gamma * fam_shift[f] + spec.delta * private))
    return SyntheticWorld(spec, seed, names, families, np.stack(means))


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple[tuple[int, ...], ...]
    train_per_class: int = 100
    test_per_class: int = 50
    protocol: Protocol = Protocol.CLASS_IL

    def __post_init__(self):
        object.__setattr__(self, "protocol", Protocol(self.protocol))
        object.__setattr__(self, "tasks", tuple(tuple(int(c) for c in t) for t in self.tasks))
        if not self.tasks or any(len(t) == 0 for t in self.tasks):
            raise ContractError("a stream needs at least one task and every task at least one class")
        flat = [c for t in self.tasks for c in t]
        if len(set(flat)) != len(flat):
            raise ContractError("task class sets must be disjoint")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ContractError("per-class sample counts must be > 0")

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def all_classes(self) -> list[int]:
        return [c for t in self.tasks for c in t]

    def seen_through(self, t: int) -> list[int]:
        return [c for task in self.tasks[: t + 1] for c in task]


def class_il_stream(world: SyntheticWorld, n_tasks: int = 5, seed: int = 0,
                    train_per_class: int = 100, test_per_class: int = 50) -> TaskStream:
    """Equal-size tasks over a seed-shuffled class order."""
    if n_tasks < 1 or world.n_classes % n_tasks:
        raise ContractError(f"{world.n_classes} classes do not split into {n_tasks} equal tasks")
    order = SeededRng(seed, "class-order").permutation(world.n_classes)
    size = world.n_classes // n_tasks
    tasks = tuple(tuple(int(c) for c in order[i * size:(i + 1) * size]) for i in range(n_tasks))
    return TaskStream(tasks, train_per_class, test_per_class, Protocol.CLASS_IL)


def mtil_stream(world: SyntheticWorld, n_domains: int | None = None,
                train_per_class: int = 100, test_per_class: int = 50) -> TaskStream:
    """One domain per family, in family order."""
    n_domains = world.spec.n_families if n_domains is None else n_domains
    if not 1 <= n_domains <= world.spec.n_families:
        raise ContractError(f"n_domains must be in [1, {world.spec.n_families}], got {n_domains}")
    tasks = tuple(tuple(world.family_members(f)) for f in range(n_domains))
    return TaskStream(tasks, train_per_class, test_per_class, Protocol.MTIL)


@dataclass
class TaskData:
    classes: list[int]
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray = field(repr=False)


def sample_split(world: SyntheticWorld, stream: TaskStream, seed: int = 0) -> list[TaskData]:
    """Deterministic train/test sets per task; each (split, class) has its own stream."""
    if max(stream.all_classes) >= world.n_classes or min(stream.all_classes) < 0:
        raise ContractError(f"stream references classes outside the world's {world.n_classes}")
    out = []
    for classes in stream.tasks:
        parts = {}
        for split, n in (("train", stream.train_per_class), ("test", stream.test_per_class)):
            xs = [world.sample(c, n, SeededRng(seed, "split", split, c)) for c in classes]
            parts[split] = (np.concatenate(xs), np.repeat(np.array(classes), n))
        out.append(TaskData(list(classes), *parts["train"], *parts["test"]))
    return out
