"""The foundational hub and expert forging for unseen classes."""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from moder.encoder.adapters import AdapterModule, TaskVector, Variant, combine, materialize
from moder.encoder.model import EncoderSpec, ReferenceEncoder, encode
from moder.encoder.text import CANONICAL_TEMPLATE, ClassPrompt, PromptTemplate
from moder.errors import ContractError, UnknownClassError
from moder.numerics.functional import softmax


class Protocol(str, enum.Enum):
    CLASS_IL = "class_il"
    MTIL = "mtil"


@dataclass
class HubEntry:
    class_id: int
    name: str
    adapter: AdapterModule
    zero_shot: np.ndarray
    task_id: int


@dataclass
class ForgeConfig:
    k: int = 5
    alpha: float = 0.1
    alpha_seen: float = 1.0
    temperature: float = 1.0
    template: str = CANONICAL_TEMPLATE.text

    def __post_init__(self):
        if self.k < 1:
            raise ContractError(f"K must be >= 1, got {self.k}")
        for name in ("alpha", "alpha_seen"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1], got {v}")
        if self.temperature <= 0:
            raise ContractError(f"temperature must be > 0, got {self.temperature}")
        PromptTemplate(self.template)

    @property
    def prompt_template(self) -> PromptTemplate:
        return PromptTemplate(self.template)


@dataclass
class MergeReport:
    class_name: str
    contributors: list[int]
    sims: list[float]
    weights: list[float]
    alpha: float
    k: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


@dataclass
class Prediction:
    ranking: list[tuple[int, float]]

    @property
    def top1(self) -> int:
        return self.ranking[0][0]

    def scores(self) -> dict[int, float]:
        return dict(self.ranking)


@dataclass
class FoundationalHub:
    """Ordered store of class experts plus their cached zero-shot text embeddings."""

    seed: int
    encoder_fingerprint: int
    encoder_spec: EncoderSpec
    variant: Variant = Variant.LORA
    rank: int = 16
    entries: dict[int, HubEntry] = field(default_factory=dict)

    @classmethod
    def for_encoder(cls, encoder: ReferenceEncoder, seed: int = 0, variant=Variant.LORA, rank: int = 16) -> "FoundationalHub":
        return cls(seed, encoder.fingerprint, encoder.spec, Variant(variant), rank)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, class_id: int) -> bool:
        return class_id in self.entries

    @property
    def class_ids(self) -> list[int]:
        return list(self.entries)

    def entry(self, class_id: int) -> HubEntry:
        try:
            return self.entries[class_id]
        except KeyError:
            raise UnknownClassError(f"class {class_id} is not in the hub") from None

    def check_encoder(self, encoder: ReferenceEncoder) -> None:
        if encoder.fingerprint != self.encoder_fingerprint:
            raise ContractError(
                f"encoder fingerprint {encoder.fingerprint:#018x} != hub fingerprint {self.encoder_fingerprint:#018x}"
            )

    def update_adapter(self, class_id: int, adapter: AdapterModule) -> None:
        """Replace the stored expert (continued training); the cache is unaffected."""
        e = self.entry(class_id)
        if adapter.class_id != class_id:
            raise ContractError(f"adapter belongs to class {adapter.class_id}, not {class_id}")
        e.adapter = adapter

    def digest(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        h.update(f"{self.seed}|{self.encoder_fingerprint}|{self.variant.value}|{self.rank}".encode())
        for cid, e in self.entries.items():
            h.update(f"{cid}|{e.name}|{e.task_id}".encode())
            h.update(np.ascontiguousarray(e.zero_shot).tobytes())
            for k in e.adapter.params:
                h.update(k.encode())
                h.update(np.ascontiguousarray(e.adapter.params[k]).tobytes())
        return h.hexdigest()


def insert(hub: FoundationalHub, class_id: int, name: str, adapter: AdapterModule,
           encoder: ReferenceEncoder, task_id: int = 0) -> FoundationalHub:
    hub.check_encoder(encoder)
    if class_id in hub.entries:
        raise ContractError(f"class {class_id} is already in the hub")
    if adapter.class_id != class_id:
        raise ContractError(f"adapter belongs to class {adapter.class_id}, not {class_id}")
    if hub.entries:
        last_task = next(reversed(hub.entries.values())).task_id
        if task_id < last_task:
            raise ContractError(f"task id {task_id} precedes the last inserted task {last_task}")
    z = encode(encoder, ClassPrompt(class_id, name))
    hub.entries[class_id] = HubEntry(class_id, name, adapter, z, task_id)
    return hub


def _prompt_text(name: str, cfg: ForgeConfig | None) -> str:
    template = cfg.prompt_template if cfg is not None else CANONICAL_TEMPLATE
    return template.render(name)


def top_k(hub: FoundationalHub, prompt: ClassPrompt | str, k: int, encoder: ReferenceEncoder,
          query: np.ndarray | None = None) -> list[tuple[int, float]]:
    """The ``k`` hub entries whose cached zero-shot embedding is closest to the prompt's.

    Ties go to the lower class-id.  ``query`` overrides the prompt embedding.
    """
    if k < 1:
        raise ContractError(f"K must be >= 1, got {k}")
    if not hub.entries:
        raise ContractError("top_k() on an empty hub")
    if query is None:
        query = encode(encoder, prompt)
    ids = np.array(hub.class_ids)
    bank = np.stack([hub.entries[c].zero_shot for c in hub.class_ids])
    sims = np.clip(bank @ query, -1.0, 1.0)
    order = np.lexsort((ids, -sims))[: min(k, len(ids))]
    return [(int(ids[i]), float(sims[i])) for i in order]


def forged_task_vector(hub: FoundationalHub, class_name: str, cfg: ForgeConfig,
                       encoder: ReferenceEncoder) -> tuple[TaskVector, MergeReport]:
    text = _prompt_text(class_name, cfg)
    picked = top_k(hub, text, cfg.k, encoder)
    sims = np.array([s for _, s in picked])
    weights = softmax(sims, cfg.temperature)
    tv = combine([(materialize(hub.entries[c].adapter), float(w)) for (c, _), w in zip(picked, weights)])
    report = MergeReport(class_name, [c for c, _ in picked], sims.tolist(), weights.tolist(), cfg.alpha, cfg.k)
    return tv, report


def forge(hub: FoundationalHub, class_name: str, cfg: ForgeConfig,
          encoder: ReferenceEncoder) -> tuple[np.ndarray, MergeReport]:
    """Prototype for an unseen class from a softmax-weighted merge of its top-K experts.

    Output is ``encode(p_j; theta0 + alpha * sum_i w_ij tau_i)``.
    """
    hub.check_encoder(encoder)
    tv, report = forged_task_vector(hub, class_name, cfg, encoder)
    return encode(encoder, _prompt_text(class_name, cfg), tv, cfg.alpha), report


def seen_prototype(hub: FoundationalHub, class_id: int, encoder: ReferenceEncoder,
                   alpha_seen: float = 1.0) -> np.ndarray:
    e = hub.entry(class_id)
    return encode(encoder, ClassPrompt(class_id, e.name), e.adapter, alpha_seen)


def zero_shot_prototype(encoder: ReferenceEncoder, name: str, cfg: ForgeConfig | None = None) -> np.ndarray:
    return encode(encoder, _prompt_text(name, cfg))


def build_prototypes(
    hub: FoundationalHub,
    encoder: ReferenceEncoder,
    seen: Sequence[int],
    unseen: Mapping[int, str],
    cfg: ForgeConfig,
    reports: list | None = None,
) -> dict[int, np.ndarray]:
    """Seen classes through their own expert, unseen classes through forging."""
    overlap = set(seen) & set(unseen)
    if overlap:
        raise ContractError(f"classes {sorted(overlap)} are both seen and unseen")
    protos = {}
    for c in seen:
        protos[c] = seen_prototype(hub, c, encoder, cfg.alpha_seen)
    for c, name in unseen.items():
        if hub.entries:
            protos[c], report = forge(hub, name, cfg, encoder)
            if reports is not None:
                reports.append(report)
        else:
            protos[c] = zero_shot_prototype(encoder, name, cfg)
    return protos


def rank_scores(z_vis: np.ndarray, protos: Mapping[int, np.ndarray], candidates: Sequence[int]) -> Prediction:
    ids = np.array(list(candidates))
    scores = np.clip(np.stack([protos[c] for c in candidates]) @ z_vis, -1.0, 1.0)
    order = np.lexsort((ids, -scores))
    return Prediction([(int(ids[i]), float(scores[i])) for i in order])


def classify(
    hub: FoundationalHub,
    z_vis: np.ndarray,
    seen: Sequence[int],
    unseen: Mapping[int, str],
    cfg: ForgeConfig,
    encoder: ReferenceEncoder,
    protocol: Protocol | str = Protocol.CLASS_IL,
    task_classes: Sequence[int] | None = None,
) -> Prediction:
    """Rank candidate classes by cosine similarity to ``z_vis``.

    CLASS_IL scores the union of ``seen`` and ``unseen``; MTIL restricts the
    candidates to ``task_classes``.
    """
    protocol = Protocol(protocol)
    candidates = list(seen) + [c for c in unseen if c not in seen]
    if protocol is Protocol.MTIL:
        if task_classes is None:
            raise ContractError("MTIL classification needs the task's classes")
        allowed = set(task_classes)
        candidates = [c for c in candidates if c in allowed]
        seen = [c for c in seen if c in allowed]
        unseen = {c: n for c, n in unseen.items() if c in allowed}
    if not candidates:
        raise ContractError("no candidate classes to score")
    protos = build_prototypes(hub, encoder, seen, unseen, cfg)
    return rank_scores(np.asarray(z_vis, dtype=np.float64), protos, candidates)


def predict_batch(z: np.ndarray, protos: Mapping[int, np.ndarray], candidates: Sequence[int]) -> np.ndarray:
    """Top-1 class per row of ``z``; ties go to the earlier candidate."""
    cands = np.array(list(candidates))
    scores = z @ np.stack([protos[c] for c in candidates]).T
    return cands[np.argmax(scores, axis=1)]
