"""Textual alignment: one low-rank expert per class, trained on replayed embeddings.

Each expert i produces a prototype ``encode(p_i; theta0 + tau_i)``; its score on
a visual embedding is the cosine similarity ``s_i``.  The sigmoid loss treats
every class as an independent binary problem, so the gradient of expert i only
involves ``s_i`` and experts can be updated in any partition without changing
the result.  The cross-entropy variant couples all experts through the
softmax normalizer and is kept for ablations.
"""

from __future__ import annotations

import enum
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from moder.encoder.adapters import AdapterModule, Variant, new_adapter
from moder.encoder.model import ReferenceEncoder
from moder.encoder.text import CANONICAL_TEMPLATE, ClassPrompt, PromptTemplate, default_templates
from moder.errors import ContractError, TrainingDivergenceError
from moder.numerics import autograd as ag
from moder.numerics.autograd import Tensor
from moder.numerics.optim import AdamWState, adamw_step
from moder.numerics.rng import SeededRng
from moder.replay import SyntheticDataset

log = logging.getLogger(__name__)


class LossVariant(str, enum.Enum):
    SIGMOID = "sigmoid"
    CROSS_ENTROPY = "cross_entropy"


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.0
    iterations: int = 500
    batch_size: int = 512
    expert_batch: int = 8
    loss: LossVariant = LossVariant.SIGMOID
    template_aug: bool = True
    temperature: float = 1.0
    retrain_old: bool = True
    lr_schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        self.loss = LossVariant(self.loss)
        if self.lr_schedule not in ("constant", "cosine"):
            raise ContractError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.lr <= 0:
            raise ContractError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ContractError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.iterations < 0:
            raise ContractError(f"iterations must be >= 0, got {self.iterations}")
        for name in ("batch_size", "expert_batch"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.temperature <= 0:
            raise ContractError(f"temperature must be > 0, got {self.temperature}")


# --- losses ---------------------------------------------------------------------

def _labels_pm(classes: Sequence[int], true_class: int) -> np.ndarray:
    if true_class not in classes:
        raise ContractError(f"true class {true_class} not among {list(classes)}")
    return np.array([1.0 if c == true_class else -1.0 for c in classes])


def sigmoid_loss(sims, true_class: int, classes: Sequence[int] | None = None):
    """sum_i log(1 + exp(-s_i * y_i)) with y_i = +1 for the true class, -1 otherwise.

    ``sims`` is indexed by ``classes`` (default ``range(len(sims))``).  Works on
    plain arrays (returns float) and on graph tensors (returns a Tensor).
    """
    n = len(sims.value if isinstance(sims, Tensor) else sims)
    classes = list(range(n)) if classes is None else list(classes)
    y = _labels_pm(classes, true_class)
    out = ag.sum_(ag.softplus(ag.as_tensor(sims) * (-y)))
    return out if isinstance(sims, Tensor) else float(out.value)


def sigmoid_loss_grad(sims, true_class: int) -> np.ndarray:
    """Closed-form d loss / d s_i = -y_i * sigmoid(-s_i * y_i)."""
    s = np.asarray(sims, dtype=np.float64)
    y = _labels_pm(list(range(len(s))), true_class)
    return -y / (1.0 + np.exp(s * y))


def cross_entropy_loss(sims, true_class: int, temperature: float = 1.0, classes: Sequence[int] | None = None):
    """-log softmax(s / temperature)[true_class]."""
    raw = sims.value if isinstance(sims, Tensor) else np.asarray(sims, dtype=np.float64)
    classes = list(range(len(raw))) if classes is None else list(classes)
    if true_class not in classes:
        raise ContractError(f"true class {true_class} not among {classes}")
    j = classes.index(true_class)
    z = ag.as_tensor(sims) * (1.0 / temperature)
    shift = float(np.max(raw) / temperature)
    lse = ag.log(ag.sum_(ag.exp(z - shift))) + shift
    out = lse - ag.take(z, j)
    return out if isinstance(sims, Tensor) else float(out.value)


# --- expert set -------------------------------------------------------------------

@dataclass
class ExpertSet:
    encoder: ReferenceEncoder
    variant: Variant = Variant.LORA
    rank: int = 16
    hub_seed: int = 0
    adapters: dict[int, AdapterModule] = field(default_factory=dict)
    names: dict[int, str] = field(default_factory=dict)
    created_task: dict[int, int] = field(default_factory=dict)
    _in_flight: set[int] = field(default_factory=set, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        self.variant = Variant(self.variant)

    def __contains__(self, class_id: int) -> bool:
        return class_id in self.adapters

    def __len__(self) -> int:
        return len(self.adapters)

    @property
    def class_ids(self) -> list[int]:
        return list(self.adapters)

    def add_class(self, class_id: int, name: str, task_id: int) -> AdapterModule:
        if class_id in self.adapters:
            raise ContractError(f"expert for class {class_id} already exists")
        rng = SeededRng(self.hub_seed, "adapter-init", class_id)
        adapter = new_adapter(class_id, self.encoder.layer_shapes, self.rank, rng, self.variant, self.hub_seed)
        self.adapters[class_id] = adapter
        self.names[class_id] = name
        self.created_task[class_id] = task_id
        return adapter

    def snapshot(self) -> dict[int, dict[str, np.ndarray]]:
        return {c: {k: v.copy() for k, v in a.params.items()} for c, a in self.adapters.items()}


def expert_scores_t(experts: ExpertSet, class_id: int, prompt_text: str, z: np.ndarray, bound=None) -> Tensor:
    """Cosine scores (batch,) of unit-norm rows ``z`` against expert ``class_id``'s prototype."""
    adapter = experts.adapters[class_id]
    disp = adapter.displacement_t(bound)
    proto = experts.encoder.forward_t(experts.encoder.pooled(prompt_text), disp, 1.0)["out"]
    return Tensor(z) @ proto


def _chunk_loss(
    experts: ExpertSet,
    subset: Sequence[int],
    z: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    prompts: Mapping[int, str],
) -> tuple[Tensor, dict[int, dict[str, Tensor]]]:
    bound_by_class = {}
    scores = []
    for cid in subset:
        bound = experts.adapters[cid].params.bind(prefix=f"{cid}/")
        bound_by_class[cid] = bound
        scores.append(expert_scores_t(experts, cid, prompts[cid], z, bound))
    n = len(labels)
    if cfg.loss is LossVariant.SIGMOID:
        total = None
        for cid, s in zip(subset, scores):
            y = np.where(labels == cid, 1.0, -1.0)
            term = ag.sum_(ag.softplus(s * (-y)))
            total = term if total is None else total + term
        return total * (1.0 / n), bound_by_class
    # Cross-entropy restricted to this chunk: rows whose label is outside the
    # chunk have no target and contribute nothing.
    logits = ag.concat([ag.reshape(s, (n, 1)) for s in scores], axis=1) * (1.0 / cfg.temperature)
    col = {cid: k for k, cid in enumerate(subset)}
    rows = np.array([i for i in range(n) if int(labels[i]) in col], dtype=int)
    if len(rows) == 0:
        return ag.sum_(logits) * 0.0, bound_by_class
    targets = np.array([col[int(labels[i])] for i in rows])
    sub = ag.take(logits, rows)
    shift = sub.value.max(axis=1, keepdims=True)
    lse = ag.log(ag.sum_(ag.exp(sub - shift), axis=1)) + shift[:, 0]
    picked = ag.take(sub, (np.arange(len(rows)), targets))
    return ag.sum_(lse - picked) * (1.0 / n), bound_by_class


def batched_expert_update(
    experts: ExpertSet,
    subset: Iterable[int],
    z: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    states: dict[int, AdamWState],
    prompts: Mapping[int, str] | None = None,
) -> float:
    """Forward/backward for one batch of experts, then an AdamW step on each of them.

    Only the adapters in ``subset`` change.  Returns the chunk's loss value.
    """
    subset = list(subset)
    if not subset:
        return 0.0
    if len(set(subset)) != len(subset):
        raise ContractError(f"duplicate classes in expert batch {subset}")
    missing = [c for c in subset if c not in experts.adapters]
    if missing:
        raise ContractError(f"no expert for classes {missing}")
    with experts._lock:
        busy = experts._in_flight.intersection(subset)
        if busy:
            raise ContractError(f"classes {sorted(busy)} are already being updated by another expert batch")
        experts._in_flight.update(subset)
    try:
        if prompts is None:
            prompts = {c: ClassPrompt(c, experts.names[c]).text for c in subset}
        loss, bound_by_class = _chunk_loss(experts, subset, z, labels, cfg, prompts)
        value = float(loss.value)
        if not np.isfinite(value):
            raise TrainingDivergenceError(f"non-finite expert loss for classes {subset}")
        grads = ag.backward(loss)
        for cid in subset:
            adapter = experts.adapters[cid]
            prefix = f"{cid}/"
            g = {k: grads.get(prefix + k, np.zeros_like(adapter.params[k])) for k in adapter.params.trainable_names()}
            state = states.setdefault(cid, AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay))
            new_params, _ = adamw_step(adapter.params, g, state)
            experts.adapters[cid] = adapter.with_params(new_params)
        return value
    finally:
        with experts._lock:
            experts._in_flight.difference_update(subset)


def _partition(ids: Sequence[int], size: int) -> list[list[int]]:
    return [list(ids[i:i + size]) for i in range(0, len(ids), size)]


def train_task_experts(
    experts: ExpertSet,
    dsyn: SyntheticDataset,
    cfg: TrainConfig,
    task_id: int = 0,
    templates: Sequence[PromptTemplate] | None = None,
    trainable: Iterable[int] | None = None,
    loss_log: list | None = None,
    workers: int = 1,
) -> ExpertSet:
    """Run ``cfg.iterations`` optimizer steps for the experts of every class in ``dsyn``.

    Each step draws one data batch (shared by all experts) and, with template
    augmentation on, one template per expert from that expert's own stream.
    Experts are processed in chunks of ``cfg.expert_batch``.  ``trainable``
    restricts which experts are updated (default: all when ``cfg.retrain_old``,
    else only those created in ``task_id``).  Rows of
    ``(iteration, expert_batch, loss)`` are appended to ``loss_log``.  With
    ``workers > 1`` the disjoint expert batches of one step run on a thread
    pool; the result is the same for any worker count.
    """
    missing = [c for c in dsyn.classes if c not in experts]
    if missing:
        raise ContractError(f"classes {missing} in the replay set have no expert")
    if trainable is None:
        if cfg.retrain_old:
            trainable = dsyn.classes
        else:
            trainable = [c for c in dsyn.classes if experts.created_task.get(c) == task_id]
    ids = sorted(trainable)
    if cfg.iterations == 0 or not ids or len(dsyn) == 0:
        return experts
    templates = list(templates) if templates else default_templates()
    chunk = min(cfg.expert_batch, len(ids))
    groups = _partition(ids, chunk)
    states: dict[int, AdamWState] = {}
    data_rng = SeededRng(cfg.seed, "expert-data", task_id)
    tmpl_rng = {c: SeededRng(cfg.seed, "templates", task_id, c) for c in ids}
    bsz = min(cfg.batch_size, len(dsyn))
    for c in ids:  # create optimizer states up front so worker threads never insert
        states[c] = AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 and len(groups) > 1 else None
    for it in range(cfg.iterations):
        lr = lr_at(cfg, it)
        for c in ids:
            states[c].lr = lr
        pick = data_rng.integers(0, len(dsyn), size=bsz)
        z, labels = dsyn.x[pick], dsyn.y[pick]
        prompts = {}
        for c in ids:
            template = templates[int(tmpl_rng[c].integers(0, len(templates)))] if cfg.template_aug else CANONICAL_TEMPLATE
            prompts[c] = template.render(experts.names[c])
        if pool is None:
            values = [batched_expert_update(experts, g, z, labels, cfg, states, prompts) for g in groups]
        else:
            values = list(pool.map(lambda g: batched_expert_update(experts, g, z, labels, cfg, states, prompts), groups))
        if loss_log is not None:
            loss_log.extend((it, g_idx, v) for g_idx, v in enumerate(values))
    if pool is not None:
        pool.shutdown()
    return experts


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    """Learning rate for ``iteration``; the cosine schedule decays from ``cfg.lr`` toward 0 over one task."""
    if cfg.lr_schedule == "constant":
        return cfg.lr
    return 0.5 * cfg.lr * (1.0 + np.cos(np.pi * iteration / cfg.iterations))


def template_sequence(cfg: TrainConfig, task_id: int, class_id: int, steps: int, n_templates: int) -> list[int]:
    """Template indices an expert draws over ``steps`` iterations (for reproducibility checks)."""
    rng = SeededRng(cfg.seed, "templates", task_id, class_id)
    return [int(rng.integers(0, n_templates)) for _ in range(steps)]
