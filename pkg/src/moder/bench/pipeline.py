"""End-to-end driver: replay, textual alignment, hub growth and evaluation per task."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from moder.bench.metrics import MetricsReport
from moder.bench.world import (
    SyntheticWorld,
    TaskData,
    TaskStream,
    WorldSpec,
    class_il_stream,
    generate_world,
    mtil_stream,
    sample_split,
)
from moder.config import RunConfig
from moder.encoder.model import ReferenceEncoder
from moder.encoder.text import load_templates
from moder.experts import ExpertSet, train_task_experts
from moder.hub.core import (
    ForgeConfig,
    FoundationalHub,
    MergeReport,
    Protocol,
    forge,
    insert,
    predict_batch,
    seen_prototype,
    zero_shot_prototype,
)
from moder.numerics.functional import l2_normalize_rows
from moder.replay import DiffusionGenerator, NoiseSchedule, build_synthetic_dataset, train_generator

log = logging.getLogger(__name__)


@dataclass
class Experiment:
    """World, stream and fixed train/test splits derived from one config."""

    encoder: ReferenceEncoder
    world: SyntheticWorld
    stream: TaskStream
    splits: list[TaskData]


def build_experiment(cfg: RunConfig, encoder: ReferenceEncoder | None = None) -> Experiment:
    encoder = encoder or ReferenceEncoder(cfg.encoder_spec)
    w = cfg.world
    world = generate_world(WorldSpec(w.n_classes, w.n_families, w.gamma, w.delta, w.sigma), encoder, cfg.seed)
    s = cfg.stream
    if cfg.protocol is Protocol.CLASS_IL:
        stream = class_il_stream(world, s.n_tasks, cfg.seed, s.train_per_class, s.test_per_class)
    else:
        stream = mtil_stream(world, s.n_tasks, s.train_per_class, s.test_per_class)
    return Experiment(encoder, world, stream, sample_split(world, stream, cfg.seed))


@dataclass
class PipelineResult:
    hub: FoundationalHub
    accuracy: np.ndarray
    report: MetricsReport
    expert_log: list[tuple[int, int, int, float]] = field(default_factory=list)  # task, iteration, batch, loss
    generator_losses: list[float] = field(default_factory=list)
    merge_reports: list[tuple[int, MergeReport]] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)


def candidates_for(stream: TaskStream, task: int) -> list[int]:
    """Classes scored when evaluating ``task``: all stream classes, or the task's own under MTIL."""
    if stream.protocol is Protocol.MTIL:
        return list(stream.tasks[task])
    return stream.all_classes


def accuracy_row(splits: Sequence[TaskData], stream: TaskStream, protos: dict[int, np.ndarray]) -> np.ndarray:
    row = np.zeros(len(splits))
    for i, data in enumerate(splits):
        pred = predict_batch(l2_normalize_rows(data.test_x), protos, candidates_for(stream, i))
        row[i] = float(np.mean(pred == data.test_y))
    return row


def zero_shot_prototypes(encoder: ReferenceEncoder, world: SyntheticWorld, classes: Sequence[int],
                         cfg: ForgeConfig | None = None) -> dict[int, np.ndarray]:
    return {c: zero_shot_prototype(encoder, world.names[c], cfg) for c in classes}


def moder_prototypes(hub: FoundationalHub, encoder: ReferenceEncoder, world: SyntheticWorld,
                     seen: Sequence[int], unseen: Sequence[int], forge_cfg: ForgeConfig,
                     unseen_mode: str = "forge", reports: list | None = None) -> dict[int, np.ndarray]:
    protos = {c: seen_prototype(hub, c, encoder, forge_cfg.alpha_seen) for c in seen}
    for c in unseen:
        if unseen_mode == "forge" and len(hub):
            protos[c], rep = forge(hub, world.names[c], forge_cfg, encoder)
            if reports is not None:
                reports.append(rep)
        else:
            protos[c] = zero_shot_prototype(encoder, world.names[c], forge_cfg)
    return protos


def run_pipeline(
    cfg: RunConfig,
    experiment: Experiment | None = None,
    progress: Callable[[str], None] | None = None,
) -> PipelineResult:
    """Train and evaluate over the stream; ``A[t, i]`` is filled after each task ``t``."""
    exp = experiment or build_experiment(cfg)
    encoder, world, stream, splits = exp.encoder, exp.world, exp.stream, exp.splits
    say = progress or (lambda msg: log.info(msg))
    n = stream.n_tasks
    acc = np.zeros((n, n))
    forge_cfg = cfg.forge_config()
    hub = FoundationalHub.for_encoder(encoder, cfg.seed, cfg.adapter.variant, cfg.adapter.rank)
    result = PipelineResult(hub, acc, None)
    seeds = {"master": cfg.seed, "encoder": cfg.encoder.seed}

    if cfg.eval.method == "zero_shot":
        protos = zero_shot_prototypes(encoder, world, stream.all_classes)
        row = accuracy_row(splits, stream, protos)
        acc[:] = row
        result.report = MetricsReport.from_matrix(
            acc, stream.protocol.value, "zero_shot", cfg.eval.mtil_transfer_inclusive, cfg.content_hash(), seeds
        )
        return result

    experts = ExpertSet(encoder, cfg.adapter.variant, cfg.adapter.rank, hub_seed=cfg.seed)
    schedule = NoiseSchedule.linear(cfg.replay.steps)
    train_cfg = cfg.train_config()
    templates = load_templates(cfg.experts.templates_file) if cfg.experts.templates_file else None
    generators: list[DiffusionGenerator] = []
    sample_cache: dict = {}
    r = cfg.replay
    for t, data in enumerate(splits):
        t0 = time.perf_counter()
        gen = train_generator(
            data.train_x, data.train_y, schedule, seed=cfg.seed, iters=r.iters, lr=r.lr,
            weight_decay=r.weight_decay, batch_size=r.batch_size, task_id=t, hidden=r.hidden,
            depth=r.depth, d_cond=r.d_cond, d_time=r.d_time,
        )
        generators.append(gen)
        result.generator_losses.append(gen.final_loss)
        t1 = time.perf_counter()
        dsyn = build_synthetic_dataset(generators, r.per_class, r.sample_batch, seed=cfg.seed, cache=sample_cache)
        t2 = time.perf_counter()
        for c in data.classes:
            experts.add_class(c, world.names[c], t)
        task_log: list = []
        train_task_experts(experts, dsyn, train_cfg, task_id=t, templates=templates,
                           loss_log=task_log, workers=cfg.threads)
        result.expert_log.extend((t, it, g, v) for it, g, v in task_log)
        t3 = time.perf_counter()
        for c in stream.seen_through(t):
            if c in hub:
                hub.update_adapter(c, experts.adapters[c])
            else:
                insert(hub, c, world.names[c], experts.adapters[c], encoder, task_id=t)
        reports: list = []
        protos = moder_prototypes(
            hub, encoder, world, stream.seen_through(t), [c for task in stream.tasks[t + 1:] for c in task],
            forge_cfg, cfg.forge.unseen, reports,
        )
        result.merge_reports.extend((t, rep) for rep in reports)
        acc[t] = accuracy_row(splits, stream, protos)
        t4 = time.perf_counter()
        for key, dt in (("generator", t1 - t0), ("replay", t2 - t1), ("experts", t3 - t2), ("eval", t4 - t3)):
            result.timings[key] = result.timings.get(key, 0.0) + dt
        say(f"task {t}: generator loss {gen.final_loss:.4f}, |D_SYN| {len(dsyn)}, "
            f"A[{t}] = {np.array2string(acc[t], precision=3)}")
    result.report = MetricsReport.from_matrix(
        acc, stream.protocol.value, "moder", cfg.eval.mtil_transfer_inclusive, cfg.content_hash(), seeds
    )
    return result
