"""Class-conditioned diffusion generators over embedding space and D_SYN.

Each task gets its own epsilon-prediction MLP (SELU, 8 layers of 256 by
default).  Conditioning is by concatenating the noisy input, a learned class
embedding and a sinusoidal timestep embedding.  Features are standardized
per dimension before training; samples are mapped back and L2-normalized.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from moder import container
from moder.errors import ContractError, TrainingDivergenceError, UnknownClassError
from moder.numerics import autograd as ag
from moder.numerics.autograd import Tensor
from moder.numerics.functional import Activation, forward_mlp, init_mlp, l2_normalize_rows
from moder.numerics.optim import AdamWState, adamw_step
from moder.numerics.params import Param, ParamSet
from moder.numerics.rng import SeededRng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    betas: tuple[float, ...]

    def __post_init__(self):
        b = np.asarray(self.betas)
        if b.size < 1 or np.any(b <= 0) or np.any(b >= 1):
            raise ContractError("betas must be a non-empty sequence in (0, 1)")
        if np.any(np.diff(b) <= 0):
            raise ContractError("betas must be strictly increasing")

    @classmethod
    def linear(cls, steps: int = 100, beta_start: float | None = None, beta_end: float | None = None) -> "NoiseSchedule":
        """Linear betas; the 1e-4..0.02 endpoints of the 1000-step schedule are
        rescaled by ``1000 / steps`` unless given, so the terminal signal level
        stays close to zero for short chains."""
        if steps < 1:
            raise ContractError(f"steps must be >= 1, got {steps}")
        scale = 1000.0 / steps
        start = 1e-4 * scale if beta_start is None else beta_start
        end = min(0.02 * scale, 0.999) if beta_end is None else beta_end
        return cls(tuple(float(x) for x in np.linspace(start, end, steps)))

    @property
    def steps(self) -> int:
        return len(self.betas)

    @property
    def beta(self) -> np.ndarray:
        return np.asarray(self.betas)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alpha)

    def q_sample(self, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
        """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, with 1-based ``t``."""
        ab = self.alpha_bar[np.asarray(t) - 1]
        if np.ndim(ab):
            ab = ab[:, None]
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def timestep_embedding(t, dim: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


@dataclass
class DiffusionGenerator:
    task_id: int
    class_ids: list[int]
    params: ParamSet
    schedule: NoiseSchedule
    dim: int
    d_cond: int = 16
    d_time: int = 16
    seed: int = 0
    feat_mean: np.ndarray = None
    feat_std: np.ndarray = None
    final_loss: float = float("nan")
    losses: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.feat_mean is None:
            self.feat_mean = np.zeros(self.dim)
        if self.feat_std is None:
            self.feat_std = np.ones(self.dim)

    def class_index(self, class_id: int) -> int:
        try:
            return self.class_ids.index(int(class_id))
        except ValueError:
            raise UnknownClassError(f"class {class_id} is not generated by task {self.task_id}") from None

    def predict_eps(self, bound, x_t, class_idx: np.ndarray, t: np.ndarray) -> Tensor:
        cond = ag.take(bound["cls_emb"], class_idx)
        inp = ag.concat([ag.as_tensor(x_t), cond, timestep_embedding(t, self.d_time)], axis=1)
        return forward_mlp(bound, inp, Activation.SELU)


def init_generator(
    task_id: int,
    class_ids: Sequence[int],
    dim: int,
    schedule: NoiseSchedule,
    seed: int = 0,
    hidden: int = 256,
    depth: int = 8,
    d_cond: int = 16,
    d_time: int = 16,
) -> DiffusionGenerator:
    rng = SeededRng(seed, "generator-init", task_id)
    widths = [dim + d_cond + d_time] + [hidden] * (depth - 1) + [dim]
    arrays = init_mlp(widths, rng)
    arrays["cls_emb"] = rng.normal((len(class_ids), d_cond))
    params = ParamSet({k: Param(v) for k, v in arrays.items()})
    return DiffusionGenerator(task_id, [int(c) for c in class_ids], params, schedule, dim, d_cond, d_time, seed)


def diffusion_loss(gen: DiffusionGenerator, bound, x0: np.ndarray, class_idx, t, eps) -> Tensor:
    """Mean squared error between the true and predicted noise."""
    x_t = gen.schedule.q_sample(x0, t, eps)
    pred = gen.predict_eps(bound, x_t, class_idx, t)
    diff = pred - eps
    return ag.mean(ag.square(diff))


def train_generator(
    features,
    labels=None,
    schedule: NoiseSchedule | None = None,
    seed: int = 0,
    iters: int = 2000,
    lr: float = 1e-3,
    weight_decay: float = 1e-2,
    batch_size: int = 64,
    task_id: int = 0,
    hidden: int = 256,
    depth: int = 8,
    d_cond: int = 16,
    d_time: int = 16,
) -> DiffusionGenerator:
    """Fit a class-conditioned DDPM noise predictor to one task's features.

    ``features`` is either an (n, d) array with ``labels`` given separately or
    a list of ``(vector, class_id)`` pairs.
    """
    x, y = _as_arrays(features, labels)
    if len(x) == 0:
        raise ContractError("train_generator() needs at least one feature")
    schedule = schedule or NoiseSchedule.linear()
    class_ids = sorted(set(int(c) for c in y))
    gen = init_generator(task_id, class_ids, x.shape[1], schedule, seed, hidden, depth, d_cond, d_time)
    gen.feat_mean = x.mean(axis=0)
    std = x.std(axis=0)
    gen.feat_std = np.where(std > 1e-8, std, 1.0)
    z = (x - gen.feat_mean) / gen.feat_std
    idx_of = {c: i for i, c in enumerate(class_ids)}
    cls_idx = np.array([idx_of[int(c)] for c in y])

    rng = SeededRng(seed, "generator-train", task_id)
    state = AdamWState(lr=lr, weight_decay=weight_decay)
    params = gen.params
    losses = []
    for it in range(iters):
        pick = rng.integers(0, len(z), size=min(batch_size, len(z)))
        t = rng.integers(1, schedule.steps + 1, size=len(pick))
        eps = rng.normal((len(pick), gen.dim))
        bound = params.bind()
        loss = diffusion_loss(gen, bound, z[pick], cls_idx[pick], t, eps)
        value = float(loss.value)
        if not np.isfinite(value):
            raise TrainingDivergenceError(f"generator {task_id}: non-finite loss at iteration {it}")
        grads = ag.backward(loss)
        params, state = adamw_step(params, grads, state)
        losses.append(value)
    gen.params = params
    gen.losses = losses
    tail = losses[-50:]
    gen.final_loss = float(np.mean(tail)) if tail else float("nan")
    log.debug("generator task=%d classes=%s final_loss=%.4f", task_id, class_ids, gen.final_loss)
    return gen


def sample(gen: DiffusionGenerator, class_id: int, n: int, seed: int = 0, batch: int | None = None) -> np.ndarray:
    """Ancestral DDPM sampling; returns an (n, d) array of unit vectors.

    Batch ``b`` draws its noise from stream ``(seed, "sample", task, class, b)``,
    so results depend on ``batch`` but not on anything else.
    """
    ci = gen.class_index(class_id)
    if n <= 0:
        return np.zeros((0, gen.dim))
    batch = batch or n
    sched = gen.schedule
    beta, alpha, abar = sched.beta, sched.alpha, sched.alpha_bar
    params = {k: Tensor(v) for k, v in gen.params.items()}
    chunks = []
    for b, start in enumerate(range(0, n, batch)):
        m = min(batch, n - start)
        rng = SeededRng(seed, "sample", gen.task_id, int(class_id), b)
        x = rng.normal((m, gen.dim))
        cls = np.full(m, ci)
        for t in range(sched.steps, 0, -1):
            eps = gen.predict_eps(params, x, cls, np.full(m, t)).value
            mean = (x - beta[t - 1] / np.sqrt(1.0 - abar[t - 1]) * eps) / np.sqrt(alpha[t - 1])
            if t > 1:
                var = beta[t - 1] * (1.0 - abar[t - 2]) / (1.0 - abar[t - 1])
                x = mean + np.sqrt(var) * rng.normal((m, gen.dim))
            else:
                x = mean
        chunks.append(x * gen.feat_std + gen.feat_mean)
    return l2_normalize_rows(np.concatenate(chunks, axis=0))


@dataclass
class SyntheticDataset:
    x: np.ndarray
    y: np.ndarray
    provenance: list[int]

    def __len__(self) -> int:
        return len(self.y)

    @property
    def classes(self) -> list[int]:
        return sorted(set(int(c) for c in self.y))

    @property
    def counts(self) -> dict[int, int]:
        ids, n = np.unique(self.y, return_counts=True)
        return {int(i): int(k) for i, k in zip(ids, n)}

    def items(self) -> list[tuple[np.ndarray, int]]:
        return [(self.x[i], int(self.y[i])) for i in range(len(self.y))]

    def of_class(self, class_id: int) -> np.ndarray:
        return self.x[self.y == class_id]


def build_synthetic_dataset(
    generators: Sequence[DiffusionGenerator],
    per_class: int = 400,
    batch: int = 64,
    seed: int = 0,
    real: tuple[np.ndarray, np.ndarray] | None = None,
    cache: dict | None = None,
) -> SyntheticDataset:
    """Balanced replay set: ``per_class`` samples for every class of every generator.

    ``real=(x, y)`` swaps in real features for the classes it covers
    (resampled to ``per_class``), for ablations that mix real data.  Sampling
    is deterministic, so a ``cache`` dict may carry draws across calls.
    """
    seen: dict[int, int] = {}
    for g in generators:
        for c in g.class_ids:
            if c in seen:
                raise ContractError(f"class {c} covered by generators of tasks {seen[c]} and {g.task_id}")
            seen[c] = g.task_id
    xs, ys = [], []
    real_classes = set()
    if real is not None:
        rx, ry = np.asarray(real[0], dtype=np.float64), np.asarray(real[1])
        rrng = SeededRng(seed, "dsyn-real")
        for c in sorted(set(int(v) for v in ry)):
            pool = rx[ry == c]
            pick = rrng.integers(0, len(pool), size=per_class) if len(pool) < per_class else rrng.permutation(len(pool))[:per_class]
            xs.append(pool[pick])
            ys.append(np.full(per_class, c))
            real_classes.add(c)
    for g in generators:
        for c in g.class_ids:
            if c in real_classes:
                continue
            key = (g.params.fingerprint(), c, per_class, batch, seed)
            if cache is not None and key in cache:
                drawn = cache[key]
            else:
                drawn = sample(g, c, per_class, seed=seed, batch=batch)
                if cache is not None:
                    cache[key] = drawn
            xs.append(drawn)
            ys.append(np.full(per_class, c))
    if not xs:
        return SyntheticDataset(np.zeros((0, generators[0].dim if generators else 0)), np.zeros(0, dtype=int), [])
    x = np.concatenate(xs)
    y = np.concatenate(ys).astype(int)
    order = SeededRng(seed, "dsyn-shuffle").permutation(len(y))
    return SyntheticDataset(x[order], y[order], [g.task_id for g in generators])


def _as_arrays(features, labels) -> tuple[np.ndarray, np.ndarray]:
    if labels is not None:
        return np.asarray(features, dtype=np.float64), np.asarray(labels, dtype=int)
    features = list(features)
    if not features:
        return np.zeros((0, 0)), np.zeros(0, dtype=int)
    return (
        np.stack([np.asarray(v, dtype=np.float64) for v, _ in features]),
        np.array([int(c) for _, c in features]),
    )


# --- persistence ---------------------------------------------------------------

def save_generator(gen: DiffusionGenerator, path: str | Path) -> None:
    w = container.Writer(container.KIND_GENERATOR)
    w.u32(gen.task_id)
    w.u32(gen.dim)
    w.u32(gen.d_cond)
    w.u32(gen.d_time)
    w.i64(gen.seed)
    w.f64(gen.final_loss)
    w.u32(len(gen.class_ids))
    for c in gen.class_ids:
        w.u32(c)
    w.u32(gen.schedule.steps)
    for b in gen.schedule.betas:
        w.f64(b)
    w.array(gen.feat_mean)
    w.array(gen.feat_std)
    w.u32(len(gen.params))
    for name in gen.params:
        w.string(name)
        w.array(gen.params[name])
    Path(path).write_bytes(w.getvalue())


def load_generator(path: str | Path) -> DiffusionGenerator:
    r = container.Reader(Path(path).read_bytes(), container.KIND_GENERATOR)
    task_id, dim, d_cond, d_time = r.u32(), r.u32(), r.u32(), r.u32()
    seed = r.i64()
    final_loss = r.f64()
    class_ids = [r.u32() for _ in range(r.u32())]
    schedule = NoiseSchedule(tuple(r.f64() for _ in range(r.u32())))
    mean, std = r.array(), r.array()
    entries = {}
    for _ in range(r.u32()):
        name = r.string()
        entries[name] = Param(r.array())
    r.finish()
    return DiffusionGenerator(task_id, class_ids, ParamSet(entries), schedule, dim, d_cond, d_time,
                              seed, mean, std, final_loss)
