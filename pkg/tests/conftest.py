"""Shared fixtures: tiny encoders, random hubs and a finite-difference oracle."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from moder.config import RunConfig
from moder.encoder import EncoderSpec, ReferenceEncoder, new_adapter
from moder.hub import FoundationalHub, insert
from moder.numerics import SeededRng

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture]
)
settings.load_profile("default")

TINY_SPEC = EncoderSpec(seed=3, vocab_size=64, d_tok=8, hidden=12, dim=6)
NAMES = ("red fox", "grey wolf", "barn owl", "snow owl", "arctic fox", "red kite", "sea eagle", "brown bear")

# A complete run in well under a second: 6 classes over 3 tasks with toy-sized models.
TINY_RUN = {
    "world.n_classes": 6, "world.n_families": 3, "stream.n_tasks": 3,
    "stream.train_per_class": 20, "stream.test_per_class": 10,
    "replay.steps": 5, "replay.iters": 10, "replay.hidden": 16, "replay.depth": 2, "replay.per_class": 8,
    "experts.iterations": 3, "experts.batch_size": 16,
}


def tiny_cfg(**extra) -> RunConfig:
    return RunConfig().with_overrides({**TINY_RUN, **extra})


@pytest.fixture(scope="session")
def tiny_encoder() -> ReferenceEncoder:
    return ReferenceEncoder(TINY_SPEC)


@pytest.fixture(scope="session")
def default_encoder() -> ReferenceEncoder:
    return ReferenceEncoder(EncoderSpec())


def random_adapter(encoder, class_id: int, rank: int, seed: int, variant: str = "lora", scale: float = 0.3,
                   hub_seed: int = 0):
    """Adapter with every trainable entry randomized, so its displacement is non-zero."""
    rng = SeededRng(seed, "test-adapter", class_id)
    ad = new_adapter(class_id, encoder.layer_shapes, rank, rng, variant, hub_seed)
    return ad.with_params(ad.params.replace({k: rng.normal(ad.params[k].shape, scale) for k in ad.params}))


def random_hub(encoder, seed: int, n: int, rank: int = 2, variant: str = "lora", float32: bool = False):
    """Hub of ``n`` randomized experts named from :data:`NAMES` (with a numeric suffix past 8)."""
    hub = FoundationalHub.for_encoder(encoder, seed, variant, rank)
    for c in range(n):
        ad = random_adapter(encoder, c, rank, seed, variant, hub_seed=seed)
        if float32:
            ad = ad.with_params(ad.params.replace({k: ad.params[k].astype(np.float32).astype(np.float64)
                                                   for k in ad.params}))
        name = NAMES[c % len(NAMES)] + ("" if c < len(NAMES) else f" {c}")
        insert(hub, c, name, ad, encoder, task_id=c // 3)
    return hub


def numeric_grad(f, arrays: dict[str, np.ndarray], h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of the scalar ``f(arrays)`` with respect to every entry."""
    out = {}
    for name, base in arrays.items():
        g = np.zeros_like(base, dtype=np.float64)
        for idx in np.ndindex(base.shape):
            plus = {k: v.copy() for k, v in arrays.items()}
            minus = {k: v.copy() for k, v in arrays.items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            g[idx] = (f(plus) - f(minus)) / (2 * h)
        out[name] = g
    return out


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error, guarded for tiny gradients."""
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-8))


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line[1])
