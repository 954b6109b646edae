"""Diffusion generators and the synthetic replay set."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import numeric_grad, rel_err
from moder.errors import ContractError, FormatError, UnknownClassError
from moder.numerics import ParamSet, backward
from moder.replay import (
    NoiseSchedule,
    build_synthetic_dataset,
    diffusion_loss,
    init_generator,
    load_generator,
    sample,
    save_generator,
    timestep_embedding,
    train_generator,
)

SMALL = dict(hidden=16, depth=2, d_cond=4, d_time=4)


def _toy_task(classes, dim=4, n=30, seed=0):
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(len(classes), dim))
    x = np.concatenate([m + 0.1 * rng.normal(size=(n, dim)) for m in means])
    return x, np.repeat(classes, n)


@pytest.fixture(scope="module")
def two_generators():
    sched = NoiseSchedule.linear(10)
    x0, y0 = _toy_task([0, 1], seed=0)
    x1, y1 = _toy_task([2, 3, 4], seed=1)
    g0 = train_generator(x0, y0, sched, seed=0, iters=20, task_id=0, **SMALL)
    g1 = train_generator(x1, y1, sched, seed=0, iters=20, task_id=1, **SMALL)
    return g0, g1


# --- schedule ------------------------------------------------------------------------

@given(st.integers(1, 1000))
def test_linear_schedule_invariants(steps):
    s = NoiseSchedule.linear(steps)
    assert s.steps == steps
    assert 0 < s.beta[0] and s.beta[-1] < 1
    if steps > 1:
        assert np.all(np.diff(s.beta) > 0)
    assert np.all(np.diff(s.alpha_bar) < 0) or steps == 1


def test_canonical_endpoints_at_thousand_steps():
    s = NoiseSchedule.linear(1000)
    assert s.beta[0] == pytest.approx(1e-4) and s.beta[-1] == pytest.approx(0.02)


def test_schedule_contract():
    with pytest.raises(ContractError):
        NoiseSchedule((0.1, 0.05))
    with pytest.raises(ContractError):
        NoiseSchedule((0.0, 0.5))
    with pytest.raises(ContractError):
        NoiseSchedule.linear(0)


@pytest.mark.parametrize("t", [1, 10, 25, 50])
def test_forward_noising_marginal(t):
    # Oracle: x_t | x_0 ~ N(sqrt(abar_t) x_0, (1 - abar_t) I); compare within 3 standard errors.
    s = NoiseSchedule.linear(50)
    n, x0 = 40_000, np.linspace(-1.0, 1.0, 6)
    eps = np.random.default_rng(t).normal(size=(n, 6))
    xt = s.q_sample(np.broadcast_to(x0, (n, 6)), np.full(n, t), eps)
    ab = s.alpha_bar[t - 1]
    mean_se = np.sqrt((1 - ab) / n)
    var_se = (1 - ab) * np.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(xt.mean(axis=0) - np.sqrt(ab) * x0) < 3 * mean_se)
    assert np.all(np.abs(xt.var(axis=0, ddof=1) - (1 - ab)) < 3 * var_se)


def test_timestep_embedding_shape_and_values():
    e = timestep_embedding([0, 5], 5)
    assert e.shape == (2, 5)
    np.testing.assert_array_equal(e[0], [0, 0, 1, 1, 0])


# --- generators ------------------------------------------------------------------------

def test_generator_conditions_only_on_own_classes(two_generators):
    g0, _ = two_generators
    assert g0.class_ids == [0, 1]
    assert g0.params["l0.weight"].shape[1] == g0.dim + g0.d_cond + g0.d_time
    with pytest.raises(UnknownClassError):
        sample(g0, 2, 3)


def test_training_is_deterministic():
    x, y = _toy_task([0, 1])
    a = train_generator(x, y, NoiseSchedule.linear(5), seed=3, iters=5, **SMALL)
    b = train_generator(x, y, NoiseSchedule.linear(5), seed=3, iters=5, **SMALL)
    assert a.params.fingerprint() == b.params.fingerprint()
    assert a.losses == b.losses


def test_generator_isolation(two_generators):
    g0, _ = two_generators
    before = g0.params.fingerprint()
    x, y = _toy_task([7, 8], seed=5)
    train_generator(x, y, NoiseSchedule.linear(10), seed=0, iters=5, task_id=2, **SMALL)
    assert g0.params.fingerprint() == before


def test_training_accepts_pairs():
    x, y = _toy_task([0, 1], n=5)
    pairs = list(zip(x, y))
    a = train_generator(pairs, None, NoiseSchedule.linear(5), iters=3, **SMALL)
    b = train_generator(x, y, NoiseSchedule.linear(5), iters=3, **SMALL)
    assert a.params.fingerprint() == b.params.fingerprint()
    with pytest.raises(ContractError):
        train_generator([], None, NoiseSchedule.linear(5), iters=1, **SMALL)


def test_sample_unit_norm_and_batch_keyed(two_generators):
    g0, _ = two_generators
    a = sample(g0, 1, 7, seed=2, batch=3)
    assert a.shape == (7, 4)
    np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(a, sample(g0, 1, 7, seed=2, batch=3))
    assert not np.array_equal(a, sample(g0, 1, 7, seed=3, batch=3))
    assert sample(g0, 1, 0).shape == (0, 4)


def test_diffusion_loss_gradient():
    gen = init_generator(0, [0, 1], 3, NoiseSchedule.linear(5), seed=1, hidden=5, depth=3, d_cond=2, d_time=2)
    rng = np.random.default_rng(0)
    x0, cls, t, eps = rng.normal(size=(4, 3)), np.array([0, 1, 1, 0]), np.array([1, 3, 5, 2]), rng.normal(size=(4, 3))
    arrays = {k: np.array(v) for k, v in gen.params.items()}

    def f(vals):
        return float(diffusion_loss(gen, ParamSet.from_arrays(vals).bind(), x0, cls, t, eps).value)

    grads = backward(diffusion_loss(gen, gen.params.bind(), x0, cls, t, eps))
    num = numeric_grad(f, arrays)
    for k in arrays:
        assert rel_err(grads[k], num[k]) < 1e-6, k


def test_generator_roundtrip(tmp_path, two_generators):
    g0, _ = two_generators
    path = tmp_path / "g.modr"
    save_generator(g0, path)
    back = load_generator(path)
    assert back.class_ids == g0.class_ids and back.schedule == g0.schedule
    for k in g0.params:
        np.testing.assert_array_equal(back.params[k], g0.params[k].astype(np.float32))
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(FormatError):
        load_generator(path)


# --- D_SYN ---------------------------------------------------------------------------------

def test_dsyn_balance_coverage_and_norm(two_generators):
    d = build_synthetic_dataset(list(two_generators), per_class=6, batch=4, seed=1)
    assert d.classes == [0, 1, 2, 3, 4]
    counts = d.counts
    assert max(counts.values()) - min(counts.values()) <= 1
    np.testing.assert_allclose(np.linalg.norm(d.x, axis=1), 1.0, atol=1e-12)
    assert d.provenance == [0, 1]
    assert len(d.items()) == len(d) == 30


def test_dsyn_cache_is_transparent(two_generators):
    cache: dict = {}
    a = build_synthetic_dataset(list(two_generators), per_class=5, batch=5, seed=0, cache=cache)
    b = build_synthetic_dataset(list(two_generators), per_class=5, batch=5, seed=0, cache=cache)
    c = build_synthetic_dataset(list(two_generators), per_class=5, batch=5, seed=0)
    assert len(cache) == 5
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.x, c.x)
    np.testing.assert_array_equal(a.y, c.y)


def test_dsyn_rejects_overlapping_generators(two_generators):
    g0, _ = two_generators
    with pytest.raises(ContractError):
        build_synthetic_dataset([g0, g0], per_class=2)


def test_dsyn_real_features_replace_generated(two_generators):
    g0, g1 = two_generators
    rx = np.eye(4)[[0, 0, 1]]
    d = build_synthetic_dataset([g0, g1], per_class=4, seed=0, real=(rx, np.array([0, 0, 0])))
    assert set(map(tuple, d.of_class(0))) <= {(1.0, 0, 0, 0), (0, 1.0, 0, 0)}
    assert d.counts == {0: 4, 1: 4, 2: 4, 3: 4, 4: 4}
