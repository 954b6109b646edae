"""Acceptance criteria 1-9, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line that is also collected into the
terminal summary under "acceptance criteria".  Tolerances and runtime budgets
are the contractual ones.
"""

from __future__ import annotations

import contextlib
import json
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import NAMES, TINY_SPEC, numeric_grad, random_adapter, random_hub, rel_err
from moder import cli
from moder.bench import ablate, build_experiment, ci_transfer, faa, mtil_metrics, run_pipeline
from moder.config import RunConfig
from moder.encoder import EncoderSpec, ReferenceEncoder, encode, materialize
from moder.errors import FormatError
from moder.experts import ExpertSet, TrainConfig, cross_entropy_loss, sigmoid_loss, train_task_experts
from moder.hub import ForgeConfig, dumps, forge, forged_task_vector, load, loads, top_k
from moder.numerics import ParamSet, SeededRng, Tensor, backward, l2_normalize_rows
from moder.numerics import autograd as ag
from moder.replay import NoiseSchedule, SyntheticDataset, diffusion_loss, init_generator, sample, train_generator


@pytest.fixture()
def criterion(request):
    """Context manager factory that records a PASS/FAIL line for criterion ``n``."""

    @contextlib.contextmanager
    def run(n: int, title: str, budget: float | None = None):
        lines = request.config.__dict__.setdefault("_acceptance_lines", [])
        t0 = time.perf_counter()
        try:
            yield
            elapsed = time.perf_counter() - t0
            if budget is not None:
                assert elapsed < budget, f"took {elapsed:.1f} s, budget {budget:.0f} s"
        except BaseException as exc:
            line = f"FAIL criterion {n}: {title} ({type(exc).__name__}: {exc})"
            lines.append((n, line))
            print(line)
            raise
        line = f"PASS criterion {n}: {title} ({elapsed:.1f} s)"
        lines.append((n, line))
        print(line)

    return run


# --- 1. gradients -----------------------------------------------------------------------------

def _check_scalar_loss(loss_fn, rng, n):
    for _ in range(n):
        m = int(rng.integers(2, 9))
        s = rng.uniform(-1, 1, m)
        j = int(rng.integers(m))
        leaf = Tensor(s, requires_grad=True, name="s")
        g = backward(loss_fn(leaf, j))["s"]
        num = numeric_grad(lambda v: float(np.asarray(loss_fn(v["s"], j))), {"s": s.copy()})["s"]
        assert rel_err(g, num) < 1e-4


def test_criterion_1_gradient_suite(criterion, tiny_encoder):
    with criterion(1, "finite-difference gradients, 20 instances per op, rel. err < 1e-4", budget=30):
        rng = np.random.default_rng(1)
        _check_scalar_loss(sigmoid_loss, rng, 20)
        temps = iter(rng.uniform(0.2, 3.0, 20))
        for _ in range(20):
            temp = float(next(temps))
            _check_scalar_loss(lambda s, j, t=temp: cross_entropy_loss(s, j, t), rng, 1)

        # encoder forward through a random adapter, random alpha and output projection
        for i in range(20):
            variant = ("lora", "vera")[i % 2]
            ad = random_adapter(tiny_encoder, i, 2, 100 + i, variant)
            alpha = float(rng.uniform(0.05, 1.0))
            pooled = tiny_encoder.pooled(f"a photo of a {NAMES[i % len(NAMES)]}.")
            proj = rng.normal(size=TINY_SPEC.dim)
            trainable = {k: np.array(ad.params[k]) for k in ad.params.trainable_names()}

            def f(vals, ad=ad, alpha=alpha, pooled=pooled, proj=proj):
                d = materialize(ad.with_params(ad.params.replace(vals))).deltas
                return float(tiny_encoder.forward_t(pooled, d, alpha)["out"].value @ proj)

            out = tiny_encoder.forward_t(pooled, ad.displacement_t(ad.params.bind()), alpha)["out"]
            grads = backward(ag.sum_(out * proj))
            num = numeric_grad(f, trainable)
            for k in trainable:
                assert rel_err(grads[k], num[k]) < 1e-4, (i, variant, k)

        # diffusion noise-prediction MSE with respect to every generator parameter
        for i in range(20):
            dim, n = int(rng.integers(2, 5)), int(rng.integers(2, 6))
            sched = NoiseSchedule.linear(int(rng.integers(2, 20)))
            gen = init_generator(0, [0, 1], dim, sched, seed=i, hidden=5, depth=3, d_cond=2, d_time=2)
            x0, eps = rng.normal(size=(n, dim)), rng.normal(size=(n, dim))
            cls, t = rng.integers(0, 2, n), rng.integers(1, sched.steps + 1, n)
            arrays = {k: np.array(v) for k, v in gen.params.items()}

            def g(vals, gen=gen, x0=x0, cls=cls, t=t, eps=eps):
                return float(diffusion_loss(gen, ParamSet.from_arrays(vals).bind(), x0, cls, t, eps).value)

            grads = backward(diffusion_loss(gen, gen.params.bind(), x0, cls, t, eps))
            num = numeric_grad(g, arrays)
            for k in arrays:
                assert rel_err(grads[k], num[k]) < 1e-4, (i, k)


# --- 2. expert-batch equivalence --------------------------------------------------------------

def _toy_experts(encoder, n_classes=6):
    ex = ExpertSet(encoder, "lora", 2, hub_seed=0)
    for c in range(n_classes):
        ex.add_class(c, NAMES[c], 0)
    return ex


def _toy_dsyn(encoder, n_classes=6, n=8):
    rng = np.random.default_rng(7)
    means = l2_normalize_rows(rng.normal(size=(n_classes, encoder.dim)))
    x = np.concatenate([l2_normalize_rows(m + 0.2 * rng.normal(size=(n, encoder.dim))) for m in means])
    return SyntheticDataset(x, np.repeat(np.arange(n_classes), n), [0])


def _max_diff(a, b):
    return max(float(np.max(np.abs(a[c][k] - b[c][k]))) for c in a for k in a[c])


def test_criterion_2_expert_batch_equivalence(criterion, tiny_encoder):
    with criterion(2, "sigmoid training invariant to expert batching (1e-10); CE diverges (> 1e-3)", budget=120):
        d = _toy_dsyn(tiny_encoder)
        base = dict(iterations=20, lr=1e-2, batch_size=48)
        runs = {eb: train_task_experts(_toy_experts(tiny_encoder), d, TrainConfig(**base, expert_batch=eb)).snapshot()
                for eb in (1, 2, 6)}
        threaded = train_task_experts(_toy_experts(tiny_encoder), d, TrainConfig(**base, expert_batch=1),
                                      workers=3).snapshot()
        assert _max_diff(runs[1], runs[2]) <= 1e-10
        assert _max_diff(runs[1], runs[6]) <= 1e-10
        assert _max_diff(runs[1], threaded) <= 1e-10
        # Softmax couples the experts in a chunk, so the partition changes the update.
        ce = {eb: train_task_experts(_toy_experts(tiny_encoder), d,
                                     TrainConfig(**base, expert_batch=eb, loss="cross_entropy",
                                                 lr_schedule="constant")).snapshot()
              for eb in (1, 6)}
        gap = _max_diff(ce[1], ce[6])
        print(f"cross-entropy parameter gap between E_b=1 and E_b=6: {gap:.3e}")
        assert gap > 1e-3


# --- 3. forging identities ------------------------------------------------------------------------

def test_criterion_3_forging_identities(criterion, tiny_encoder):
    theta0 = tiny_encoder.theta0

    @settings(max_examples=100, database=None)
    @given(st.integers(0, 2**20), st.integers(1, 9), st.sampled_from(["lora", "vera"]), st.integers(1, 9),
           st.floats(0.05, 4.0), st.sampled_from(["tawny owl", "sea otter", "red squirrel", "grey heron"]))
    def check(seed, n, variant, k, temp, name):
        hub = random_hub(tiny_encoder, seed, n, variant=variant)
        prompt = f"a photo of a {name}."
        # K=1, alpha=1: the forged prototype is the nearest expert's own encoding
        z1, rep1 = forge(hub, name, ForgeConfig(k=1, alpha=1.0), tiny_encoder)
        top = top_k(hub, prompt, 1, tiny_encoder)[0][0]
        assert rep1.contributors == [top]
        direct = encode(tiny_encoder, prompt, hub.entry(top).adapter, 1.0)
        assert float(np.max(np.abs(z1 - direct))) <= 1e-10
        # alpha=0: effective weights are theta0 bit for bit, so is the output
        cfg0 = ForgeConfig(k=k, alpha=0.0, temperature=temp)
        tv, _ = forged_task_vector(hub, name, cfg0, tiny_encoder)
        tr = tiny_encoder.trace(prompt, tv, 0.0)
        np.testing.assert_array_equal(tr["weights_l0"], theta0["l0.weight"])
        np.testing.assert_array_equal(tr["weights_l1"], theta0["l1.weight"])
        np.testing.assert_array_equal(forge(hub, name, cfg0, tiny_encoder)[0], encode(tiny_encoder, prompt))
        # softmax gate
        _, rep = forge(hub, name, ForgeConfig(k=k, alpha=0.5, temperature=temp), tiny_encoder)
        assert len(rep.weights) == min(k, n)
        assert abs(math.fsum(rep.weights) - 1.0) <= 1e-12

    with criterion(3, "forging identities over 100 random hubs"):
        check()


# --- 4. diffusion replay fidelity ---------------------------------------------------------------------

def _sphere_gaussian(mean, n, rng, sigma=0.15):
    g = rng.normal((n, len(mean)))
    tangent = g - np.outer(g @ mean, mean)
    return l2_normalize_rows(mean + sigma * tangent)


def test_criterion_4_diffusion_fidelity(criterion):
    with criterion(4, "replay class means within L2 0.15; forward marginals within 3 SE", budget=180):
        means = l2_normalize_rows(SeededRng(0, "fidelity", "means").normal((2, 8)))
        x = np.concatenate([_sphere_gaussian(means[c], 500, SeededRng(0, "fidelity", "train", c)) for c in range(2)])
        y = np.repeat([0, 1], 500)
        # true means of the (normalized) class distributions by large Monte-Carlo
        truth = [_sphere_gaussian(means[c], 200_000, SeededRng(0, "fidelity", "oracle", c)).mean(axis=0)
                 for c in range(2)]
        sched = NoiseSchedule.linear(50)
        gen = train_generator(x, y, sched, seed=0, iters=2000, batch_size=128, hidden=128, depth=4)
        for c in range(2):
            err = float(np.linalg.norm(sample(gen, c, 1000, seed=1).mean(axis=0) - truth[c]))
            print(f"class {c}: L2 distance of sampled mean to true mean = {err:.4f}")
            assert err < 0.15

        n = 40_000
        x0 = np.linspace(-1.0, 1.0, 8)
        for t in (1, 10, 25, 50):
            eps = np.random.default_rng(t).normal(size=(n, 8))
            xt = sched.q_sample(np.broadcast_to(x0, (n, 8)), np.full(n, t), eps)
            ab = sched.alpha_bar[t - 1]
            assert np.all(np.abs(xt.mean(axis=0) - np.sqrt(ab) * x0) < 3 * np.sqrt((1 - ab) / n))
            assert np.all(np.abs(xt.var(axis=0, ddof=1) - (1 - ab)) < 3 * (1 - ab) * np.sqrt(2.0 / (n - 1)))


# --- 5. metric oracles ------------------------------------------------------------------------------

def _naive(a, inclusive=False):
    n = len(a)
    faa_ = sum(a[n - 1]) / n
    ci = sum(sum(a[t][i] for i in range(t + 1, n)) / (n - t - 1) for t in range(n - 1)) / (n - 1)
    trs = [sum(a[t][i] for t in range(i + 1 if inclusive else i)) / i for i in range(1, n)]
    avg = sum(map(sum, a)) / (n * n)
    return faa_, ci, sum(trs) / len(trs), avg, sum(a[n - 1]) / n


HAND_CASES = [
    # rows: after task t; columns: task i
    ([[0.9, 0.5, 0.3], [0.8, 0.85, 0.6], [0.7, 0.75, 0.95]],
     dict(faa=0.8, ci=0.5, transfer=0.475, avg=6.35 / 9, last=0.8, inclusive=1.1375)),
    (np.eye(3).tolist(), dict(faa=1 / 3, ci=0.0, transfer=0.0, avg=1 / 3, last=1 / 3, inclusive=0.75)),
    ([[0.5] * 3] * 3, dict(faa=0.5, ci=0.5, transfer=0.5, avg=0.5, last=0.5, inclusive=0.875)),
]


def test_criterion_5_metric_oracles(criterion):
    with criterion(5, "metrics equal naive loops on 20 random matrices and 3 hand cases (1e-12)"):
        rng = np.random.default_rng(5)
        for _ in range(20):
            a = rng.uniform(size=(int(rng.integers(2, 8)),) * 2)
            rows = a.tolist()
            for inclusive in (False, True):
                want = _naive(rows, inclusive)
                got = (faa(a), ci_transfer(a), *mtil_metrics(a, inclusive))
                assert max(abs(g - w) for g, w in zip(got, want)) <= 1e-12
        for rows, want in HAND_CASES:
            a = np.array(rows)
            transfer, avg, last = mtil_metrics(a)
            assert abs(faa(a) - want["faa"]) <= 1e-12
            assert abs(ci_transfer(a) - want["ci"]) <= 1e-12
            assert abs(transfer - want["transfer"]) <= 1e-12
            assert abs(avg - want["avg"]) <= 1e-12
            assert abs(last - want["last"]) <= 1e-12
            assert abs(mtil_metrics(a, inclusive=True)[0] - want["inclusive"]) <= 1e-12


# --- 6. end-to-end direction -------------------------------------------------------------------------

def test_criterion_6_end_to_end_direction(criterion):
    with criterion(6, "default world, 3 seeds: FAA and CI-Transfer at least zero-shot in 3/3", budget=600):
        for seed in (0, 1, 2):
            cfg = RunConfig().with_overrides({"seed": seed})
            exp = build_experiment(cfg)
            ours = run_pipeline(cfg, exp).report
            zs = run_pipeline(cfg.with_overrides({"eval.method": "zero_shot"}), exp).report
            print(f"seed {seed}: FAA {ours.faa:.4f} vs {zs.faa:.4f}, "
                  f"CI-Transfer {ours.ci_transfer:.4f} vs {zs.ci_transfer:.4f}")
            assert ours.faa >= zs.faa, seed
            assert ours.ci_transfer >= zs.ci_transfer, seed


# --- 7. ablation harness -------------------------------------------------------------------------------

ABLATION_RUN = {"replay.iters": 200, "experts.iterations": 30}


def test_criterion_7_ablation_harness(criterion):
    with criterion(7, "ablation tables for loss, template aug and alpha; alpha=0 row equals zero-shot"):
        cfg = RunConfig().with_overrides(ABLATION_RUN)
        exp = build_experiment(cfg)
        loss = ablate(cfg, "loss", ["sigmoid", "cross_entropy"], exp, include_zero_shot=False)
        aug = ablate(cfg, "template_aug", [True, False], exp, include_zero_shot=False)
        alpha = ablate(cfg, "alpha", [0.0, 0.1, 0.5], exp)
        for table in (loss, aug, alpha):
            md = table.to_markdown()
            print(md)
            assert len(md.splitlines()) == 2 + len(table.rows)
        assert [r.label for r in loss.rows] == ["loss=sigmoid", "loss=cross_entropy"]
        assert [r.label for r in aug.rows] == ["template_aug=True", "template_aug=False"]
        assert [r.label for r in alpha.rows] == ["alpha=0.0", "alpha=0.1", "alpha=0.5", "zero-shot"]
        a0 = np.array(alpha.rows[0].report.accuracy)
        zs = np.array(alpha.rows[-1].report.accuracy)
        assert float(np.max(np.abs(a0 - zs))) <= 1e-12
        assert abs(alpha.rows[0].report.faa - alpha.rows[-1].report.faa) <= 1e-12
        assert abs(alpha.rows[0].report.ci_transfer - alpha.rows[-1].report.ci_transfer) <= 1e-12


# --- 8. persistence ----------------------------------------------------------------------------------------

CORRUPTIONS = [
    lambda d: b"XXXX" + d[4:],
    lambda d: d[:4] + b"\x09\x00\x00\x00" + d[8:],
    lambda d: d[:8] + b"\x02" + d[9:],
    lambda d: d[:65] + b"\x07" + d[66:],
    lambda d: d[:-3],
    lambda d: d + b"\x00",
]


def test_criterion_8_persistence(criterion, tiny_encoder, tmp_path):
    other = ReferenceEncoder(EncoderSpec(seed=TINY_SPEC.seed + 1, vocab_size=64, d_tok=8, hidden=12, dim=6))

    @settings(max_examples=100, database=None)
    @given(st.integers(0, 2**20), st.integers(1, 9), st.sampled_from(["lora", "vera"]), st.integers(1, 3))
    def check(seed, n, variant, rank):
        hub = random_hub(tiny_encoder, seed, n, rank=rank, variant=variant, float32=True)
        data = dumps(hub)
        back = loads(data, tiny_encoder)
        assert (back.variant, back.rank, back.seed, back.class_ids) == (hub.variant, hub.rank, hub.seed, hub.class_ids)
        for c, e in hub.entries.items():
            b = back.entry(c)
            assert (b.name, b.task_id) == (e.name, e.task_id)
            for k in e.adapter.params:
                np.testing.assert_array_equal(b.adapter.params[k], e.adapter.params[k])
            np.testing.assert_array_equal(b.zero_shot, e.zero_shot.astype(np.float32))
        assert dumps(back) == data
        for mutate in CORRUPTIONS:
            with pytest.raises(FormatError):
                loads(mutate(data))
        with pytest.raises(FormatError, match="fingerprint"):
            loads(data, other)

    with criterion(8, "100 random hubs round-trip exactly; corrupt and foreign files rejected"):
        check()
        with pytest.raises(OSError):
            load(tmp_path / "missing.modr")


# --- 9. reproducibility --------------------------------------------------------------------------------------

REPRO_RUN = {"replay.iters": 300, "experts.iterations": 60}


def test_criterion_9_reproducible_runs(criterion, tmp_path):
    with criterion(9, "two identical runs write identical metrics JSON (timestamp excluded)"):
        cfg_path = tmp_path / "repro.toml"
        cfg_path.write_text(RunConfig().with_overrides(REPRO_RUN).to_toml())
        outs = [tmp_path / "a", tmp_path / "b"]
        for out in outs:
            assert cli.main(["run", "-c", str(cfg_path), "-o", str(out)]) == cli.EXIT_OK
        docs = [json.loads((o / "metrics.json").read_text()) for o in outs]
        for d in docs:
            d.pop("timestamp")
        assert docs[0] == docs[1]
        assert (outs[0] / "accuracy.csv").read_bytes() == (outs[1] / "accuracy.csv").read_bytes()
        assert (outs[0] / "hub.modr").read_bytes() == (outs[1] / "hub.modr").read_bytes()
