"""Exit criteria. Each test carries ``acceptance(number, title)``; the terminal
summary prints one PASS/FAIL line per criterion."""
import inspect
import json
import os
import shutil
import subprocess
import sys
import time
from fractions import Fraction

import numpy as np
import pytest

from mahafsl import gradcheck, metric
from mahafsl.adapter import adapt, init_adapter
from mahafsl.backbone import BackboneConfig, PrecomputedBackbone
from mahafsl.episodes import ClassEntry, DatasetManifest, SampleRecord, generate_synthetic
from mahafsl.evaluation import compare_heads, evaluate
from mahafsl.model import FewShotModel
from mahafsl.trainer import TrainConfig, init_params, train
from oracles import brute_force_stats

acceptance = pytest.mark.acceptance


def report(number, message):
    print(f"[criterion {number}] {message}")


@acceptance(1, "gradient suite within 1e-4 in under 60 s")
def test_c01_gradient_suite():
    t0 = time.perf_counter()
    results = gradcheck.run_suite(trials=20, composite_trials=5, seed=0)
    elapsed = time.perf_counter() - t0
    names = {r.name for r in results}
    assert set(gradcheck.PRIMITIVES) <= names and "episode_loss" in names
    worst = max(r.max_rel_error for r in results)
    report(1, f"{len(results)} checks, worst rel err {worst:.2e}, {elapsed:.1f}s")
    assert all(r.passed for r in results)
    assert worst <= 1e-4
    assert elapsed < 60


@acceptance(2, "metric statistics match brute-force oracle to 1e-10")
def test_c02_metric_oracle():
    rng = np.random.default_rng(2)
    for _ in range(50):
        N, M, d = int(rng.integers(1, 5)), int(rng.integers(1, 7)), int(rng.integers(1, 9))
        beta = float(rng.uniform(0.1, 3.0))
        labels = np.repeat(np.arange(N), M)
        X = rng.standard_normal((N * M, d)) * rng.uniform(0.5, 3.0) + np.repeat(rng.standard_normal((N, d)), M, axis=0)
        stats = metric.estimate_statistics(X, labels, beta=beta)
        mu, sig_n, pooled, qs = brute_force_stats(X, labels, beta)
        np.testing.assert_allclose(stats.mu.value, mu, rtol=0, atol=1e-10)
        np.testing.assert_allclose(stats.sigma_task.value, pooled, rtol=0, atol=1e-10)
        for n in range(N):
            np.testing.assert_allclose(stats.sigma_class[n].value, sig_n[n], rtol=0, atol=1e-10)
            np.testing.assert_allclose(stats.q_reg[n].value, qs[n], rtol=0, atol=1e-10)
        x, m = rng.standard_normal(d), rng.standard_normal(d)
        half_sq = 0.5 * float(np.sum((x - m) ** 2))
        assert abs(float(metric.mahalanobis_sq(x, m, np.eye(d)).value) - half_sq) <= 1e-10


@acceptance(3, "blend weights are exactly m/(m+1)")
def test_c03_blend_weights():
    for m, want in [(1, Fraction(1, 2)), (2, Fraction(2, 3)), (5, Fraction(5, 6)), (10, Fraction(10, 11))]:
        assert metric.blend_weight(m) == float(want)
        X = np.random.default_rng(m).standard_normal((2 * m, 3))
        assert list(metric.estimate_statistics(X, np.repeat([0, 1], m)).lambda_blend) == [float(want)] * 2


@acceptance(4, "adapter identity, equivariance and invariance")
def test_c04_adapter_properties():
    rng = np.random.default_rng(4)
    p = init_adapter(6, rng)
    p["adapter.wv"] = np.zeros((6, 6))
    s = rng.integers(-64, 64, (9, 6)) / 8.0
    q = rng.integers(-64, 64, (5, 6)) / 8.0
    out = adapt(s, q, p)
    assert np.array_equal(out.support.value, s) and np.array_equal(out.queries.value, q)

    worst = 0.0
    for _ in range(100):
        d, S, Q = int(rng.integers(1, 10)), int(rng.integers(1, 12)), int(rng.integers(1, 10))
        p = init_adapter(d, rng)
        s, q = rng.standard_normal((S, d)) * 2, rng.standard_normal((Q, d)) * 2
        perm = rng.permutation(S)
        a, b = adapt(s, q, p), adapt(s[perm], q, p)
        worst = max(
            worst,
            np.abs(b.support.value - a.support.value[perm]).max(),
            np.abs(b.queries.value - a.queries.value).max(),
        )
    report(4, f"max permutation deviation {worst:.1e}")
    assert worst <= 1e-10


@acceptance(5, "one-shot head reduces to beta*I and matches Euclidean on >= 99% of queries")
def test_c05_one_shot_degenerate():
    rng = np.random.default_rng(5)
    agree = total = 0
    while total < 10_000:
        N, d = int(rng.integers(2, 8)), int(rng.integers(1, 17))
        beta = float(rng.uniform(1e-3, 10.0))
        support = rng.standard_normal((N, d)) * rng.uniform(0.1, 10.0)
        stats = metric.estimate_statistics(support, np.arange(N), beta=beta)
        for qn in stats.q_reg:
            assert np.array_equal(qn.value, beta * np.eye(d))
        queries = rng.standard_normal((100, d)) * rng.uniform(0.1, 10.0)
        maha = metric.distances(queries, stats, "mahalanobis").value.argmin(axis=1)
        eucl = metric.distances(queries, stats, "euclidean").value.argmin(axis=1)
        agree += int(np.sum(maha == eucl))
        total += len(queries)
    report(5, f"agreement {agree}/{total}")
    assert agree / total >= 0.99


@acceptance(6, "trained model reaches >= 0.95 on separable 10-class data")
def test_c06_end_to_end(separable):
    manifest, backbone = separable
    t0 = time.perf_counter()
    cfg = TrainConfig(epochs=20, episodes_per_epoch=100, n_way=5, m_shot=5, query_per_class=15, seed=0)
    ckpt, history = train(manifest, cfg, backbone)
    rep = evaluate(FewShotModel(backbone, ckpt.params), manifest, 5, 5, 15, n_episodes=600, seed=0)
    elapsed = time.perf_counter() - t0
    report(6, f"loss {history[0].mean_loss:.4f} -> {history[-1].mean_loss:.4f}, accuracy {rep.mean:.4f} +- {rep.ci95:.4f}, {elapsed:.0f}s")
    assert len(history) == 20
    assert rep.mean >= 0.95
    assert elapsed < 600


@acceptance(7, "Mahalanobis beats Euclidean on anisotropic data beyond CI overlap")
def test_c07_anisotropic_margin():
    manifest, store = generate_synthetic(
        10, 16, 3.0, "anisotropic", 100.0, samples_per_class=100, seed=7, train_classes=5
    )
    backbone = PrecomputedBackbone(BackboneConfig(embed_dim=16), store)
    model = FewShotModel(backbone, {})
    (row,) = compare_heads(model, manifest, [(5, 10, 15)], seed=0, n_episodes=600)
    e, m = row.euclidean, row.mahalanobis
    report(7, f"euclidean {e.mean:.4f} +- {e.ci95:.4f}, mahalanobis {m.mean:.4f} +- {m.ci95:.4f}")
    assert e.stream_digest == m.stream_digest
    assert m.mean - e.mean > e.ci95 + m.ci95


@acceptance(8, "indistinguishable classes give chance accuracy")
def test_c08_chance_level():
    manifest, store = generate_synthetic(10, 16, 0.0, samples_per_class=100, seed=8)
    backbone = PrecomputedBackbone(BackboneConfig(embed_dim=16), store)
    model = FewShotModel(backbone, init_params(backbone, TrainConfig()))
    rep = evaluate(model, manifest, 5, 5, 15, n_episodes=600, seed=0)
    report(8, f"accuracy {rep.mean:.4f}")
    assert 0.17 <= rep.mean <= 0.23


@acceptance(9, "600 episodes, per-episode then mean averaging, 95% CI")
def test_c09_protocol():
    # unequal class sizes with Qc="all" make per-episode and pooled averages differ
    sizes = [6, 30, 8, 40, 10, 25]
    classes = [ClassEntry(f"k{i}", [SampleRecord(f"k{i}/{j}") for j in range(n)]) for i, n in enumerate(sizes)]
    manifest = DatasetManifest(classes, {"meta_test": [c.name for c in classes]}).validate()

    pooled_hits = pooled_total = 0

    def predictor(ep):
        nonlocal pooled_hits, pooled_total
        # right on small episodes, wrong on large ones
        pred = ep.query_labels if len(ep.query) < 40 else (ep.query_labels + 1) % ep.n_way
        pooled_hits += int(np.sum(pred == ep.query_labels))
        pooled_total += len(pred)
        return pred

    rep = evaluate(predictor, manifest, 3, 1, "all", seed=0, threads=1)
    assert rep.n_episodes == 600 and len(rep.accuracies) == 600
    assert rep.mean == pytest.approx(float(np.mean(rep.accuracies)), abs=1e-15)
    assert abs(rep.mean - pooled_hits / pooled_total) > 0.05
    a = np.asarray(rep.accuracies)
    assert rep.ci95 == pytest.approx(1.96 * a.std(ddof=1) / np.sqrt(600), rel=1e-12)
    assert inspect.signature(evaluate).parameters["n_episodes"].default == 600
    report(9, f"episode mean {rep.mean:.4f} vs pooled {pooled_hits / pooled_total:.4f}, ci95 {rep.ci95:.4f}")


def _cli(*args, cwd):
    env = dict(os.environ)
    return subprocess.run([sys.executable, "-m", "mahafsl", *args], cwd=cwd, env=env, capture_output=True, text=True)


@acceptance(10, "two train+eval runs give byte-identical loss CSV and report JSON")
def test_c10_determinism(tmp_path):
    config = {
        "synth": {"classes": 10, "dim": 16, "mean_scale": 5.0, "seed": 1},
        "data": {"manifest": "run/manifest.json", "splits": "run/splits.json"},
        "backbone": {"kind": "precomputed", "embed_dim": 16},
        "train": {"epochs": 3, "episodes_per_epoch": 30},
        "eval": {"n_way": 5, "m_shot": 5, "n_episodes": 600},
        "output": {"dir": "run"},
    }
    (tmp_path / "config.json").write_text(json.dumps(config))
    outputs = []
    for _ in range(2):
        shutil.rmtree(tmp_path / "run", ignore_errors=True)
        for cmd in (["synth"], ["train"], ["eval", "--checkpoint", "run/checkpoint.fslc"]):
            proc = _cli(*cmd, "-c", "config.json", cwd=tmp_path)
            assert proc.returncode == 0, proc.stderr
        outputs.append(((tmp_path / "run" / "loss.csv").read_bytes(), (tmp_path / "run" / "eval_report.json").read_bytes()))
    assert outputs[0][0] == outputs[1][0]
    assert outputs[0][1] == outputs[1][1]
    report(10, f"loss.csv {len(outputs[0][0])} bytes, eval_report.json {len(outputs[0][1])} bytes, identical")
