"""Acceptance gates 1-11.  Each test prints one PASS/FAIL line and the
terminal summary repeats them all (``pytest tests/test_acceptance.py``)."""

import math
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE, random_graph, two_cliques
from gradchecks import ALL_PATHS
from helpers import HAND_EVENTS, HAND_WEIGHTS, dense_propagate, info_nce_reference, mask_to_sets, topk_oracle

from mobalign import align, distill, graphbuild, hexgrid, line, mobenc, probe
from mobalign.cli import main as cli_main
from mobalign.embedding import EmbeddingTable
from mobalign.graphbuild import EventRecord
from mobalign.pipeline import PipelineConfig, run_pipeline

GRID_TASKS = ("mobility_task", "modality_task", "mixed_task")


def record(crit: int, ok: bool, detail: str) -> None:
    ACCEPTANCE.append((crit, bool(ok), detail))
    print(f"C{crit} {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {crit}: {detail}"


def within_3sigma(counts, p, n):
    return bool(np.all(np.abs(counts - n * p) <= 3 * np.sqrt(n * p * (1 - p)) + 1e-9))


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    """Default synthetic region through the deterministic desk pipeline."""
    t0 = time.perf_counter()
    res = run_pipeline(PipelineConfig(), tmp_path_factory.mktemp("e2e"), deterministic=True)
    return res, time.perf_counter() - t0


def r2_by_task(reports):
    return {r.task: r.r2_mean for r in reports}


def test_c1_lightgcn_dense_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 13))
        g = random_graph(rng, n, p=float(rng.uniform(0, 1)))
        X = rng.normal(size=(n, 6))
        for mode in ("symmetric", "row"):
            for L in range(4):
                got = mobenc.propagate(X, mobenc.make_plan(g, L, mode))
                worst = max(worst, float(np.max(np.abs(got - dense_propagate(g, X, L, mode)))))
    dt = time.perf_counter() - t0
    record(1, worst <= 1e-10 and dt < 10, f"max |err| {worst:.2e} (<=1e-10), {dt:.1f}s (<10s)")


def test_c2_gradient_checks():
    t0 = time.perf_counter()
    worst = {name: check(instances=50) for name, check in ALL_PATHS.items()}
    dt = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-4 and dt < 60
    detail = ", ".join(f"{k}: {v:.1e}" for k, v in worst.items())
    record(2, ok, f"worst rel err per path ({detail}) (<=1e-4), {dt:.1f}s (<60s)")


def test_c3_infonce_closed_forms():
    rng = np.random.default_rng(0)
    singles = [align.info_nce_pair(*(rng.normal(size=(2, 1, 4)) / 2), tau=float(rng.uniform(0.05, 1)))
               for _ in range(10)]
    e = np.eye(2)
    got = align.info_nce_pair(e, e, 1.0)
    expected = 0.5 * math.log(1 + math.exp(-1))
    ref = info_nce_reference(e, e, 1.0)
    ok = all(s == 0.0 for s in singles) and abs(got - expected) <= 1e-10 and abs(ref - expected) <= 1e-10
    record(3, ok, f"n=1 losses {set(singles)} (==0); n=2 {got:.12f} vs {expected:.12f} (<=1e-10)")


def test_c4_hand_log_graph():
    ref = graphbuild.build_graph(EventRecord(*ev) for ev in HAND_EVENTS)
    exact = ref.weight_dict() == HAND_WEIGHTS
    rng = np.random.default_rng(0)
    shuffled = all(
        graphbuild.build_graph(EventRecord(*HAND_EVENTS[i]) for i in rng.permutation(len(HAND_EVENTS))) == ref
        for _ in range(20))
    record(4, exact and shuffled, f"{len(HAND_EVENTS)} events -> {ref.n_edges} edges exact={exact}, "
                                  f"20 shuffles identical={shuffled}")


def test_c5_topk_sampling():
    rng = np.random.default_rng(5)
    exact = identity = nested = True
    for _ in range(100):
        g = random_graph(rng, int(rng.integers(2, 25)), p=float(rng.uniform(0.1, 0.9)), max_weight=4)
        ratios = sorted(float(r) for r in rng.uniform(0.01, 1.0, 3))
        sets = []
        for ratio in ratios:
            kept = mask_to_sets(g, graphbuild.keep_mask(g, ratio))
            exact &= kept == topk_oracle(g, ratio)
            sets.append(kept)
        nested &= all(a[c] <= b[c] for a, b in zip(sets, sets[1:]) for c in a)
        identity &= graphbuild.sample(g, 1.0) == g
    record(5, exact and identity and nested,
           f"100 graphs: oracle match={exact}, ratio 1.0 identity={identity}, nesting={nested}")


def chi2_sigma(counts, p, n):
    """Goodness-of-fit statistic in standard deviations of its null law."""
    k = len(p) - 1
    chi2 = float(np.sum((counts - n * p) ** 2 / (n * p)))
    return (chi2 - k) / math.sqrt(2 * k)


def test_c6_samplers():
    # Gate: each vector's joint deviation is within 3 sigma (standardized
    # chi-square).  Per-bin 3-sigma misses are only reported: over ~400 bins a
    # correct sampler is expected to produce about one.
    rng = np.random.default_rng(6)
    n = 100_000
    zs, misses, bins = [], 0, 0
    for _ in range(20):
        w = rng.uniform(0.01, 10, int(rng.integers(2, 40)))
        p = w / w.sum()
        counts = np.bincount(line.build_alias(w).sample(rng, n), minlength=len(w))
        zs.append(chi2_sigma(counts, p, n))
        misses += int(np.sum(np.abs(counts - n * p) > 3 * np.sqrt(n * p * (1 - p))))
        bins += len(w)
    g = random_graph(np.random.default_rng(7), 30, p=0.3, max_weight=9)
    table, nodes = line.noise_table(g)
    target = g.weighted_degrees()[nodes] ** 0.75
    target /= target.sum()
    noise_counts = np.bincount(table.sample(rng, n), minlength=len(nodes))
    z_noise = chi2_sigma(noise_counts, target, n)
    noise_bins = within_3sigma(noise_counts, target, n)
    ok = max(abs(z) for z in zs) <= 3 and abs(z_noise) <= 3
    record(6, ok, f"alias: max |chi2 sigma| {max(abs(z) for z in zs):.2f} over 20 vectors (<=3), per-bin 3 sigma "
                  f"misses {misses}/{bins} (expected {0.0027 * bins:.1f}); negatives ~ degree^0.75: chi2 sigma "
                  f"{z_noise:.2f} (<=3), all bins within 3 sigma={noise_bins}")


def test_c7_line_two_cliques():
    t0 = time.perf_counter()
    g = two_cliques()
    same = np.equal.outer(np.arange(20) < 10, np.arange(20) < 10)
    off = ~np.eye(20, dtype=bool)
    gaps = []
    for seed in range(5):
        t = line.train_line(g, line.LineConfig(total_samples=1_000_000, seed=seed))
        v = t.vectors / np.linalg.norm(t.vectors, axis=1, keepdims=True)
        S = v @ v.T
        gaps.append(float(S[same & off].mean() - S[~same].mean()))
    dt = time.perf_counter() - t0
    record(7, min(gaps) >= 0.2 and dt < 60,
           f"intra-inter cosine gap min {min(gaps):.3f} over 5 seeds (>=0.2), {dt:.1f}s (<60s)")


def test_c8_end_to_end(e2e):
    res, dt = e2e
    aligned = r2_by_task(res.reports)
    rng = np.random.default_rng(8)
    emb = res.align_result.embeddings
    rand = EmbeddingTable(emb.ids, rng.standard_normal(emb.vectors.shape))
    tasks = [t for t in res.data.tasks if t.name in GRID_TASKS]
    random_r2 = r2_by_task(probe.run_benchmark(rand, tasks, trials=10))
    ok = all(aligned[t] >= 0.6 and random_r2[t] <= 0.1 for t in GRID_TASKS) and dt < 300
    detail = ", ".join(f"{t} {aligned[t]:.3f}/{random_r2[t]:.3f}" for t in GRID_TASKS)
    record(8, ok, f"aligned/random R2 ({detail}) (>=0.6 / <=0.1), pipeline {dt:.1f}s (<300s)")


def test_c9_alignment_ablation(e2e):
    res, _ = e2e
    task = next(t for t in res.data.tasks if t.name == "modality_task")
    aligned = r2_by_task(res.reports)["modality_task"]
    mobility_only = probe.run_benchmark(res.line_table, [task], trials=10)[0].r2_mean
    record(9, aligned - mobility_only > 0,
           f"modality task R2 aligned {aligned:.3f} vs mobility-only {mobility_only:.3f}, "
           f"margin {aligned - mobility_only:.3f} (>0)")


def test_c10_distillation(e2e):
    res, _ = e2e
    teacher = res.align_result.embeddings
    cfg = PipelineConfig()
    t0 = time.perf_counter()
    sur = distill.distill_from_table(teacher, cfg.grid, cfg.distill)
    dt = time.perf_counter() - t0
    lat, lon = hexgrid.centroids_of(teacher.ids, cfg.grid)
    student = EmbeddingTable(teacher.ids, sur.predict(lat, lon))
    t_r2 = r2_by_task(probe.run_benchmark(teacher, res.data.tasks, trials=10))
    s_r2 = r2_by_task(probe.run_benchmark(student, res.data.tasks, trials=10))
    ratios = {t: s_r2[t] / t_r2[t] for t in t_r2}
    quality = sur.final_loss < 0.15 and all(s_r2[t] >= 0.7 * t_r2[t] for t in t_r2)
    detail = ", ".join(f"{t} {ratios[t]:.2f}" for t in ratios)
    record(10, quality and dt < 180, f"final MSE {sur.final_loss:.5f} (<0.15); distilled/teacher R2 ({detail}) "
                                     f"(>=0.7); training {dt:.0f}s (<180s)")


def test_c11_determinism(tmp_path):
    digests = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert cli_main(["pipeline", "--deterministic", "--seed", "0", "--out", str(out)]) == 0
        digests.append(((out / "embeddings.emb").read_bytes(), (out / "report.tsv").read_bytes()))
    same_emb = digests[0][0] == digests[1][0]
    same_report = digests[0][1] == digests[1][1]
    record(11, same_emb and same_report,
           f"two --deterministic CLI runs: embeddings identical={same_emb}, reports identical={same_report}")
