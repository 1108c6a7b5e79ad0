"""Acceptance suite. Each test carries a ``criterion`` marker; the conftest prints one line per criterion.

The benchmark fixture runs the full synthetic LOSO grid (8 subjects, 5 seeds,
shots 0/1/3/5/10) once, which takes about ten minutes on one core.
"""

import itertools
import math
import time

import numpy as np
import pytest

from ssml.adapt import (AdaptConfig, PseudoLabels, SupportSet, balance_subsample, build_support_set, ssml_finetune,
                        supervised_finetune)
from ssml.backbones import ModelSpec, build, forward
from ssml.cli import main
from ssml.data import few_shot_sample, loso_split, synth_generate
from ssml.gradcheck import grad_check
from ssml.harness import benchmark_config, mean_table, per_seed_improvements, run_loso
from ssml.meta import MetaConfig, pretrain
from ssml.objectives import ClassCenters, update_centers
from ssml.stats import wilcoxon_signed_rank

SHOTS = (0, 1, 3, 5, 10)


# ---- 1. gradients ----------------------------------------------------------------

@pytest.mark.criterion(1)
def test_gradients_all_backbones(record_property):
    start = time.perf_counter()
    worst = {}
    for kind in ("MLP", "STNN", "CNN"):
        params = build(ModelSpec(kind=kind), seed=0)
        for seed in range(20):
            x = np.random.default_rng(seed).normal(size=(2, 32, 128))
            report = grad_check(params, x, [0, 1], seed=seed)
            assert report.passed, (kind, seed, report.failed_blocks())
            worst[kind] = max(worst.get(kind, 0.0), report.max_deviation)
    elapsed = time.perf_counter() - start
    record_property("detail", f"60 checks, worst deviation {max(worst.values()):.1e}, {elapsed:.0f}s")
    assert elapsed < 60


# ---- 2. oracles ------------------------------------------------------------------

def _literal_center_update(c, feats, labels, lr):
    out = c.copy()
    for j in range(len(c)):
        members = [h for h, y in zip(feats, labels) if y == j]
        total = sum((c[j] - h for h in members), np.zeros_like(c[j]))
        out[j] = c[j] - lr * total / (1 + len(members))
    return out


@pytest.mark.criterion(2)
def test_center_update_oracle(record_property):
    for seed in range(60):
        rng = np.random.default_rng(seed)
        K, n, m = int(rng.integers(2, 5)), int(rng.integers(1, 10)), int(rng.integers(1, 30))
        # dyadic values keep both summation orders exact, so equality is bitwise
        c0 = rng.integers(-64, 64, (K, n)) / 8.0
        feats = rng.integers(-64, 64, (m, n)) / 8.0
        labels = rng.integers(0, K, m)
        got = update_centers(ClassCenters(c0, lr_center=0.5), feats, labels).centers
        np.testing.assert_array_equal(got, _literal_center_update(c0, feats, labels, 0.5))
    record_property("detail", "center update 60/60 bitwise")


@pytest.mark.criterion(2)
def test_support_filter_oracle(record_property):
    for seed in range(60):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(0, 50))
        pl = PseudoLabels(np.arange(n), rng.integers(0, 2, n), np.round(rng.uniform(0.5, 1, n), 2),
                          np.round(rng.uniform(0, 2, n), 1))
        eps, sigma = float(rng.choice([0.7, 0.9, 0.95])), float(rng.choice([0.5, 1.0]))
        expected = [s for s in pl if s.confidence > eps and s.distance < sigma]
        assert list(build_support_set(pl, eps, sigma)) == expected
    record_property("detail", "support filter 60/60")


@pytest.mark.criterion(2)
def test_balance_oracle(record_property):
    for seed in range(60):
        rng = np.random.default_rng(seed)
        counts = rng.integers(0, 90, 2)
        if counts.sum() == 0:
            counts[0] = 1
        labels = np.repeat([0, 1], counts)[rng.permutation(counts.sum())]
        support = SupportSet(np.arange(len(labels)), labels, np.ones(len(labels)), np.zeros(len(labels)))
        with np.testing.suppress_warnings() as sup:
            sup.filter(UserWarning)
            drawn = np.concatenate(balance_subsample(support, seed))
        per_class = counts[counts > 0].min()
        expected = {c: per_class for c in (0, 1) if counts[c] > 0}
        got = dict(zip(*np.unique(labels[drawn], return_counts=True)))
        assert {int(k): int(v) for k, v in got.items()} == expected
        assert len(np.unique(drawn)) == len(drawn)
    record_property("detail", "balanced subsample 60/60")


def _enumerated_p(d):
    d = d[d != 0]
    mags = np.sort(np.abs(d))
    ranks = {v: np.mean(np.flatnonzero(mags == v) + 1) for v in set(mags.tolist())}
    r = [ranks[abs(v)] for v in d]
    w_plus = sum(ri for ri, v in zip(r, d) if v > 0)
    w = min(w_plus, sum(r) - w_plus)
    hits = sum(sum(ri for ri, s in zip(r, signs) if s) <= w for signs in itertools.product((0, 1), repeat=len(r)))
    return min(1.0, 2 * hits / 2 ** len(r))


@pytest.mark.criterion(2)
@pytest.mark.criterion(7)
def test_wilcoxon_enumeration(record_property):
    checked = 0
    for n in range(5, 13):
        for seed in range(8):
            rng = np.random.default_rng(1000 * n + seed)
            d = rng.integers(1, 7, n) * rng.choice([-1, 1], n) / 20
            p = wilcoxon_signed_rank(d, np.zeros(n)).p_value
            assert p == _enumerated_p(d), (n, seed)
            checked += 1
    record_property("detail", f"wilcoxon exact p equals enumeration on {checked} inputs, n=5..12")


# ---- 3. shapes -------------------------------------------------------------------

@pytest.mark.criterion(3)
def test_layer_shapes(record_property):
    res = forward(build(ModelSpec(kind="CNN"), 0), np.zeros((1, 32, 128)))
    shapes = dict(res.shapes)
    assert shapes["conv1"] == (16, 32, 113)
    assert shapes["conv5"] == (256, 1, 10)
    assert shapes["flatten"] == (2560,)
    assert dict(forward(build(ModelSpec(kind="STNN"), 0), np.zeros((1, 32, 128))).shapes)["flatten"] == (1024,)
    assert dict(forward(build(ModelSpec(kind="MLP"), 0), np.zeros((1, 32, 128))).shapes)["hidden"] == (300,)
    record_property("detail", "conv1 16x32x113, conv5 256x1x10, features 2560/1024/300")


# ---- 4 and 5. synthetic benchmark ------------------------------------------------

@pytest.fixture(scope="module")
def benchmark():
    start = time.perf_counter()
    report = run_loso(benchmark_config(seeds=range(5), shots=SHOTS))
    return report, time.perf_counter() - start


@pytest.mark.criterion(4)
def test_method_ordering(benchmark, record_property):
    report, wall = benchmark
    means = mean_table(report.rows)
    w, m, s = means[("WOMETA", 0)], means[("MAML", 10)], means[("SSML", 10)]
    sec = report.seconds
    runtime = sec["pretrain"] + sec["WOMETA"] + sec["MAML@10"] + sec["SSML@10"]
    record_property("detail", f"10-shot W={w:.3f} M={m:.3f} S={s:.3f}, S-W={100 * (s - w):.1f} pts, "
                              f"10-shot run {runtime:.0f}s (full grid {wall:.0f}s)")
    assert 0.70 <= w <= 0.85
    assert s > m > w
    assert s - w >= 0.05
    assert runtime < 600


@pytest.mark.criterion(5)
def test_shot_trend(benchmark, record_property):
    report, _ = benchmark
    means = mean_table(report.rows)
    ssml = [means[("SSML", k)] for k in SHOTS]
    per_seed = per_seed_improvements(report.rows)
    good_seeds = sum(all(per_seed[("SSML", k, seed)] > per_seed[("MAML", k, seed)] for k in SHOTS)
                     for seed in range(5))
    record_property("detail", "SSML by shot " + " ".join(f"{v:.3f}" for v in ssml)
                    + f", SSML gain > MAML gain at every shot in {good_seeds}/5 seeds")
    assert all(b >= a - 0.01 for a, b in zip(ssml, ssml[1:]))
    assert good_seeds >= 4


# ---- 6. special case -------------------------------------------------------------

@pytest.mark.criterion(6)
def test_epsilon_one_is_supervised(record_property):
    cfg = benchmark_config().data
    sources, target = loso_split(synth_generate(cfg), 2)
    pre = pretrain(ModelSpec(kind="MLP"), sources, MetaConfig(max_epochs=1), seed=0)
    split = few_shot_sample(target, 5, 0.3, seed=0)
    adapt = AdaptConfig(epsilon=1.0)
    a = ssml_finetune(pre.params, pre.centers, split.labeled, split.unlabeled, adapt, seed=0)
    b = supervised_finetune(pre.params, pre.centers, split.labeled, adapt)
    assert a.params.checksum() == b.params.checksum()
    assert all(np.array_equal(a.params.tensors[k], b.params.tensors[k]) for k in a.params.tensors)
    record_property("detail", f"checksums equal ({a.params.checksum()[:12]})")


# ---- 7. statistics ---------------------------------------------------------------

@pytest.mark.criterion(7)
def test_five_positive_differences(record_property):
    res = wilcoxon_signed_rank([0.91, 0.82, 0.73, 0.64, 0.95], [0.9, 0.8, 0.7, 0.6, 0.9])
    assert res.statistic == 0 and res.p_value == 0.0625 and math.isclose(res.p_value, 2 / 32)
    record_property("detail", "five positive differences give p=0.0625")


# ---- 8. determinism --------------------------------------------------------------

CONFIG = """\
[data]
n_subjects = 4
channels = 8
time_len = 16
samples_per_subject = 80
[model]
kind = MLP
channels = 8
time_len = 16
[meta]
max_epochs = 2
[adapt]
outer_epochs = 2
[experiment]
shots = 1, 5
seeds = 0, 1
"""


@pytest.mark.criterion(8)
def test_cli_outputs_repeat_bytewise(tmp_path, record_property):
    cfg = tmp_path / "run.ini"
    cfg.write_text(CONFIG)
    runs = []
    for i, jobs in enumerate(("1", "1", "2", "2")):
        d = tmp_path / f"run{i}"
        d.mkdir()
        args = ["--config", str(cfg)]
        assert main(["synth", "--out", str(d / "d.mshd"), "--labels-csv", str(d / "labels.csv"), *args]) == 0
        assert main(["pretrain", "--target", "0", "--out", str(d / "m.txt"), "--history", str(d / "h.csv"),
                     *args]) == 0
        assert main(["adapt", "--checkpoint", str(d / "m.txt"), "--target", "0", "--shot", "1",
                     "--report", str(d / "a.csv"), *args]) == 0
        assert main(["loso", "--experiment-jobs", jobs, "--out", str(d / "rows.csv"),
                     "--summary", str(d / "summary.csv"), *args]) == 0
        runs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
    assert all(r == runs[0] for r in runs)
    record_property("detail", f"{len(runs[0])} output files identical across 4 runs (jobs 1 and 2)")
