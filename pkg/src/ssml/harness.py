"""Leave-one-subject-out experiments comparing W/O-Meta, MAML and SSML.

For every (target subject, seed) cell the sources are meta-pretrained once and
the three methods are scored against that checkpoint on the same few-shot
split. Cells are independent, so they can run in worker processes; the report
is assembled in sorted order, so it does not depend on scheduling.
"""

from __future__ import annotations

import csv
import logging
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapt import AdaptConfig, ssml_finetune, supervised_finetune
from .backbones import ModelParams, ModelSpec, predict
from .data import SubjectDataset, SynthConfig, few_shot_sample, load_datasets, loso_split, synth_generate
from .meta import MetaConfig, pretrain
from .stats import wilcoxon_signed_rank

log = logging.getLogger(__name__)

METHODS = ("WOMETA", "MAML", "SSML")
ROW_FIELDS = ("method", "shot", "target_subject", "seed", "accuracy")

# Synthetic benchmark whose W/O-Meta accuracy lands in the 0.70-0.85 band with
# the MLP backbone: subjects differ mainly by a channel rotation, so confident
# pseudo-labels stay balanced and informative.
BENCHMARK_SYNTH = SynthConfig(n_subjects=8, n_classes=2, channels=32, time_len=128, samples_per_subject=288,
                              shift_scale=1.3, noise_sd=6.0, seed=0, class_sep=1.0, scale=0.1, bias_weight=0.1,
                              common_weight=0.0)


class ExperimentError(RuntimeError):
    """A LOSO cell failed; the message names the cell."""


@dataclass
class ExperimentConfig:
    data: SynthConfig | str = field(default_factory=SynthConfig)
    model: ModelSpec = field(default_factory=lambda: ModelSpec(kind="MLP"))
    meta: MetaConfig = field(default_factory=MetaConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    methods: tuple[str, ...] = METHODS
    shots: tuple[int, ...] = (1, 3, 5, 10)
    seeds: tuple[int, ...] = (0,)
    targets: tuple[int, ...] | None = None  # None = every subject
    eval_fraction: float = 0.3

    def validate(self) -> None:
        if not self.methods:
            raise ValueError("at least one method is required")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
        if any(s < 0 for s in self.shots):
            raise ValueError(f"shots must be >= 0, got {list(self.shots)}")
        if not self.seeds:
            raise ValueError("at least one seed is required")

    def datasets(self) -> list[SubjectDataset]:
        if isinstance(self.data, SynthConfig):
            return synth_generate(self.data)
        return load_datasets(self.data)


def benchmark_config(seeds=(0, 1, 2, 3, 4), shots=(0, 1, 3, 5, 10)) -> ExperimentConfig:
    """The synthetic subject-shift benchmark used to compare the three methods."""
    return ExperimentConfig(data=BENCHMARK_SYNTH, model=ModelSpec(kind="MLP"), meta=MetaConfig(max_epochs=10),
                            adapt=AdaptConfig(reduction="sum"), shots=tuple(shots), seeds=tuple(seeds))


@dataclass(frozen=True, order=True)
class Row:
    method: str
    shot: int
    target_subject: str
    seed: int
    accuracy: float


@dataclass
class CellResult:
    target_index: int
    seed: int
    rows: list[Row]
    checksums: dict[str, str]
    seconds: dict[str, float]


@dataclass
class ExperimentReport:
    rows: list[Row] = field(default_factory=list)
    checksums: dict[tuple[int, int], dict[str, str]] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)

    def means(self) -> dict[tuple[str, int], float]:
        return mean_table(self.rows)

    def tests(self) -> list[dict]:
        return wilcoxon_table(self.rows)


def accuracy(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"predictions {predictions.shape} and labels {labels.shape} differ in shape")
    if predictions.size == 0:
        raise ValueError("accuracy of an empty prediction set is undefined")
    return float(np.mean(predictions == labels))


def _score(params: ModelParams, eval_set) -> float:
    probs, _ = predict(params, eval_set[0])
    return accuracy(probs.argmax(axis=1), eval_set[1])


def _row_order(method: str) -> int:
    return METHODS.index(method)


def run_cell(config: ExperimentConfig, datasets: list[SubjectDataset], target_index: int, seed: int) -> CellResult:
    """Pretrain on the sources of one target and score every requested method and shot."""
    sources, target = loso_split(datasets, target_index)
    timer = time.perf_counter
    seconds = defaultdict(float)
    t0 = timer()
    pre = pretrain(config.model, sources, config.meta, seed=seed)
    seconds["pretrain"] += timer() - t0
    base_sum = pre.params.checksum()
    checksums = {"pretrained": base_sum}
    rows = []
    for shot in sorted(set(config.shots) | ({0} if "WOMETA" in config.methods else set())):
        split = few_shot_sample(target, shot, config.eval_fraction, seed)
        checksums[f"split{shot}"] = split.checksum()
        adapt_cfg = AdaptConfig(**{**vars(config.adapt), "n_shot": shot})
        ev = split.eval
        if shot == 0 and "WOMETA" in config.methods:
            t0 = timer()
            rows.append(Row("WOMETA", 0, target.subject_id, seed, _score(pre.params, ev)))
            seconds["WOMETA"] += timer() - t0
        if shot not in config.shots:
            continue
        for method in ("MAML", "SSML"):
            if method not in config.methods:
                continue
            t0 = timer()
            if method == "MAML":
                # with no labeled sample there is nothing to fine-tune on
                acc = _score(pre.params, ev) if shot == 0 else _score(
                    supervised_finetune(pre.params, pre.centers, split.labeled, adapt_cfg).params, ev)
            else:
                res = ssml_finetune(pre.params, pre.centers, split.labeled, split.unlabeled, adapt_cfg, seed=seed)
                acc = _score(res.params, ev)
            seconds[f"{method}@{shot}"] += timer() - t0
            rows.append(Row(method, shot, target.subject_id, seed, acc))
        if pre.params.checksum() != base_sum:
            raise ExperimentError(f"pre-trained parameters changed while adapting target {target.subject_id}")
    return CellResult(target_index, seed, rows, checksums, dict(seconds))


def _run_cell_safe(args) -> CellResult:
    config, datasets, t, seed = args
    try:
        return run_cell(config, datasets, t, seed)
    except Exception as exc:
        name = datasets[t].subject_id if 0 <= t < len(datasets) else t
        raise ExperimentError(f"cell target={name} seed={seed} failed: {type(exc).__name__}: {exc}") from exc


def run_loso(config: ExperimentConfig, jobs: int = 1) -> ExperimentReport:
    """Run every (target, seed) cell and merge the rows in a fixed order."""
    config.validate()
    datasets = config.datasets()
    if len(datasets) < 2:
        raise ExperimentError(f"LOSO needs at least 2 subjects, got {len(datasets)}")
    targets = range(len(datasets)) if config.targets is None else config.targets
    cells = [(config, datasets, t, s) for t in targets for s in config.seeds]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell_safe, cells))
    else:
        results = [_run_cell_safe(c) for c in cells]
    report = ExperimentReport()
    for res in sorted(results, key=lambda r: (r.target_index, r.seed)):
        report.checksums[(res.target_index, res.seed)] = res.checksums
        for key, sec in res.seconds.items():
            report.seconds[key] = report.seconds.get(key, 0.0) + sec
    order = {d.subject_id: i for i, d in enumerate(datasets)}
    report.rows = sorted((row for res in results for row in res.rows),
                         key=lambda r: (_row_order(r.method), r.shot, order[r.target_subject], r.seed))
    return report


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------


def mean_table(rows: list[Row]) -> dict[tuple[str, int], float]:
    groups = defaultdict(list)
    for r in rows:
        groups[(r.method, r.shot)].append(r.accuracy)
    return {k: float(np.mean(v)) for k, v in sorted(groups.items(), key=lambda kv: (_row_order(kv[0][0]), kv[0][1]))}


def _baseline(rows: list[Row]) -> dict[tuple[str, int], float]:
    base = {(r.target_subject, r.seed): r.accuracy for r in rows if r.method == "WOMETA"}
    if not base:
        raise ValueError("improvements need WOMETA rows as the baseline")
    return base


def improvement_table(rows: list[Row] | ExperimentReport) -> dict[tuple[str, int], float]:
    """Mean paired accuracy gain over W/O-Meta, in points (0-100), per method and shot."""
    rows = rows.rows if isinstance(rows, ExperimentReport) else rows
    base = _baseline(rows)
    diffs = defaultdict(list)
    for r in rows:
        if r.method == "WOMETA":
            continue
        key = (r.target_subject, r.seed)
        if key not in base:
            raise ValueError(f"no WOMETA row for target {r.target_subject} seed {r.seed}")
        diffs[(r.method, r.shot)].append(r.accuracy - base[key])
    return {k: 100.0 * float(np.mean(v)) for k, v in sorted(diffs.items(), key=lambda kv: (_row_order(kv[0][0]), kv[0][1]))}


def per_seed_improvements(rows: list[Row]) -> dict[tuple[str, int, int], float]:
    """Like :func:`improvement_table` but keyed by (method, shot, seed)."""
    base = _baseline(rows)
    diffs = defaultdict(list)
    for r in rows:
        if r.method != "WOMETA":
            diffs[(r.method, r.shot, r.seed)].append(r.accuracy - base[(r.target_subject, r.seed)])
    return {k: 100.0 * float(np.mean(v)) for k, v in sorted(diffs.items())}


def _subject_means(rows: list[Row], method: str, shot: int) -> dict[str, float]:
    groups = defaultdict(list)
    for r in rows:
        if r.method == method and (r.shot == shot or method == "WOMETA"):
            groups[r.target_subject].append(r.accuracy)
    return {k: float(np.mean(v)) for k, v in groups.items()}


def wilcoxon_table(rows: list[Row]) -> list[dict]:
    """SSML against each other method, per shot, paired over target subjects (seeds averaged first)."""
    out = []
    methods = {r.method for r in rows}
    if "SSML" not in methods:
        return out
    for shot in sorted({r.shot for r in rows if r.method == "SSML"}):
        ssml = _subject_means(rows, "SSML", shot)
        for other in ("WOMETA", "MAML"):
            if other not in methods:
                continue
            ref = _subject_means(rows, other, shot)
            subjects = sorted(set(ssml) & set(ref))
            if not subjects:
                continue
            entry = {"comparison": f"SSML-{other}", "shot": shot, "n_subjects": len(subjects)}
            try:
                res = wilcoxon_signed_rank([ssml[s] for s in subjects], [ref[s] for s in subjects])
                entry.update(statistic=res.statistic, p_value=res.p_value, n_nonzero=res.n, mode=res.method)
            except ValueError as exc:
                entry.update(statistic="", p_value="", n_nonzero="", mode=f"undefined: {exc}")
            out.append(entry)
    return out


# ---------------------------------------------------------------------------
# CSV input / output
# ---------------------------------------------------------------------------


def write_rows(path: str | Path, rows: list[Row]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROW_FIELDS)
        for r in rows:
            w.writerow([r.method, r.shot, r.target_subject, r.seed, repr(r.accuracy)])


def read_rows(path: str | Path) -> list[Row]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != ROW_FIELDS:
            raise ValueError(f"{path}: expected columns {ROW_FIELDS}, got {reader.fieldnames}")
        return [Row(d["method"], int(d["shot"]), d["target_subject"], int(d["seed"]), float(d["accuracy"]))
                for d in reader]


def summary_rows(rows: list[Row]) -> list[list]:
    """One table with means, improvements over W/O-Meta and Wilcoxon results."""
    table = [["table", "method", "shot", "value", "detail"]]
    for (m, s), v in mean_table(rows).items():
        table.append(["mean_accuracy", m, s, repr(v), ""])
    if any(r.method == "WOMETA" for r in rows):
        for (m, s), v in improvement_table(rows).items():
            table.append(["improvement_points", m, s, repr(v), ""])
    for t in wilcoxon_table(rows):
        detail = f"W={t['statistic']};n={t['n_nonzero']};mode={t['mode']}"
        p = t["p_value"]
        table.append(["wilcoxon_p", t["comparison"], t["shot"], repr(p) if isinstance(p, float) else "", detail])
    return table


def write_summary(path: str | Path, rows: list[Row]) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(summary_rows(rows))


def export_features(params: ModelParams, datasets: SubjectDataset | list[SubjectDataset], path: str | Path) -> int:
    """Write penultimate features as CSV (subject_id, label, h_1..h_n); returns the row count."""
    if isinstance(datasets, SubjectDataset):
        datasets = [datasets]
    n = params.spec.feature_width
    count = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "label", *(f"h_{i}" for i in range(1, n + 1))])
        for ds in datasets:
            if len(ds) == 0:
                continue
            _, feats = predict(params, ds.samples)
            for label, h in zip(ds.labels, feats):
                w.writerow([ds.subject_id, int(label), *(repr(float(v)) for v in h)])
                count += 1
    return count
