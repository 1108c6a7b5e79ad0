"""Command line entry point: ``ssml <subcommand> [options]``.

Subcommands: synth, pretrain, adapt, eval, loso, report. Settings come from
``--config FILE`` and from ``--<section>-<key>`` flags; flags win. Tables are
written as CSV to ``--out`` or stdout. Exit status is 1 when a LOSO cell or a
single run fails and 2 for invalid usage.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys

from .adapt import AdaptationError, ssml_finetune, supervised_finetune
from .backbones import load_checkpoint, predict, save_checkpoint
from .config import SECTIONS, ConfigError, load_settings
from .data import (DataError, FormatError, SubjectDataset, export_labels_csv, few_shot_sample, load_datasets,
                   loso_split, save_datasets, synth_generate)
from .harness import (ExperimentError, accuracy, benchmark_config, export_features, read_rows, run_loso,
                      summary_rows, write_rows)
from .meta import pretrain
from .objectives import ClassCenters

log = logging.getLogger("ssml")


def _flag(section: str, key: str) -> str:
    return f"--{section}-{key.replace('_', '-')}"


def _settings_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [data] [model] [meta] [adapt] [experiment] sections")
    common.add_argument("-v", "--verbose", action="store_true")
    for section, cls in SECTIONS.items():
        group = common.add_argument_group(f"[{section}] settings")
        for f in dataclasses.fields(cls):
            group.add_argument(_flag(section, f.name), dest=f"{section}__{f.name}", metavar="VALUE", default=None)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _settings_parser()
    parser = argparse.ArgumentParser(prog="ssml", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic MSHD dataset")
    p.add_argument("--out", required=True, help="MSHD file to write")
    p.add_argument("--labels-csv", help="also write subject_id,index,label rows here")
    p.add_argument("--benchmark", action="store_true", help="use the built-in benchmark generator settings")

    p = sub.add_parser("pretrain", parents=[common], help="meta-pretrain on all subjects but --target")
    p.add_argument("--target", type=int, required=True, help="index of the held-out subject")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint manifest path (blob goes to OUT.bin)")
    p.add_argument("--history", help="per-epoch CSV (default: stdout)")

    p = sub.add_parser("adapt", parents=[common], help="fine-tune a checkpoint on the target subject")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--shot", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--method", choices=("SSML", "MAML"), default="SSML")
    p.add_argument("--out", help="write the adapted checkpoint here")
    p.add_argument("--report", help="adaptation report CSV (default: stdout)")

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a target's evaluation split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--shot", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="result CSV (default: stdout)")
    p.add_argument("--features", help="also export the target's features to this CSV")

    p = sub.add_parser("loso", parents=[common], help="run the full leave-one-subject-out grid")
    p.add_argument("--out", help="rows CSV (default: stdout)")
    p.add_argument("--summary", help="also write means, improvements and Wilcoxon results here")
    p.add_argument("--benchmark", action="store_true",
                   help="start from the built-in synthetic benchmark (other settings still apply)")

    p = sub.add_parser("report", parents=[common], help="summary tables from a rows CSV")
    p.add_argument("--rows", required=True)
    p.add_argument("--out", help="summary CSV (default: stdout)")
    return parser


def _settings(args):
    settings = load_settings(args.config)
    if getattr(args, "benchmark", False):
        base = benchmark_config()
        for section, obj in (("data", base.data), ("model", base.model), ("meta", base.meta), ("adapt", base.adapt)):
            for f in dataclasses.fields(obj):
                settings.values[section].setdefault(f.name, getattr(obj, f.name))
        settings.values["experiment"].setdefault("shots", base.shots)
        settings.values["experiment"].setdefault("seeds", base.seeds)
    for dest, value in vars(args).items():
        if "__" in dest and value is not None:
            section, key = dest.split("__", 1)
            settings.set(section, key, value)
    return settings


def _datasets(settings) -> list[SubjectDataset]:
    data = settings.data()
    return load_datasets(data) if isinstance(data, str) else synth_generate(data)


def _open_out(path):
    return open(path, "w", newline="") if path else _Stdout()


class _Stdout:
    def __enter__(self):
        return sys.stdout

    def __exit__(self, *exc):
        sys.stdout.flush()
        return False


def _write_csv(path, header, rows) -> None:
    with _open_out(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def _load_model(path):
    params, extra, meta = load_checkpoint(path)
    if "centers" not in extra:
        raise FormatError(f"checkpoint {path} has no class centers block")
    centers = ClassCenters(extra["centers"], float(meta.get("lr_center", 0.001)), float(meta.get("lam", 0.001)))
    return params, centers


def _save_model(path, params, centers, **meta) -> None:
    save_checkpoint(path, params, {"centers": centers.centers},
                    {"lr_center": repr(centers.lr_center), "lam": repr(centers.lam), **meta})


def cmd_synth(args, settings) -> int:
    datasets = _datasets(settings)
    save_datasets(args.out, datasets)
    if args.labels_csv:
        export_labels_csv(args.labels_csv, datasets)
    K = datasets[0].n_classes
    _write_csv(None, ["subject_id", "n_samples", *(f"class{c}" for c in range(K))],
               [[d.subject_id, len(d), *d.class_counts().tolist()] for d in datasets])
    return 0


def cmd_pretrain(args, settings) -> int:
    sources, target = loso_split(_datasets(settings), args.target)
    res = pretrain(settings.build("model"), sources, settings.build("meta"), seed=args.seed)
    _save_model(args.out, res.params, res.centers, target=target.subject_id, best_epoch=res.best_epoch)
    keys = ["epoch", "train_acc", "val_acc", "train_loss", "val_loss"]
    _write_csv(args.history, keys, [[_fmt(h[k]) for k in keys] for h in res.history])
    return 0


def cmd_adapt(args, settings) -> int:
    params, centers = _load_model(args.checkpoint)
    _, target = loso_split(_datasets(settings), args.target)
    split = few_shot_sample(target, args.shot, settings.build("experiment").eval_fraction, args.seed)
    cfg = dataclasses.replace(settings.build("adapt"), n_shot=args.shot)
    if args.method == "SSML":
        res = ssml_finetune(params, centers, split.labeled, split.unlabeled, cfg, seed=args.seed, eval_set=split.eval)
    else:
        res = supervised_finetune(params, centers, split.labeled, cfg, eval_set=split.eval)
    if args.out:
        _save_model(args.out, res.params, res.centers, target=target.subject_id, method=args.method,
                    shot=args.shot)
    rows = res.report.rows
    header = list(rows[0]) if rows else ["epoch", "q_size", "fallback", "eval_acc"]
    _write_csv(args.report, header, [[_fmt(r[k]) for k in header] for r in rows])
    return 0


def cmd_eval(args, settings) -> int:
    params, _ = _load_model(args.checkpoint)
    _, target = loso_split(_datasets(settings), args.target)
    split = few_shot_sample(target, args.shot, settings.build("experiment").eval_fraction, args.seed)
    x, y = split.eval
    probs, _ = predict(params, x)
    acc = accuracy(probs.argmax(axis=1), y)
    _write_csv(args.out, ["subject_id", "shot", "seed", "n_eval", "accuracy"],
               [[target.subject_id, args.shot, args.seed, len(y), repr(acc)]])
    if args.features:
        export_features(params, target, args.features)
    return 0


def cmd_loso(args, settings) -> int:
    config, jobs = settings.experiment()
    report = run_loso(config, jobs=jobs)
    if args.out:
        write_rows(args.out, report.rows)
    else:
        _write_csv(None, ["method", "shot", "target_subject", "seed", "accuracy"],
                   [[r.method, r.shot, r.target_subject, r.seed, repr(r.accuracy)] for r in report.rows])
    if args.summary:
        table = summary_rows(report.rows)
        _write_csv(args.summary, table[0], table[1:])
    for key, sec in sorted(report.seconds.items()):
        log.info("time %s %.1fs", key, sec)
    return 0


def cmd_report(args, settings) -> int:
    table = summary_rows(read_rows(args.rows))
    _write_csv(args.out, table[0], table[1:])
    return 0


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "adapt": cmd_adapt, "eval": cmd_eval,
            "loso": cmd_loso, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        settings = _settings(args)
        return COMMANDS[args.command](args, settings)
    except ConfigError as exc:
        print(f"ssml: config error: {exc}", file=sys.stderr)
        return 2
    except (ExperimentError, AdaptationError, DataError, FloatingPointError, OSError, ValueError) as exc:
        print(f"ssml {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
