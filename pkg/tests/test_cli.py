import csv
import subprocess
import sys

import pytest

from ssml.cli import main
from ssml.data import load_datasets

TINY_FLAGS = ["--data-n-subjects", "4", "--data-channels", "4", "--data-time-len", "8",
              "--data-samples-per-subject", "60", "--data-noise-sd", "0.5",
              "--model-kind", "MLP", "--model-channels", "4", "--model-time-len", "8",
              "--meta-max-epochs", "2", "--adapt-outer-epochs", "1"]

CONFIG = """\
[data]
n_subjects = 4
channels = 4
time_len = 8
samples_per_subject = 60
noise_sd = 0.5
[model]
kind = MLP
channels = 4
time_len = 8
[meta]
max_epochs = 1
[adapt]
outer_epochs = 1
[experiment]
shots = 3, 5
seeds = 0, 1
"""


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_synth_writes_dataset_and_labels(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "d.mshd"), "--labels-csv", str(tmp_path / "l.csv"),
                 *TINY_FLAGS]) == 0
    sets = load_datasets(tmp_path / "d.mshd")
    assert len(sets) == 4 and sets[0].samples.shape == (60, 4, 8)
    assert len(_csv(tmp_path / "l.csv")) == 1 + 4 * 60
    assert capsys.readouterr().out.splitlines()[0] == "subject_id,n_samples,class0,class1"


def test_pretrain_adapt_eval_chain(tmp_path, capsys):
    ckpt, adapted = str(tmp_path / "m.txt"), str(tmp_path / "a.txt")
    assert main(["pretrain", "--target", "0", "--out", ckpt, "--history", str(tmp_path / "h.csv"), *TINY_FLAGS]) == 0
    hist = _csv(tmp_path / "h.csv")
    assert hist[0] == ["epoch", "train_acc", "val_acc", "train_loss", "val_loss"] and len(hist) == 3

    assert main(["adapt", "--checkpoint", ckpt, "--target", "0", "--shot", "3", "--out", adapted,
                 "--report", str(tmp_path / "r.csv"), *TINY_FLAGS]) == 0
    report = _csv(tmp_path / "r.csv")
    assert report[0] == ["epoch", "q_size", "q_class0", "q_class1", "fallback", "eval_acc"]
    assert [r[0] for r in report[1:]] == ["0", "1"]

    assert main(["eval", "--checkpoint", adapted, "--target", "0", "--shot", "3",
                 "--features", str(tmp_path / "f.csv"), *TINY_FLAGS]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert out[-2] == "subject_id,shot,seed,n_eval,accuracy" and out[-1].startswith("S01,3,0,")
    assert len(_csv(tmp_path / "f.csv")[0]) == 2 + 300


def test_maml_method_adapts(tmp_path):
    ckpt = str(tmp_path / "m.txt")
    main(["pretrain", "--target", "1", "--out", ckpt, "--history", str(tmp_path / "h.csv"), *TINY_FLAGS])
    assert main(["adapt", "--checkpoint", ckpt, "--target", "1", "--method", "MAML",
                 "--report", str(tmp_path / "r.csv"), *TINY_FLAGS]) == 0


def test_loso_config_file_and_override(tmp_path):
    (tmp_path / "c.ini").write_text(CONFIG)
    assert main(["loso", "--config", str(tmp_path / "c.ini"), "--out", str(tmp_path / "a.csv")]) == 0
    rows = _csv(tmp_path / "a.csv")
    assert len(rows) == 1 + 4 * 2 * (1 + 2 + 2)
    assert main(["loso", "--config", str(tmp_path / "c.ini"), "--experiment-seeds", "0",
                 "--experiment-methods", "WOMETA,SSML", "--out", str(tmp_path / "b.csv")]) == 0
    rows = _csv(tmp_path / "b.csv")
    assert len(rows) == 1 + 4 * (1 + 2) and {r[0] for r in rows[1:]} == {"WOMETA", "SSML"}


def test_loso_repeatable_with_workers(tmp_path):
    (tmp_path / "c.ini").write_text(CONFIG)
    outs = []
    for i, jobs in enumerate(("1", "1", "2")):
        out, summary = tmp_path / f"r{i}.csv", tmp_path / f"s{i}.csv"
        assert main(["loso", "--config", str(tmp_path / "c.ini"), "--experiment-jobs", jobs,
                     "--out", str(out), "--summary", str(summary)]) == 0
        outs.append((out.read_bytes(), summary.read_bytes()))
    assert outs[0] == outs[1] == outs[2]
    assert main(["report", "--rows", str(tmp_path / "r0.csv"), "--out", str(tmp_path / "rep.csv")]) == 0
    assert (tmp_path / "rep.csv").read_bytes() == outs[0][1]


def test_failed_cell_exits_nonzero(tmp_path, capsys):
    assert main(["loso", "--experiment-shots", "40", *TINY_FLAGS]) == 1
    assert "target=S01" in capsys.readouterr().err


def test_bad_settings(tmp_path, capsys):
    assert main(["loso", "--experiment-methods", "SSML,BOGUS", *TINY_FLAGS]) == 1
    assert main(["synth", "--out", str(tmp_path / "x"), "--meta-max-epochs", "ten"]) == 2
    (tmp_path / "c.ini").write_text("[nonsense]\nx = 1\n")
    assert main(["synth", "--out", str(tmp_path / "x"), "--config", str(tmp_path / "c.ini")]) == 2
    with pytest.raises(SystemExit):
        main(["adapt", "--target", "0"])


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "ssml.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("synth", "pretrain", "adapt", "eval", "loso", "report"):
        assert cmd in res.stdout
