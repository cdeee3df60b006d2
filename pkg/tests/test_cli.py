import csv
import random
import re

import pytest

from pprobe import cli
from pprobe import trainer as T
from pprobe.pareto import ADD, REMOVE

TINY = """\
task={task}
mode={mode}
lambdas=0.02,0.1
seeds=3
steps=20
eval_interval=10
n_train=120
n_valid=30
n_test=30
bleu=false
model.emb=8
model.hidden=8
model.attn=8
model.probe_hidden=8
probe.steps=60
probe.eval_interval=20
baseline.interval=10
out={out}
"""


def write_config(tmp_path, name="cfg.txt", task="MT", mode=ADD, out=None):
    path = tmp_path / name
    path.write_text(TINY.format(task=task, mode=mode, out=out or tmp_path / "out"))
    return path


# ------------------------------------------------------------------ gen-data

def test_gen_data_writes_n_lines_deterministically(tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert cli.main(["gen-data", "--n", "2000", "--seed", "1", "--out", str(a)]) == 0
    assert cli.main(["gen-data", "--n", "2000", "--seed", "1", "--out", str(b)]) == 0
    assert len(a.read_text().splitlines()) == 2000
    assert a.read_bytes() == b.read_bytes()
    out = capsys.readouterr().out
    assert "records=2000" in out and "H(s)=" in out


def test_gen_data_rejects_zero(tmp_path, capsys):
    assert cli.main(["gen-data", "--n", "0", "--out", str(tmp_path / "x.jsonl")]) != 0
    assert "n must be positive" in capsys.readouterr().err
    assert not (tmp_path / "x.jsonl").exists()


def test_gen_data_bad_grammar_and_path(tmp_path, capsys):
    bad = tmp_path / "g.txt"
    bad.write_text("labels=N\n")
    assert cli.main(["gen-data", "--n", "5", "--grammar", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert "invalid grammar" in capsys.readouterr().err
    assert cli.main(["gen-data", "--n", "5", "--out", str(tmp_path / "missing" / "dir" / "x")]) == 1


def test_unknown_flag_is_rejected():
    with pytest.raises(SystemExit) as exc:
        cli.main(["gen-data", "--n", "5", "--out", "x", "--colour", "red"])
    assert exc.value.code != 0


# ------------------------------------------------------------------- config

def test_bad_config_names_key(tmp_path, capsys):
    path = tmp_path / "c.txt"
    path.write_text("steps=5\nmodel.widht=3\n")
    assert cli.main(["sweep", "--config", str(path)]) == 1
    assert "model.widht" in capsys.readouterr().err


def test_missing_config(tmp_path, capsys):
    assert cli.main(["train", "--config", str(tmp_path / "nope.txt")]) == 1
    assert "not found" in capsys.readouterr().err


# --------------------------------------------------------------------- sweep

@pytest.fixture(scope="module")
def mt_sweep(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root, out=root / "out")
    assert cli.main(["sweep", "--config", str(cfg)]) == 0
    return root / "out"


def test_sweep_writes_csv_and_svg(mt_sweep):
    rows = list(csv.DictReader(open(mt_sweep / "sweep.csv")))
    assert len(rows) == 3
    assert list(rows[0]) == T.SWEEP_COLUMNS
    svg = (mt_sweep / "frontier.svg").read_text()
    assert 'viewBox="0 0 800 600"' in svg
    assert svg.count('class="run"') == 2
    assert svg.count('class="reference"') == 1
    assert svg.count('class="frontier"') == 1
    for run in ("add-lam0.0200-s3", "add-lam0.1000-s3", "reference-s3"):
        assert (mt_sweep / run / "checkpoint.ppck").exists()
        assert (mt_sweep / run / "curve.csv").exists()


def test_sweep_rerun_is_byte_identical(tmp_path, mt_sweep):
    cfg = write_config(tmp_path, out=tmp_path / "again")
    assert cli.main(["sweep", "--config", str(cfg)]) == 0
    assert (tmp_path / "again" / "sweep.csv").read_bytes() == (mt_sweep / "sweep.csv").read_bytes()


def test_lm_remove_sweep_labels_probe_ce(tmp_path):
    cfg = write_config(tmp_path, task="LM", mode=REMOVE)
    assert cli.main(["sweep", "--config", str(cfg)]) == 0
    svg = (tmp_path / "out" / "frontier.svg").read_text()
    assert "probe CE (nats, higher = less information)" in svg
    rows = list(csv.DictReader(open(tmp_path / "out" / "sweep.csv")))
    assert {r["mode"] for r in rows} == {REMOVE, T.REFERENCE}
    assert all(r["bleu"] == "" for r in rows)


def test_train_single_run(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert cli.main(["train", "--config", str(cfg), "--lambda", "0.05", "--seed", "4"]) == 0
    assert "add-lam0.0500-s4" in capsys.readouterr().out
    assert (tmp_path / "out" / "add-lam0.0500-s4" / "curve.csv").exists()
    assert cli.main(["train", "--config", str(cfg), "--lambda", "0"]) == 1


def test_baseline_command(tmp_path):
    cfg = write_config(tmp_path)
    assert cli.main(["baseline", "--config", str(cfg), "--k", "2"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "out" / "baseline.csv")))
    assert len(rows) == 2
    assert all(float(r["axis2"]) == -float(r["probe_ce"]) for r in rows)


# ------------------------------------------------------------------ frontier

def write_rows(path, rows):
    runs = [T.RunResult(lam, mode, seed, 0, loss, None, ce, 1.0, max(0.0, 1.0 - ce))
            for lam, mode, seed, loss, ce in rows]
    T.write_sweep_csv(path, runs, [False] * len(runs))
    return runs


def frontier_table(out_dir):
    return (out_dir / "frontier.csv").read_text()


def test_frontier_singleton(tmp_path):
    src = tmp_path / "sweep.csv"
    write_rows(src, [(0.05, ADD, 1, 1.0, 0.5)])
    assert cli.main(["frontier", "--csv", str(src), "--mode", ADD]) == 0
    rows = list(csv.DictReader(open(tmp_path / "frontier.csv")))
    assert [r["on_frontier"] for r in rows] == ["true"]


SAMPLE = [(0.01, ADD, 1, 1.0, 0.5), (0.05, ADD, 1, 1.1, 0.3), (0.1, ADD, 1, 1.3, 0.35),
          (0.0, T.REFERENCE, 1, 0.9, 0.6), (0.02, ADD, 2, 1.0, 0.2), (0.0, T.REFERENCE, 2, 1.0, 0.6)]


def test_frontier_values_and_input_untouched(tmp_path):
    src = tmp_path / "sweep.csv"
    write_rows(src, SAMPLE)
    before = src.read_bytes()
    assert cli.main(["frontier", "--csv", str(src), "--mode", ADD, "--out", str(tmp_path / "f")]) == 0
    assert src.read_bytes() == before
    rows = list(csv.DictReader(open(tmp_path / "f" / "frontier.csv")))
    on = {(r["mode"], r["lambda"], r["seed"]) for r in rows if r["on_frontier"] == "true"}
    # (loss 0.9, ce 0.6) and (1.0, 0.2) are the only non-dominated points
    assert on == {(T.REFERENCE, "0", "1"), (ADD, "0.02", "2")}
    svg = (tmp_path / "f" / "frontier.svg").read_text()
    assert svg.count('class="reference"') == 2 and svg.count('class="run"') == 4


def test_frontier_stable_under_row_shuffle(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    write_rows(a / "sweep.csv", SAMPLE)
    shuffled = SAMPLE[:]
    random.Random(4).shuffle(shuffled)
    write_rows(b / "sweep.csv", shuffled)
    for d in (a, b):
        assert cli.main(["frontier", "--csv", str(d / "sweep.csv"), "--mode", ADD]) == 0
    assert frontier_table(a) == frontier_table(b)


def test_frontier_is_idempotent(tmp_path):
    sample = [(lam, REMOVE if mode == ADD else mode, seed, loss, ce) for lam, mode, seed, loss, ce in SAMPLE]
    src = tmp_path / "sweep.csv"
    runs = write_rows(src, sample)
    assert cli.main(["frontier", "--csv", str(src), "--mode", REMOVE, "--out", str(tmp_path / "one")]) == 0
    first = list(csv.DictReader(open(tmp_path / "one" / "frontier.csv")))
    assert len(first) == len(sample)
    on = {(r["lambda"], r["seed"], r["mode"]) for r in first if r["on_frontier"] == "true"}
    assert 0 < len(on) < len(sample)
    # filtering the frontier rows again keeps every one of them
    kept = [r for r in runs if (T._num(r.lam), str(r.seed), r.mode) in on]
    T.write_sweep_csv(tmp_path / "kept.csv", kept, [True] * len(kept))
    assert cli.main(["frontier", "--csv", str(tmp_path / "kept.csv"), "--mode", REMOVE,
                     "--out", str(tmp_path / "two")]) == 0
    second = list(csv.DictReader(open(tmp_path / "two" / "frontier.csv")))
    assert len(second) == len(on) and all(r["on_frontier"] == "true" for r in second)
    # rerunning on the same input reproduces the same file
    before = (tmp_path / "one" / "frontier.csv").read_bytes()
    assert cli.main(["frontier", "--csv", str(src), "--mode", REMOVE, "--out", str(tmp_path / "one")]) == 0
    assert (tmp_path / "one" / "frontier.csv").read_bytes() == before


def test_frontier_malformed_csv_names_row(tmp_path, capsys):
    src = tmp_path / "sweep.csv"
    write_rows(src, SAMPLE[:3])
    lines = src.read_text().splitlines()
    lines[3] = re.sub(r"^[^,]*", "zero", lines[3])
    src.write_text("\n".join(lines) + "\n")
    assert cli.main(["frontier", "--csv", str(src), "--mode", ADD]) == 1
    assert "row 4" in capsys.readouterr().err


def test_frontier_missing_columns(tmp_path, capsys):
    src = tmp_path / "sweep.csv"
    src.write_text("lambda,mode\n0.1,Add\n")
    assert cli.main(["frontier", "--csv", str(src), "--mode", ADD]) == 1
    assert "missing columns" in capsys.readouterr().err


# -------------------------------------------------------------------- report

def make_sweep_dir(root, curves):
    runs = []
    for i, curve in enumerate(curves):
        run = T.RunResult(0.01 * (i + 1), ADD, 1, 0, curve[-1][1], None, 0.3, 1.0, 0.7)
        runs.append(run)
        (root / run.run_id).mkdir(parents=True)
        T.write_curve(root / run.run_id / "curve.csv", curve)
    T.write_sweep_csv(root / "sweep.csv", runs, [True] * len(runs))
    return runs


def test_report_rows_and_columns(tmp_path, capsys):
    curves = [[(0, 5.0, 1.0), (10, 2.0, 0.5), (20, 1.0, 0.4), (30, 1.5, 0.45)],
              [(0, 3.0, 0.7)] * 3,
              [(0, 4.0, 1.0), (10, 3.0, 0.9), (20, 2.0, 0.8)]]
    make_sweep_dir(tmp_path, curves)
    rows = cli.report_rows(tmp_path)
    assert len(rows) == 3
    assert rows[1][2:4] == ["3", "0"]
    mean, var = T.window_stats([2.0, 1.0, 1.5], best="min")
    assert float(rows[0][2]) == pytest.approx(mean, rel=1e-5) and float(rows[0][3]) == pytest.approx(var, rel=1e-5)
    assert cli.main(["report", "--sweep-dir", str(tmp_path)]) == 0
    header = capsys.readouterr().out.splitlines()[0].split()
    assert header[:4] == ["run_id", "metric", "mean", "var"]


def test_report_missing_curve(tmp_path, capsys):
    runs = make_sweep_dir(tmp_path, [[(0, 1.0, 1.0)] * 3])
    (tmp_path / runs[0].run_id / "curve.csv").unlink()
    assert cli.main(["report", "--sweep-dir", str(tmp_path)]) == 1
    assert "missing curve" in capsys.readouterr().err


def test_report_on_real_sweep(mt_sweep):
    assert len(cli.report_rows(mt_sweep)) == 3
