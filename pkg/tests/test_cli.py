import os

import numpy as np
import pytest

from lnadapt.cli import main
from lnadapt.corpus import load_corpus
from lnadapt.model import load_model

TINY_SWEEP = """
[source]
n_utts = 24
epochs = 2

[target]
distances = {distances}
pool = 12
n_valid = 4
n_test = 1

[grid]
sizes = {sizes}
systems = {systems}
seeds = {seeds}

[train]
epochs = 2
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def corpus_dir(workdir):
    d = workdir / "target"
    assert main(["gen-corpus", "--seed", "2", "--distance", "0.5", "--n-utts", "30", "--n-valid", "5", "--n-test", "3", "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def source_path(workdir):
    d = workdir / "source"
    assert main(["gen-corpus", "--seed", "1", "--distance", "0", "--n-utts", "30", "--n-valid", "5", "--n-test", "1", "--out", str(d)]) == 0
    path = workdir / "source.ltm"
    assert main(["train-sd", "--corpus", str(d), "--epochs", "3", "--out", str(path)]) == 0
    return path


def tree_bytes(d):
    out = {}
    for root, _, files in os.walk(d):
        for f in files:
            p = os.path.join(root, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, d)] = fh.read()
    return out


# -- gen-corpus ---------------------------------------------------------------


def test_gen_corpus_layout(corpus_dir, capsys):
    files = tree_bytes(corpus_dir)
    assert "manifest" in files
    assert sum(1 for k in files if k.startswith("utt")) == 30
    assert len(load_corpus(corpus_dir).splits["train"]) == 22


def test_gen_corpus_refuses_then_force_is_byte_identical(corpus_dir, capsys):
    before = tree_bytes(corpus_dir)
    argv = ["gen-corpus", "--seed", "2", "--distance", "0.5", "--n-utts", "30", "--n-valid", "5", "--n-test", "3", "--out", corpus_dir]
    code, _, err = run(capsys, *argv)
    assert code == 1 and "--force" in err
    code, out, _ = run(capsys, *argv, "--force")
    assert code == 0 and "manifest sha256" in out
    assert tree_bytes(corpus_dir) == before


def test_gen_corpus_missing_out_is_usage_error(capsys):
    code, _, _ = run(capsys, "gen-corpus", "--distance", "0.1", "--n-utts", "80")
    assert code == 2


def test_gen_corpus_bad_distance_is_usage_error(tmp_path, capsys):
    code, _, _ = run(capsys, "gen-corpus", "--distance", "2", "--n-utts", "80", "--out", tmp_path / "c")
    assert code == 2


def test_no_command_is_usage_error(capsys):
    assert run(capsys)[0] == 2


# -- train-sd -------------------------------------------------------------------


def test_train_sd_writes_model_and_record(source_path):
    assert source_path.exists()
    rec = source_path.with_suffix(".csv").read_text().splitlines()
    assert rec[0] == "epoch,train_loss,valid_loss"
    assert len(rec) == 1 + 1 + 3
    assert load_model(source_path).norm_stats_ref.startswith("corpus:")


def test_train_sd_is_deterministic(corpus_dir, tmp_path, capsys):
    a, b = tmp_path / "a.ltm", tmp_path / "b.ltm"
    for p in (a, b):
        assert run(capsys, "train-sd", "--corpus", corpus_dir, "--epochs", "2", "--seed", "4", "--out", p)[0] == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.with_suffix(".csv").read_bytes() == b.with_suffix(".csv").read_bytes()


def test_train_sd_missing_corpus(tmp_path, capsys):
    code, _, err = run(capsys, "train-sd", "--corpus", tmp_path / "nope", "--out", tmp_path / "m.ltm")
    assert code == 1 and "manifest" in err


# -- adapt ----------------------------------------------------------------------


def test_adapt_ol_changes_only_heads(source_path, workdir, tmp_path, capsys):
    # the source's own corpus: validation still improves, so the heads move
    out = tmp_path / "ol.ltm"
    code, _, _ = run(capsys, "adapt", "--source", source_path, "--corpus", workdir / "source", "--method", "ol", "--epochs", "3", "--lr", "0.1", "--out", out)
    assert code == 0
    src, ad = load_model(source_path).blocks(), load_model(out).blocks()
    assert set(src) == set(ad)
    changed = {k for k in src if not np.array_equal(src[k], ad[k])}
    assert changed and all(k.startswith("head.") for k in changed)


def test_adapt_full_zero_epochs_evaluates_like_source(source_path, corpus_dir, tmp_path, capsys):
    out = tmp_path / "full.ltm"
    code, _, _ = run(capsys, "adapt", "--source", source_path, "--corpus", corpus_dir, "--method", "full-ln", "--epochs", "0", "--out", out)
    assert code == 0
    rows = []
    for m in (source_path, out):
        code, stdout, _ = run(capsys, "eval", "--model", m, "--corpus", corpus_dir, "--system", "x")
        rows.append(stdout.strip())
    assert rows[0] == rows[1]


def test_adapt_lrpd_reports_parameter_count(source_path, corpus_dir, tmp_path, capsys):
    out = tmp_path / "lrpd.ltm"
    code, _, err = run(
        capsys, "adapt", "--source", source_path, "--corpus", corpus_dir, "--method", "lrpd-ln", "--rank", "10", "--n-adapt", "8", "--epochs", "1", "--out", out
    )
    assert code == 0
    assert err.count("672 parameters") == 2
    assert sorted(load_model(out).adapters()) == [2, 3]


def test_adapt_rank_too_large(source_path, corpus_dir, tmp_path, capsys):
    code, _, err = run(capsys, "adapt", "--source", source_path, "--corpus", corpus_dir, "--method", "lrpd-ln", "--rank", "32", "--out", tmp_path / "x.ltm")
    assert code == 2 and "rank" in err
    assert not (tmp_path / "x.ltm").exists()


def test_adapt_bad_method(source_path, corpus_dir, tmp_path, capsys):
    code, _, _ = run(capsys, "adapt", "--source", source_path, "--corpus", corpus_dir, "--method", "svd", "--out", tmp_path / "x.ltm")
    assert code == 2


def test_log_level_from_environment(source_path, corpus_dir, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("LNADAPT_LOG", "error")
    code, _, err = run(capsys, "adapt", "--source", source_path, "--corpus", corpus_dir, "--method", "lrpd-ln", "--epochs", "1", "--out", tmp_path / "q.ltm")
    assert code == 0 and "parameters" not in err


# -- eval -----------------------------------------------------------------------


def test_eval_oracle_row_and_append(corpus_dir, tmp_path, capsys):
    csv = tmp_path / "rows.csv"
    for _ in range(2):
        code, out, _ = run(capsys, "eval", "--oracle", "--corpus", corpus_dir, "--split", "test", "--system", "oracle", "--out", csv)
        assert code == 0
    row = out.strip().split(",")
    assert row[:6] == ["oracle", "0", "0.0", "0.0", "0.0", "0.0"]
    lines = csv.read_text().splitlines()
    assert lines[0] == "system,n_adapt,mcd,f0_rmse,uv_err,mse,n_frames"
    assert lines[1] == lines[2] == out.strip()


def test_eval_is_deterministic(source_path, corpus_dir, capsys):
    a = run(capsys, "eval", "--model", source_path, "--corpus", corpus_dir)[1]
    b = run(capsys, "eval", "--model", source_path, "--corpus", corpus_dir)[1]
    assert a == b and float(a.split(",")[5]) > 0


def test_eval_invalid_split(source_path, corpus_dir, capsys):
    assert run(capsys, "eval", "--model", source_path, "--corpus", corpus_dir, "--split", "dev")[0] == 2


def test_eval_needs_model_without_oracle(corpus_dir, capsys):
    assert run(capsys, "eval", "--corpus", corpus_dir)[0] == 2


# -- sweep ----------------------------------------------------------------------


def write_config(path, distances="0.3", sizes="4", systems="OL", seeds="0"):
    path.write_text(TINY_SWEEP.format(distances=distances, sizes=sizes, systems=systems, seeds=seeds))
    return path


def data_rows(out_dir):
    return (out_dir / "sweep.csv").read_text().splitlines()[1:]


def test_sweep_minimal_config(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.ini")
    code, out, _ = run(capsys, "sweep", "--config", cfg, "--out", tmp_path / "r")
    assert code in (0, 1)
    rows = data_rows(tmp_path / "r")
    assert len(rows) == 1 and rows[0].startswith("0.3,OL,4,0,") and rows[0].endswith(",ok")
    assert (tmp_path / "r" / "summary.md").exists() and (tmp_path / "r" / "config.ini").exists()


def test_sweep_grid_counts_and_exit_code(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.ini", sizes="3, 6", systems="OL, OL+Full-LN", seeds="0, 1")
    code, out, _ = run(capsys, "sweep", "--config", cfg, "--out", tmp_path / "r")
    assert len(data_rows(tmp_path / "r")) == 8
    md = (tmp_path / "r" / "summary.md").read_text()
    assert "| OL | " in md and "| OL+Full-LN | " in md
    assert code == (1 if "FAIL" in out else 0)
    assert "ol_gap_grows" in out


def test_sweep_is_byte_stable_and_thread_independent(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.ini", distances="0.2, 0.6", sizes="2, 4", systems="SD, OL+LRPD-LN", seeds="0, 1")
    reports = []
    for name, threads in (("a", 1), ("b", 1), ("c", 2)):
        run(capsys, "sweep", "--config", cfg, "--threads", threads, "--out", tmp_path / name)
        reports.append(((tmp_path / name / "sweep.csv").read_bytes(), (tmp_path / name / "summary.md").read_bytes()))
    assert reports[0] == reports[1] == reports[2]
    assert len(reports[0][0].decode().splitlines()) == 1 + 2 * 2 * 2 * 2


def test_sweep_refuses_existing_report(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.ini")
    run(capsys, "sweep", "--config", cfg, "--out", tmp_path / "r")
    assert run(capsys, "sweep", "--config", cfg, "--out", tmp_path / "r")[0] == 1


@pytest.mark.parametrize(
    "body",
    [
        "[grid]\nsizes = 20, 10\n",
        "[grid]\nsystems = \n",
        "[grid]\nsystems = OL, MLLR\n",
        "[bogus]\nx = 1\n",
        "[train]\nepochs = many\n",
    ],
)
def test_sweep_bad_config_is_usage_error(tmp_path, capsys, body):
    p = tmp_path / "bad.ini"
    p.write_text(body)
    assert run(capsys, "sweep", "--config", p, "--out", tmp_path / "r")[0] == 2


def test_sweep_needs_config(tmp_path, capsys):
    assert run(capsys, "sweep", "--out", tmp_path / "r")[0] == 2
