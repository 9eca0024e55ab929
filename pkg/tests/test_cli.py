"""End-to-end command-line runs on tiny synthetic experiments."""

import numpy as np
import pytest

from flowad.cli import main
from flowad.evaluation import ScoreTable
from flowad.training import read_history

CONFIG = """
[model]
variant = conv
input_shape = 1x8x8
scales = 2
steps = 1
hidden = 4
seed = 5

[data]
train = synthetic:smooth:n=32:seed=1
test = synthetic:smooth:n=8:seed=2
outliers = synthetic:textured:n=8:seed=3

[train]
epochs = 1
batch_size = 16
loss = nll_only
seed = 5

[eval]
methods = raw
"""


@pytest.fixture
def exp(tmp_path):
    cfg = tmp_path / "exp.ini"
    cfg.write_text(CONFIG)
    return tmp_path, cfg


def run(*argv):
    return main([str(a) for a in argv])


def test_train_writes_checkpoint_and_history(exp):
    tmp, cfg = exp
    assert run("train", cfg, "--out-dir", tmp / "run") == 0
    assert (tmp / "run" / "model.flow").exists()
    rows = read_history(tmp / "run" / "history.txt")
    assert sum(1 for r in rows if r[2] == "nll") == 1
    header = (tmp / "run" / "history.txt").read_text().splitlines()[0]
    assert header.startswith("# config_sha256=")


def test_train_rerun_is_deterministic(exp):
    tmp, cfg = exp
    run("train", cfg, "--out-dir", tmp / "a")
    run("train", cfg, "--out-dir", tmp / "b")
    ha = (tmp / "a" / "history.txt").read_text()
    hb = (tmp / "b" / "history.txt").read_text()
    assert ha == hb
    assert (tmp / "a" / "model.flow").read_bytes() == (tmp / "b" / "model.flow").read_bytes()


def test_missing_config_exits_2(tmp_path):
    assert run("train", tmp_path / "nope.ini") == 2


def test_malformed_config_values_exit_2(exp):
    tmp, cfg = exp
    bad = tmp / "bad.ini"
    bad.write_text(CONFIG.replace("n=32:seed=1", "n=abc:seed=1"))
    assert run("train", bad, "--out-dir", tmp / "x") == 2
    bad.write_text(CONFIG.replace("scales = 2", "scales = two"))
    assert run("train", bad, "--out-dir", tmp / "x") == 2
    bad.write_text(CONFIG.replace("epochs = 1", "epochs = 1.5"))
    assert run("train", bad, "--out-dir", tmp / "x") == 2
    bad.write_text("no section header here\n")
    assert run("train", bad, "--out-dir", tmp / "x") == 2
    pooled = tmp / "pooled.ini"
    pooled.write_text(
        CONFIG.replace(
            "train = synthetic:smooth:n=32:seed=1",
            "train = synthetic:smooth:n=16:seed=1 + "
            "synthetic:smooth:n=16:seed=2:shape=1x4x4",
        )
    )
    assert run("train", pooled, "--out-dir", tmp / "y") == 2
    run("train", cfg, "--out-dir", tmp / "run")
    assert run("mix", cfg, "--checkpoint", tmp / "run" / "model.flow",
               "--dataset", "test", "--index-a", "0", "--index-b", "1",
               "--scales", "one,two") == 2


def test_pooled_dataset_concatenates(exp):
    tmp, cfg = exp
    pooled = tmp / "pooled.ini"
    pooled.write_text(
        CONFIG.replace(
            "test = synthetic:smooth:n=8:seed=2",
            "test = synthetic:smooth:n=8:seed=2 + synthetic:textured:n=4:seed=3",
        )
    )
    run("train", pooled, "--out-dir", tmp / "run")
    run("score", pooled, "--checkpoint", tmp / "run" / "model.flow",
        "--dataset", "test", "--methods", "raw", "--out", tmp / "s.csv")
    assert len(ScoreTable.read(tmp / "s.csv").rows) == 12


def test_outlier_loss_without_general_model_exits_2(exp):
    tmp, cfg = exp
    text = cfg.read_text().replace("loss = nll_only", "loss = nll_plus_outlier")
    cfg2 = tmp / "exp2.ini"
    cfg2.write_text(text + "\ngeneral = synthetic:smooth:n=16:seed=9\n")
    assert run("train", cfg2, "--out-dir", tmp / "run2") == 2


def test_score_and_report(exp):
    tmp, cfg = exp
    run("train", cfg, "--out-dir", tmp / "run")
    ck = tmp / "run" / "model.flow"
    assert run("score", cfg, "--checkpoint", ck, "--dataset", "test",
               "--methods", "raw,last_scale", "--out", tmp / "in.csv") == 0
    assert run("score", cfg, "--checkpoint", ck, "--dataset", "outliers",
               "--methods", "raw,last_scale", "--out", tmp / "out.csv") == 0
    table = ScoreTable.read(tmp / "in.csv")
    assert table.fieldnames == ["id", "raw", "last_scale"]
    assert len(table.rows) == 8

    rep = tmp / "rep.ini"
    rep.write_text(
        CONFIG
        + "\n[report]\npair_a = in.csv out.csv raw\n"
        + "spearman_a = in.csv#raw in.csv#last_scale\n"
        + "bpd_a = in.csv raw 64\n"
    )
    assert run("report", rep, "--out", tmp / "report.txt") == 0
    lines = [l for l in (tmp / "report.txt").read_text().splitlines() if not l.startswith("#")]
    kinds = {l.split("\t")[0] for l in lines}
    assert kinds == {"auroc", "spearman", "bpd"}
    auc_line = next(l for l in lines if l.startswith("auroc"))
    value = float(auc_line.split("\t")[-1])
    assert 0.0 <= value <= 100.0
    assert "." in auc_line.split("\t")[-1]  # one-decimal percent formatting


def test_report_separated_and_identical_tables(tmp_path):
    sep_in = ScoreTable(["id", "raw"])
    sep_out = ScoreTable(["id", "raw"])
    rng = np.random.default_rng(3)
    for i in range(200):
        sep_in.append(id=str(i), raw=10.0 + rng.random())
        sep_out.append(id=str(i), raw=rng.random())
    sep_in.write(tmp_path / "in.csv")
    sep_out.write(tmp_path / "out.csv")
    cfg = tmp_path / "rep.ini"
    cfg.write_text(
        "[model]\nseed = 1\n[report]\n"
        "pair_sep = in.csv out.csv raw\n"
        "pair_same = in.csv in.csv raw\n"
    )
    assert run("report", cfg, "--out", tmp_path / "r.txt") == 0
    lines = [l.split("\t") for l in (tmp_path / "r.txt").read_text().splitlines()
             if l.startswith("auroc")]
    values = {l[1]: float(l[3]) for l in lines}
    assert values["pair_sep"] == 100.0
    assert 45.0 <= values["pair_same"] <= 55.0


def test_report_rerun_identical(exp):
    tmp, cfg = exp
    run("train", cfg, "--out-dir", tmp / "run")
    ck = tmp / "run" / "model.flow"
    run("score", cfg, "--checkpoint", ck, "--dataset", "test", "--methods", "raw",
        "--out", tmp / "in.csv")
    rep = tmp / "rep.ini"
    rep.write_text(CONFIG + "\n[report]\nbpd_a = in.csv raw 64\n")
    run("report", rep, "--out", tmp / "r1.txt")
    run("report", rep, "--out", tmp / "r2.txt")
    assert (tmp / "r1.txt").read_text() == (tmp / "r2.txt").read_text()


def test_score_ratio_without_general_checkpoint_exits_2(exp):
    tmp, cfg = exp
    run("train", cfg, "--out-dir", tmp / "run")
    code = run("score", cfg, "--checkpoint", tmp / "run" / "model.flow",
               "--dataset", "test", "--methods", "ratio")
    assert code == 2


def test_score_ratio_matches_two_raw_runs(exp):
    tmp, cfg = exp
    run("train", cfg, "--out-dir", tmp / "run")
    ck = tmp / "run" / "model.flow"
    cfg2 = tmp / "exp_ratio.ini"
    cfg2.write_text(CONFIG + f"\ngeneral_checkpoint = {ck}\n")
    # [eval] section is last in CONFIG, so the appended key lands there
    run("score", cfg2, "--checkpoint", ck, "--dataset", "test",
        "--methods", "raw,ratio", "--out", tmp / "s.csv")
    table = ScoreTable.read(tmp / "s.csv")
    # general model == in model here, so ratio must be exactly zero
    assert all(v == 0.0 for v in table.column("ratio"))


def test_decompose_check_row(exp):
    tmp, cfg = exp
    run("train", cfg, "--out-dir", tmp / "run")
    assert run("decompose", cfg, "--checkpoint", tmp / "run" / "model.flow",
               "--dataset", "test", "--out", tmp / "dec.csv") == 0
    table = ScoreTable.read(tmp / "dec.csv")
    check = [r for r in table.rows if r["id"] == "check_max_abs_sum_minus_total"]
    assert len(check) == 1
    assert float(check[0]["total"]) < 1e-6
    data_rows = [r for r in table.rows if r["id"] != "check_max_abs_sum_minus_total"]
    assert len(data_rows) == 8
    for r in data_rows:
        assert abs(float(r["c_1"]) + float(r["c_2"]) - float(r["total"])) < 1e-6


def test_single_scale_model_rejects_scale_commands(tmp_path):
    cfg = tmp_path / "local.ini"
    cfg.write_text(
        CONFIG.replace("variant = conv", "variant = local_patch")
        .replace("scales = 2", "scales = 1")
        .replace("input_shape = 1x8x8", "input_shape = 1x16x16")
    )
    run("train", cfg, "--out-dir", tmp_path / "run")
    ck = str(tmp_path / "run" / "model.flow")
    assert main(["decompose", str(cfg), "--checkpoint", ck, "--dataset", "test"]) == 2
    assert main(["score", str(cfg), "--checkpoint", ck, "--dataset", "test",
                 "--methods", "last_scale"]) == 2


def test_mix_all_scales_reconstructs_b(exp):
    tmp, cfg = exp
    run("train", cfg, "--out-dir", tmp / "run")
    ck = tmp / "run" / "model.flow"
    assert run("mix", cfg, "--checkpoint", ck, "--dataset", "test", "--index-a", "0",
               "--index-b", "1", "--scales", "1,2", "--out", tmp / "mix.pgm") == 0
    from flowad.data import gen_synthetic

    expected = gen_synthetic("smooth", 8, (1, 8, 8), seed=2).images[1]
    pixels = _read_pgm(tmp / "mix.pgm")
    np.testing.assert_array_equal(pixels, expected[0])


def test_mix_no_scales_reconstructs_a(exp):
    tmp, cfg = exp
    run("train", cfg, "--out-dir", tmp / "run")
    ck = tmp / "run" / "model.flow"
    run("mix", cfg, "--checkpoint", ck, "--dataset", "test", "--index-a", "0",
        "--index-b", "1", "--scales", "", "--out", tmp / "mix.pgm")
    from flowad.data import gen_synthetic

    expected = gen_synthetic("smooth", 8, (1, 8, 8), seed=2).images[0]
    np.testing.assert_array_equal(_read_pgm(tmp / "mix.pgm"), expected[0])


def test_finetune_starts_from_checkpoint(exp):
    tmp, cfg = exp
    run("train", cfg, "--out-dir", tmp / "base")
    text = CONFIG.replace("epochs = 1", "epochs = 0")
    marker = "[train]"
    text = text.replace(marker, f"{marker}\nfinetune_from = base/model.flow")
    cfg2 = tmp / "ft.ini"
    cfg2.write_text(text)
    assert run("train", cfg2, "--out-dir", tmp / "ft") == 0
    from flowad.checkpoint import load_model

    base = load_model(tmp / "base" / "model.flow")
    ft = load_model(tmp / "ft" / "model.flow")
    for a, b in zip(base.parameters(), ft.parameters()):
        np.testing.assert_array_equal(a.value.data, b.value.data)


def test_optimize_latents_command(exp):
    tmp, cfg = exp
    run("train", cfg, "--out-dir", tmp / "run")
    ck = tmp / "run" / "model.flow"
    assert run("optimize-latents", cfg, "--checkpoint", ck, "--dataset", "test",
               "--index", "0", "--steps", "3", "--step-size", "0.02",
               "--out", tmp / "opt.pgm") == 0
    text = (tmp / "opt.pgm").read_text()
    start = float(next(l for l in text.splitlines() if "log_prob_start" in l).split("=")[1])
    end = float(next(l for l in text.splitlines() if "log_prob_end" in l).split("=")[1])
    assert end >= start


def _read_pgm(path):
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    assert lines[0] == "P2"
    w, h = map(int, lines[1].split())
    vals = " ".join(lines[3:]).split()
    return np.array([int(v) for v in vals], dtype=np.uint8).reshape(h, w)
