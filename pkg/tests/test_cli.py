import subprocess
import sys

import numpy as np
import pytest

from zeroshot_od.cli import build_parser, main
from zeroshot_od.dataio import read_scores

TINY_TRAIN = ["--epochs", "2", "--steps-per-epoch", "2", "--batch-datasets", "1",
              "--unique-per-epoch", "1", "--periodicity", "1", "--context-min", "10",
              "--context-max", "30", "--samples-per-class", "40", "--max-dims", "3",
              "--num-layers", "1", "--hidden", "16", "--heads", "2", "--routers", "4"]


def snapshot(directory):
    return {p.relative_to(directory): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    assert main(["synth", "--D", "3", "--M", "2", "--S", "60", "--count", "2", "--seed", "4",
                 "--out-dir", str(root / "data")]) == 0
    assert main(["pretrain", *TINY_TRAIN, "--seed", "1", "--out", str(root / "m.ckpt")]) == 0
    return root


def test_synth_files_and_determinism(tmp_path):
    args = ["synth", "--D", "5", "--M", "2", "--S", "30", "--count", "3", "--seed", "2"]
    assert main(args + ["--out-dir", str(tmp_path / "a")]) == 0
    assert main(args + ["--out-dir", str(tmp_path / "b"), "--threads", "2"]) == 0
    a = snapshot(tmp_path / "a")
    assert sorted(map(str, a)) == [f"dataset_0000{i}.{ext}" for i in range(3) for ext in ("csv", "meta.json")]
    assert a == snapshot(tmp_path / "b")


def test_synth_count_zero(tmp_path):
    assert main(["synth", "--count", "0", "--out-dir", str(tmp_path / "z")]) == 0
    assert snapshot(tmp_path / "z") == {}


@pytest.mark.parametrize("args", [["--alpha", "1.5"], ["--D", "0"], ["--S", "0"]])
def test_synth_validation(tmp_path, args):
    assert main(["synth", *args, "--out-dir", str(tmp_path)]) == 2


def test_transform_keeps_labels(tmp_path, trained):
    src = trained / "data" / "dataset_00000.csv"
    assert main(["transform", "--input", str(src), "--mode", "full", "--out", str(tmp_path / "t.csv")]) == 0
    a = src.read_text().splitlines()
    b = (tmp_path / "t.csv").read_text().splitlines()
    assert [r.rsplit(",", 1)[1] for r in a] == [r.rsplit(",", 1)[1] for r in b]
    assert a != b


def test_pretrain_epochs_zero_is_validation_error(tmp_path, capsys):
    assert main(["pretrain", "--epochs", "0", "--out", str(tmp_path / "m.ckpt")]) == 2
    assert "epochs" in capsys.readouterr().err


def test_pretrain_unknown_config_field(tmp_path):
    (tmp_path / "c.json").write_text('{"epochz": 3}')
    assert main(["pretrain", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "m")]) == 2


def test_pretrain_outputs_and_resume(tmp_path, trained):
    assert (trained / "m.ckpt").exists() and (trained / "m.last.ckpt").exists()
    lines = (trained / "m.loss.csv").read_text().splitlines()
    assert lines[0] == "step,epoch,loss" and len(lines) == 5
    # Config file plus a flag override; flags win.
    (tmp_path / "c.cfg").write_text("epochs = 9\nseed = 1\n")
    out = tmp_path / "r.ckpt"
    assert main(["pretrain", "--config", str(tmp_path / "c.cfg"), *TINY_TRAIN[:-0 or None],
                 "--epochs", "3", "--resume", str(trained / "m.last.ckpt"), "--out", str(out)]) == 0
    lines = (tmp_path / "r.loss.csv").read_text().splitlines()
    assert lines[1].startswith("5,3,") and len(lines) == 3


def test_pretrain_is_deterministic(tmp_path, trained):
    assert main(["pretrain", *TINY_TRAIN, "--seed", "1", "--out", str(tmp_path / "m.ckpt")]) == 0
    assert (tmp_path / "m.ckpt").read_bytes() == (trained / "m.ckpt").read_bytes()
    assert (tmp_path / "m.loss.csv").read_bytes() == (trained / "m.loss.csv").read_bytes()


def test_score_without_labels(tmp_path, trained, capsys):
    test_csv = tmp_path / "test.csv"
    rows = (trained / "data" / "dataset_00000.csv").read_text().splitlines()
    test_csv.write_text("\n".join(r.rsplit(",", 1)[0] for r in rows) + "\n")
    args = ["score", "--ckpt", str(trained / "m.ckpt"), "--train", str(trained / "data" / "dataset_00000.csv"),
            "--test", str(test_csv), "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a.csv")]) == 0
    assert "ms/sample" in capsys.readouterr().out
    assert main(args + ["--out", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert len(read_scores(tmp_path / "a.csv")) == len(rows) - 1


def test_score_malformed_row(tmp_path, trained, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("f0,f1,f2\n" + "0.1,0.2,0.3\n" * 6 + "0.1,oops,0.3\n")
    code = main(["score", "--ckpt", str(trained / "m.ckpt"), "--train", str(bad), "--test", str(bad),
                 "--out", str(tmp_path / "s.csv")])
    assert code == 2 and "row 7" in capsys.readouterr().err


def test_score_missing_checkpoint(tmp_path, trained):
    data = str(trained / "data" / "dataset_00000.csv")
    assert main(["score", "--ckpt", str(tmp_path / "none"), "--train", data, "--test", data,
                 "--out", str(tmp_path / "s.csv")]) == 3


def _eval_layout(root, methods, datasets, seed=0):
    rng = np.random.default_rng(seed)
    for d in datasets:
        labels = np.r_[np.zeros(10, int), np.ones(5, int)]
        (root / "labels").mkdir(parents=True, exist_ok=True)
        (root / "labels" / f"{d}.csv").write_text("f0,label\n" + "".join(f"0.0,{y}\n" for y in labels))
        base = rng.random(15)
        for m in methods:
            (root / "scores" / m).mkdir(parents=True, exist_ok=True)
            s = base if m.startswith("same") else rng.random(15) + labels
            (root / "scores" / m / f"{d}.csv").write_text(
                "row_index,p_outlier\n" + "".join(f"{i},{float(v)!r}\n" for i, v in enumerate(s)))


def test_eval_one_method_one_dataset(tmp_path):
    _eval_layout(tmp_path, ["m"], ["d"])
    assert main(["eval", "--scores", str(tmp_path / "scores"), "--labels", str(tmp_path / "labels"),
                 "--out", str(tmp_path / "out")]) == 0
    metrics = (tmp_path / "out" / "metrics.csv").read_text().splitlines()
    assert len(metrics) == 2 and metrics[1].startswith("d,m,")
    ranks = (tmp_path / "out" / "ranks.csv").read_text().splitlines()[1].split(",")
    assert ranks[1:4] == ["1.0", "1.0", "1.0"]
    assert {p.name for p in (tmp_path / "out").iterdir()} == {"metrics.csv", "ranks.csv", "pvalues.csv",
                                                               "profile.csv"}


def test_eval_identical_methods_and_byte_identical(tmp_path):
    _eval_layout(tmp_path, ["same_a", "same_b", "z"], ["d1", "d2", "d3"])
    args = ["eval", "--scores", str(tmp_path / "scores"), "--labels", str(tmp_path / "labels")]
    assert main(args + ["--out", str(tmp_path / "o1")]) == 0
    assert main(args + ["--out", str(tmp_path / "o2")]) == 0
    assert snapshot(tmp_path / "o1") == snapshot(tmp_path / "o2")
    rows = [r.split(",") for r in (tmp_path / "o1" / "pvalues.csv").read_text().splitlines()]
    assert rows[0] == ["method", "same_a", "same_b", "z"]
    assert rows[1][2] == "1.0" and rows[2][1] == "1.0"


def test_eval_missing_labels(tmp_path, capsys):
    _eval_layout(tmp_path, ["m"], ["d"])
    (tmp_path / "labels" / "d.csv").unlink()
    assert main(["eval", "--scores", str(tmp_path / "scores"), "--labels", str(tmp_path / "labels"),
                 "--out", str(tmp_path / "out")]) == 3
    assert "missing label file" in capsys.readouterr().err


def test_bench_single_trial(tmp_path, capsys):
    assert main(["bench-attention", "--router", "4", "--router", "dense", "--context", "20", "40",
                 "--trials", "1", "--hidden", "16", "--out", str(tmp_path / "b.csv")]) == 0
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "mode,n,millis" and [l.split(",")[:2] for l in lines[1:]] == [
        ["router", "20"], ["router", "40"], ["dense", "20"], ["dense", "40"]]
    assert main(["bench-attention", "--context", "0"]) == 2
    assert main(["bench-attention", "--router", "abc", "--context", "5"]) == 2


@pytest.mark.parametrize("sub", ["synth", "transform", "pretrain", "score", "eval", "bench-attention"])
def test_help_for_every_subcommand(sub, capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args([sub, "--help"])
    assert exc.value.code == 0 and "--threads" in capsys.readouterr().out


def test_threads_env_default(monkeypatch):
    monkeypatch.setenv("ZEROSHOT_OD_THREADS", "3")
    assert build_parser().parse_args(["eval", "--scores", "a", "--labels", "b", "--out", "c"]).threads == 3


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "zeroshot_od", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "bench-attention" in out.stdout
