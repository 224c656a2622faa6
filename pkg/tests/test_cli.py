import subprocess
import sys

import pytest

from rcl.cli import main
from rcl.data import read_dataset

TINY_INI = """\
[dataset]
num_classes = 3
max_count = 40
imbalance_factor = 10.0
test_per_class = 10

[train]
epochs = 3
batch_size = 32
hidden_dim = 8
feat_dim = 6
embed_dim = 4

[experiment]
combinations = LC, LC+SCL+BCL, LC+SCL+BCL+RCL
seeds = 1
"""


@pytest.fixture
def ini(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI)
    return path


def test_gen_data(tmp_path, ini):
    out = tmp_path / "data"
    assert main(["gen-data", "--config", str(ini), "--out", str(out)]) == 0
    train = read_dataset(out / "train.txt")
    assert train.class_counts.tolist() == [40, 13, 4]
    assert read_dataset(out / "test.txt").class_counts.tolist() == [10, 10, 10]
    assert main(["gen-data", "--config", str(ini), "--out", str(out)]) == 1
    assert main(["gen-data", "--config", str(ini), "--out", str(out), "--overwrite"]) == 0


def test_train_eval_export_compare(tmp_path, ini, capsys):
    runs = tmp_path / "runs"
    common = ["--config", str(ini), "--out", str(runs), "--seed", "2"]
    assert main(["train", "--combination", "LC+SCL+BCL", *common]) == 0
    assert main(["train", "--combination", "LC+SCL+BCL+RCL", *common]) == 0
    out = capsys.readouterr().out
    assert "harmonic_mean = " in out
    a, b = runs / "LC_SCL_BCL" / "seed-2", runs / "LC_SCL_BCL_RCL" / "seed-2"

    assert main(["eval", str(b), "--out", str(tmp_path / "m.txt")]) == 0
    assert (tmp_path / "m.txt").read_text() == (b / "metrics.txt").read_text()

    assert main(["export-embeddings", str(b), "--out", str(tmp_path / "e.txt")]) == 0
    assert (tmp_path / "e.txt").read_text() == (b / "embeddings.txt").read_text()
    assert main(["export-embeddings", str(b), "--out", str(tmp_path / "tr.txt"),
                 "--split", "train", "--layer", "feature"]) == 0
    assert len((tmp_path / "tr.txt").read_text().splitlines()) == 57

    assert main(["compare", str(a), str(b), "--out", str(tmp_path / "c.txt")]) == 0
    assert "delta_chi = " in (tmp_path / "c.txt").read_text()


def test_train_refuses_existing(tmp_path, ini):
    args = ["train", "--combination", "LC", "--config", str(ini), "--out", str(tmp_path)]
    assert main(args) == 0
    assert main(args) == 1
    assert main([*args, "--overwrite"]) == 0


def test_ablate(tmp_path, ini, capsys):
    assert main(["ablate", "--config", str(ini), "--out", str(tmp_path)]) == 0
    table = capsys.readouterr().out
    assert len(table.splitlines()) == 5
    assert (tmp_path / "ablation.csv").exists()
    # a second run without --overwrite records failed cells and exits 2
    assert main(["ablate", "--config", str(ini), "--out", str(tmp_path)]) == 2


def test_strict_flag_recorded(tmp_path, ini):
    assert main(["train", "--combination", "LC+SCL", "--config", str(ini), "--out",
                 str(tmp_path), "--strict-paper"]) == 0
    text = (tmp_path / "LC_SCL" / "seed-0" / "config.ini").read_text()
    assert "strict_paper = true" in text and "invert = true" in text


@pytest.mark.parametrize("argv", [
    ["train", "--combination", "SCL"],
    ["train", "--config", "/nonexistent.ini"],
])
def test_config_errors_exit_1(argv, tmp_path):
    assert main([*argv, "--out", str(tmp_path)]) == 1


@pytest.mark.parametrize("argv", [["bogus"], [], ["train", "--threads", "two"]])
def test_parse_errors_exit_1(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 1


def test_usage_error_exit_code():
    proc = subprocess.run([sys.executable, "-m", "rcl", "bogus"], capture_output=True)
    assert proc.returncode == 1


def test_unknown_config_key(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[loss]\ntempreature = 0.2\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 1


def test_eval_missing_run(tmp_path):
    assert main(["eval", str(tmp_path / "none")]) == 1

