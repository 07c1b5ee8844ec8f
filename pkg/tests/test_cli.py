import csv
import subprocess
import sys

import pytest

from gaitfusion.checkpoint import checkpoint_load
from gaitfusion.cli import ABLATION_GRID, main
from gaitfusion.config import ConfigError, parse_run_config

TINY = """
[data]
num_ids = 3
seqs_per_id = 4
frames = 4

[model]
variant = ++
stem = 2
widths = 2, 2, 4, 4
parts = 4
embed_dim = 4

[train]
batch = 2, 2, 2
total_steps = 2
seed = 3

[eval]
gallery_conditions = NM
probe_conditions = NM, BG
"""


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY)
    assert main(["synth", "--spec", str(cfg), "--out", str(root / "data"), "--seed", "1"]) == 0
    return root, cfg


def test_pipeline(tiny, capsys):
    root, cfg = tiny
    assert (root / "data" / "manifest.tsv").exists()
    out = root / "run"
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(out)]) == 0
    echoed = capsys.readouterr().out
    assert "num_classes = 3" in echoed and "weight_decay" in echoed and "[eval]" in echoed
    assert (out / "config.ini").read_text() in echoed
    assert (out / "train_log.csv").read_text().startswith("step,lr,triplet_loss,softmax_loss\n")
    model, step, _ = checkpoint_load(out / "model.gfck")
    assert step == 2 and model.config.widths == (2, 2, 4, 4)
    report = root / "report.csv"
    assert main(["eval", "--checkpoint", str(out / "model.gfck"), "--data", str(root / "data"),
                 "--protocol", str(cfg), "--out", str(report), "--embeddings", str(root / "emb.gfck")]) == 0
    rows = list(csv.reader(report.open()))
    assert rows[0] == ["condition", "rank1", "rank5", "map", "minp", "skipped"]
    assert [r[0] for r in rows[1:]] == ["NM", "BG", "overall"]
    assert (root / "emb.gfck").exists()


def test_train_resolved_config_reparses(tiny, tmp_path):
    root, cfg = tiny
    main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(tmp_path)])
    again = parse_run_config((tmp_path / "config.ini").read_text(), "resolved")
    assert again.to_ini(3) == (tmp_path / "config.ini").read_text()


def test_ablate_writes_seven_cells(tiny, tmp_path):
    root, cfg = tiny
    assert main(["ablate", "--config", str(cfg), "--data", str(root / "data"), "--out", str(tmp_path)]) == 0
    rows = list(csv.reader((tmp_path / "ablation.csv").open()))
    assert rows[0] == ["location", "mechanism", "rank1_NM", "rank1_BG", "rank1_overall"]
    assert len(rows) - 1 == 7 == len(ABLATION_GRID)
    assert {(r[0], r[1]) for r in rows[1:]} == set(ABLATION_GRID)


def test_gradcheck_exits_zero(capsys):
    assert main(["gradcheck"]) == 0
    assert "gradient checks passed" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [[], ["bogus"], ["train", "--config", "x"], ["gradcheck", "--nope"],
                                  ["synth", "--spec", "a", "--out", "b", "--seed", "x"]])
def test_usage_errors_exit_one(argv):
    assert main(argv) == 1


@pytest.mark.parametrize("text", ["[model]\nvariantt = s\n", "[nonsense]\n", "[train]\nbatch = 1, x\n",
                                  "[model]\nvariant = s+x\n", "[data]\nmode = odd\n"])
def test_config_errors_exit_one(text, tmp_path):
    cfg = tmp_path / "bad.ini"
    cfg.write_text(text)
    assert main(["synth", "--spec", str(cfg), "--out", str(tmp_path / "d")]) == 1


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="variantt"):
        parse_run_config("[model]\nvariantt = s\n", "inline")


def test_runtime_failures_exit_two(tmp_path, tiny):
    root, cfg = tiny
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.gfck"), "--data", str(root / "data"),
                 "--protocol", str(cfg), "--out", str(tmp_path / "r.csv")]) == 2
    assert main(["train", "--config", str(cfg), "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 2


def test_bad_thread_setting(monkeypatch):
    monkeypatch.setenv("GAITFUSION_THREADS", "zero")
    assert main(["gradcheck"]) == 1


@pytest.mark.parametrize("command,flags", [
    ("synth", ["--spec", "--out", "--seed"]),
    ("train", ["--config", "--data", "--out", "--seed"]),
    ("eval", ["--checkpoint", "--data", "--protocol", "--out", "--embeddings"]),
    ("ablate", ["--config", "--data", "--out", "--variant", "--seed"]),
    ("gradcheck", ["--seed"]),
])
def test_help_lists_every_flag(command, flags):
    res = subprocess.run([sys.executable, "-m", "gaitfusion", command, "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for f in flags:
        assert f in res.stdout
