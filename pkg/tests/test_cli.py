import csv
import json

import pytest

from georecon.cli import main

TINY = """\
num_layers = 1
embedding_dimension = 8
num_rbf = 6
max_z = 10
decoder_depth = 2
batch_size = 2
lr_warmup_steps = 1
lr_cosine_length = 10
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY)
    assert main(["synth", "--seed", "7", "--n", "10", "--atoms", "3,5", "--out", str(root / "corpus.xyz")]) == 0
    assert main(["pretrain", "--config", str(root / "tiny.cfg"), "--dataset", str(root / "corpus.xyz"),
                 "--steps", "4", "--out", str(root / "run")]) == 0
    return root


def base(ws, *extra):
    return ["--config", str(ws / "tiny.cfg"), "--dataset", str(ws / "corpus.xyz"), *extra]


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_no_arguments_is_usage_error(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_bad_arguments_are_usage_errors():
    assert main(["pretrain", "--weights", "1,2"]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["probe-lipschitz", "--steps", "a,b"]) == 1


def test_runtime_errors_exit_2(tmp_path):
    assert main(["pretrain", "--dataset", str(tmp_path / "missing.xyz"), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("learning_rate = 1\n")
    assert main(["pretrain", "--config", str(bad), "--out", str(tmp_path)]) == 2


def test_pretrain_outputs(workspace):
    run = workspace / "run"
    assert (run / "final.ckpt").exists()
    assert len(read_csv(run / "loss.csv")) == 5
    manifest = json.loads((run / "pretrain.json").read_text())
    assert manifest["command"] == "pretrain" and manifest["config"]["embedding_dimension"] == 8


def test_probe_commands(workspace):
    ckpt = str(workspace / "run" / "final.ckpt")
    out = workspace / "probes"
    assert main(["probe-lipschitz", *base(workspace), "--checkpoint", ckpt, "--steps", "2,3",
                 "--split", "all", "--max-molecules", "3", "--out", str(out)]) == 0
    table = read_csv(out / "lipschitz_table.csv")
    assert table[0] == ["stat", "steps_2", "steps_3"] and [r[0] for r in table[1:]] == ["median", "p95"]
    assert main(["probe-heatmap", *base(workspace), "--checkpoint", ckpt, "--atom", "1", "--resolution", "3",
                 "--out", str(out)]) == 0
    cells = read_csv(out / "heatmap.csv")[1:]
    assert len(cells) == 9 and float(cells[4][2]) == 0.0
    assert main(["probe-linear", *base(workspace), "--checkpoint", ckpt, "--steps", "5", "--out", str(out)]) == 0
    assert read_csv(out / "probe_mae.csv")[0] == ["epoch", "mae", "w_norm"]
    assert main(["probe-ntk", *base(workspace), "--checkpoint", ckpt, "--steps", "3", "--batch", "2",
                 "--out", str(out)]) == 0
    assert read_csv(out / "ntk.csv")[0] == ["step_range", "pred_cosine", "grad_alignment"]


def test_finetune_and_ablate(workspace):
    ckpt = str(workspace / "run" / "final.ckpt")
    out = workspace / "ft"
    assert main(["finetune", *base(workspace), "--checkpoint", ckpt, "--steps", "3", "--out", str(out)]) == 0
    assert (out / "finetuned.ckpt").exists() and read_csv(out / "finetune_mae.csv")[0] == ["epoch", "mae"]
    assert main(["ablate", *base(workspace), "--steps", "2", "--finetune-steps", "1",
                 "--grid", "lambda=1.0,1.5;decoder_depth=2,3", "--out", str(out)]) == 0
    rows = read_csv(out / "ablation.csv")
    assert len(rows) == 5 and len(rows[0]) == 6


def test_verify_score_command(tmp_path):
    assert main(["verify-score", "--steps", "20", "--out", str(tmp_path)]) == 0
    assert "cosine_mean" in json.loads((tmp_path / "score.json").read_text())
