import json
import subprocess
import sys

import pytest

from attnatlas.cli import run
from attnatlas.encoder import read_checkpoint
from attnatlas.formats import read_attention_dump, read_pgm

pytestmark = pytest.mark.slow

SMALL = ["--layers", "2", "--heads", "2", "--d-model", "16", "--d-ff", "32"]


def first_json(out):
    return json.loads(out.splitlines()[0])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Datasets plus a pretrained and a fine-tuned small checkpoint."""
    d = tmp_path_factory.mktemp("cli")
    o = ["--out", str(d), "--no-figures"]
    assert run(["gen-data", "--task", "pair", "--n", "40", "--name", "train.jsonl"] + o) == 0
    assert run(["gen-data", "--task", "pair", "--n", "20", "--name", "test.jsonl", "--seed", "1"] + o) == 0
    assert run(["gen-data", "--task", "single", "--n", "20"] + o) == 0
    assert run(["gen-data", "--task", "relations", "--n", "60", "--filter"] + o) == 0
    assert run(["pretrain", "--n-examples", "16", "--epochs", "1", "--batch", "8"] + SMALL + o) == 0
    assert run(["finetune", "--init", str(d / "pretrained.ckpt"), "--train", str(d / "train.jsonl"),
                "--eval", str(d / "test.jsonl"), "--epochs", "1"] + o) == 0
    return d


def test_no_args_is_usage_error(capsys):
    assert run([]) == 1
    assert "usage" in capsys.readouterr().err


def test_module_entry_point_exit_code():
    proc = subprocess.run([sys.executable, "-m", "attnatlas"], capture_output=True, text=True)
    assert proc.returncode == 1 and "usage" in proc.stderr


def test_bad_flag_is_usage_error(capsys):
    assert run(["patterns", "--bogus"]) == 1


def test_config_precedence(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 5, "grammar": {"negation_prob": 0.9, "corruption_rate": 0.2}}))
    monkeypatch.setenv("ATNATLAS_OUT", str(tmp_path / "env"))
    assert run(["gen-data", "--task", "single", "--n", "3", "--config", str(cfg), "--negation-prob", "0.3"]) == 0
    resolved = first_json(capsys.readouterr().out)
    assert resolved["seed"] == 5 and resolved["hyper"]["epochs"] == 3
    assert resolved["grammar"]["negation_prob"] == 0.3 and resolved["grammar"]["corruption_rate"] == 0.2
    assert resolved["out"] == str(tmp_path / "env")
    assert (tmp_path / "env" / "single.jsonl").exists()


def test_bad_config_is_data_error(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"n_layer": 3}}))
    assert run(["gen-data", "--task", "single", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_missing_file_is_data_error(tmp_path, capsys):
    assert run(["patterns", "--ckpt", str(tmp_path / "nope.ckpt"), "--data", "x", "--out", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err


def test_corrupt_checkpoint_is_data_error(tmp_path, workdir):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes((workdir / "pretrained.ckpt").read_bytes()[:-3])
    assert run(["evaluate", "--ckpt", str(bad), "--data", str(workdir / "test.jsonl"), "--out", str(tmp_path)]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exit_code(tmp_path, workdir):
    assert run(["finetune", "--random-init", "--train", str(workdir / "train.jsonl"), "--lr", "1e308",
                "--epochs", "2", "--out", str(tmp_path)] + SMALL) == 3


def test_pretrain_and_finetune_outputs(workdir):
    assert read_checkpoint(workdir / "pretrained.ckpt").label == "pretrained"
    assert read_checkpoint(workdir / "finetuned.ckpt").label == "finetuned"
    info = json.loads((workdir / "pretrain.json").read_text())
    assert 0 <= info["heldout_mlm_accuracy"] <= 1
    assert (workdir / "finetune_log.csv").read_text().startswith("step,loss,metric")


def test_evaluate_with_ablation(workdir, tmp_path):
    args = ["evaluate", "--ckpt", str(workdir / "finetuned.ckpt"), "--data", str(workdir / "test.jsonl"),
            "--out", str(tmp_path)]
    assert run(args + ["--ablate", "0:1,1:0", "--ablate-layer", "1"]) == 0
    result = json.loads((tmp_path / "evaluate.json").read_text())
    assert result["ablated"] == [[0, 1], [1, 0], [1, 1]]
    assert run(args + ["--ablate", "5:0"]) == 2
    assert run(args + ["--ablate", "x"]) == 2


def test_dump_attn(workdir, tmp_path):
    args = ["dump-attn", "--ckpt", str(workdir / "finetuned.ckpt"), "--data", str(workdir / "test.jsonl"),
            "--out", str(tmp_path)]
    assert run(args + ["--range", "2:4", "--pgm", "--ablate", "1:1"]) == 0
    header, tensors = read_attention_dump(tmp_path / "attention.bin")
    assert header["examples"] == [2, 3] and len(tensors) == 2
    assert (tensors[0][1, 1] == 1.0 / tensors[0].shape[-1]).all()
    pgm = read_pgm(tmp_path / "attn_ex2_l1_h1.pgm")
    assert pgm.shape == tensors[0].shape[-2:]
    assert run(args + ["--index", "99"]) == 2


def test_analysis_commands_write_reports(workdir, tmp_path):
    ck, test = str(workdir / "finetuned.ckpt"), str(workdir / "test.jsonl")
    o = ["--out", str(tmp_path)]
    assert run(["patterns", "--ckpt", ck, "--data", test] + o) == 0
    assert run(["probe-relations", "--ckpt", ck, "--data", str(workdir / "relations.jsonl")] + o) == 0
    assert run(["compare", "--ckpt-a", str(workdir / "pretrained.ckpt"), "--ckpt-b", ck, "--data", test] + o) == 0
    assert run(["feature-attn", "--ckpt", ck, "--data", test, "--feature", "sep"] + o) == 0
    assert run(["feature-attn", "--ckpt", ck, "--data", test, "--feature", "role:NOUN"] + o) == 0
    assert run(["cls-profile", "--ckpt", ck, "--data", test] + o) == 0
    assert run(["ablate-heads", "--ckpt", ck, "--data", test, "--limit", "10"] + o) == 0
    assert run(["ablate-layers", "--ckpt", ck, "--data", test, "--metric", "f1"] + o) == 0
    for name in ("patterns.csv", "patterns_per_head.csv", "relation_scores.csv", "relation_heads.json",
                 "cosine.csv", "cosine.json", "feature_sep.csv", "feature_noun.csv", "cls_profile.csv",
                 "ablate_heads.csv", "ablate_heads.json", "ablate_layers.csv"):
        assert (tmp_path / name).stat().st_size > 0, name
    for fig in ("patterns.png", "relation_scores.png", "cosine.png", "feature_sep.png", "cls_profile.png",
                "ablate_heads.png", "ablate_layers.png"):
        assert (tmp_path / fig).read_bytes()[:4] == b"\x89PNG", fig
    assert len(json.loads((tmp_path / "cosine.json").read_text())["layer_means"]) == 2


def test_feature_file_and_missing_feature(workdir, tmp_path):
    (tmp_path / "neg.txt").write_text("neg0\nneg1\nneg2\nneg3\nneg4\nneg5\n")
    base = ["feature-attn", "--ckpt", str(workdir / "finetuned.ckpt"), "--out", str(tmp_path)]
    assert run(base + ["--data", str(workdir / "single.jsonl"), "--feature-file", str(tmp_path / "neg.txt")]) == 0
    # [MASK] never occurs in generated data
    (tmp_path / "none.txt").write_text("2\n")
    assert run(base + ["--data", str(workdir / "test.jsonl"), "--feature-file", str(tmp_path / "none.txt")]) == 2
    assert run(base + ["--data", str(workdir / "test.jsonl"), "--feature", "banana"]) == 2


def test_reports_deterministic(workdir, tmp_path):
    for sub in ("a", "b"):
        assert run(["ablate-heads", "--ckpt", str(workdir / "finetuned.ckpt"), "--data", str(workdir / "test.jsonl"),
                    "--out", str(tmp_path / sub)]) == 0
    for name in ("ablate_heads.csv", "ablate_heads.json", "ablate_heads.png"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
