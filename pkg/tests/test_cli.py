import json
import shutil
import subprocess
import sys

import pytest

from vlpretrain.cli import main


def test_no_arguments_is_usage_error(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err.lower()


@pytest.mark.parametrize("argv", [["frobnicate"], ["gen"], ["eval", "--pool", "x"], ["eval", "--pool", "p",
                                  "--checkpoint", "c", "--ks", "1,a"], ["pipeline"]])
def test_bad_usage_exits_1(argv):
    assert main(argv) == 1


def test_module_entry_point_exit_code():
    r = subprocess.run([sys.executable, "-m", "vlpretrain.cli"], capture_output=True, text=True)
    assert r.returncode == 1


def test_runtime_errors_exit_2(tmp_path, capsys):
    assert main(["eval", "--pool", str(tmp_path / "none"), "--checkpoint", str(tmp_path / "ck")]) == 2
    bad = tmp_path / "plan.json"
    bad.write_text("{not json")
    assert main(["train", "--plan", str(bad), "--out", str(tmp_path / "o")]) == 2
    bad.write_text(json.dumps({"stages": [{"name": "p", "kind": "pretrain", "datasets": ["gone"]}]}))
    assert main(["train", "--plan", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "gone" in capsys.readouterr().err


def test_tokenize(capsys):
    assert main(["tokenize", "--text", "Unable dogs"]) == 0
    assert capsys.readouterr().out.split() == ["un", "##able", "dog", "##s"]
    assert main(["tokenize", "--text", "dog", "--max-len", "4"]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "[CLS] dog [SEP] [PAD]"


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--max-coords", "2"]) == 0
    assert "max relative error" in capsys.readouterr().out


def _plan(tmp_path, small_cfg):
    plan = {
        "name": "cli", "seed": 1, "model": small_cfg.to_dict(),
        "datasets": {"ood": "data/out_of_domain", "ind": "data/in_domain"}, "eval_pool": "pool",
        "eval_ks": [1, 5],
        "stages": [
            {"name": "ood", "kind": "pretrain", "datasets": ["ood"], "batch_size": 8, "max_steps": 3},
            {"name": "ind", "kind": "pretrain", "datasets": ["ind"], "batch_size": 8, "max_steps": 3},
            {"name": "ft", "kind": "finetune", "datasets": ["ind"], "batch_size": 4, "group_size": 4,
             "max_steps": 2},
        ],
    }
    (tmp_path / "plan.json").write_text(json.dumps(plan))
    return tmp_path / "plan.json"


def test_end_to_end_gen_pipeline_train_eval(tmp_path, small_cfg, capsys):
    assert main(["gen", "--kind", "domain-pair", "--num-images", "20", "--size-ratio", "2",
                 "--out", str(tmp_path / "raw"), "--seed", "3"]) == 0
    assert main(["gen", "--kind", "pool", "--num-images", "10", "--captions-per-image", "2",
                 "--out", str(tmp_path / "pool")]) == 0
    for name in ("out_of_domain", "in_domain"):
        assert main(["pipeline", "run", "--in", str(tmp_path / "raw" / name), "--out",
                     str(tmp_path / "data" / name), "--report", str(tmp_path / f"{name}.report.json")]) == 0
    assert json.loads((tmp_path / "in_domain.report.json").read_text())["reconciles"]
    plan = _plan(tmp_path, small_cfg)
    assert main(["train", "--plan", str(plan), "--out", str(tmp_path / "run")]) == 0
    run = tmp_path / "run"
    for f in ("final.json", "final.bin", "loss_curves.png", "recall.png", "manifest.json", "summary.json"):
        assert (run / f).exists(), f
    capsys.readouterr()
    assert main(["eval", "--pool", str(tmp_path / "pool"), "--checkpoint", str(run / "final"), "--ks", "1,5",
                 "--out", str(tmp_path / "ev")]) == 0
    assert "Image Retrieval" in capsys.readouterr().out
    rows = json.loads((tmp_path / "ev" / "report.json").read_text())["rows"]
    assert {r["K"] for r in rows} == {1, 5} and (tmp_path / "ev" / "recall.png").exists()
    man = json.loads((run / "manifest.json").read_text())
    assert man["seed"] == 1 and "final.bin" in man["outputs"] and "loss_curves.png" in man["outputs"]


def test_reruns_are_byte_identical(tmp_path, small_cfg):
    def once():
        for d in ("raw", "data", "pool", "run"):
            shutil.rmtree(tmp_path / d, ignore_errors=True)
        assert main(["gen", "--kind", "domain-pair", "--num-images", "16", "--size-ratio", "1",
                     "--out", str(tmp_path / "raw")]) == 0
        assert main(["gen", "--kind", "pool", "--num-images", "8", "--out", str(tmp_path / "pool")]) == 0
        for name in ("out_of_domain", "in_domain"):
            assert main(["pipeline", "run", "--in", str(tmp_path / "raw" / name), "--out",
                         str(tmp_path / "data" / name)]) == 0
        assert main(["train", "--plan", str(_plan(tmp_path, small_cfg)), "--out", str(tmp_path / "run")]) == 0
        return {p.relative_to(tmp_path): p.read_bytes() for d in ("raw", "data", "pool", "run")
                for p in sorted((tmp_path / d).rglob("*")) if p.is_file()}

    a, b = once(), once()
    assert a.keys() == b.keys()
    assert [k for k in a if a[k] != b[k]] == []


def test_seed_flag_overrides_plan(tmp_path, small_cfg):
    assert main(["gen", "--kind", "domain-pair", "--num-images", "16", "--size-ratio", "1",
                 "--out", str(tmp_path / "data")]) == 0
    assert main(["gen", "--kind", "pool", "--num-images", "8", "--out", str(tmp_path / "pool")]) == 0
    plan = _plan(tmp_path, small_cfg)
    assert main(["train", "--plan", str(plan), "--out", str(tmp_path / "a"), "--seed", "5"]) == 0
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["seed"] == 5
    assert json.loads((tmp_path / "a" / "plan.json").read_text())["seed"] == 5
