import json

import numpy as np

from vlpretrain.experiments import COMBOS, AblationResult, AblationScale, median_table, run_ablations
from vlpretrain.model import ModelConfig
from vlpretrain.synth import WorldSpec


def _toy_scale():
    return AblationScale(world=WorldSpec(num_images=16), pool_images=8,
                         model=ModelConfig(layers=1, hidden=16, intermediate=32, heads=2, num_visual_tokens=4),
                         pretrain_epochs=1, pretrain_batch=8, finetune_epochs=1, finetune_batch=4, group_size=4,
                         size_ratio=1, roi_counts=(2, 4), seeds=(0, 1))


def test_harness_runs_every_arm_and_writes_report(tmp_path):
    res = run_ablations(_toy_scale(), out_dir=tmp_path)
    med = res.medians()
    assert set(med["multistage"]) == {"two_stage", "merged"}
    assert set(med["finetune_loss"]) == set(COMBOS)
    assert set(med["roi_count"]) == {"o=2", "o=4"}
    # the base model's RoI arm is the binary fine-tune arm
    assert res.roi_count["o=4"] == res.finetune_loss["binary"]
    body = json.loads((tmp_path / "ablations.json").read_text())
    assert body["medians"] == med and body["scale"]["seeds"] == [0, 1]
    text = (tmp_path / "ablations.txt").read_text()
    assert "fine-tune loss combination" in text and "binary+ce+triplet" in text
    for name in ("multistage", "finetune_loss", "roi_count"):
        assert (tmp_path / f"ablation_{name}.png").stat().st_size > 0


def test_harness_is_deterministic(tmp_path):
    a = run_ablations(_toy_scale(), which=("multistage",), out_dir=tmp_path / "a")
    b = run_ablations(_toy_scale(), which=("multistage",), out_dir=tmp_path / "b")
    assert a == b
    for f in ("ablations.json", "ablations.txt", "ablation_multistage.png"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_median_table_layout():
    text = median_table({"x": [0.1, 0.3, 0.2], "longer": [0.5]}, "title")
    lines = text.splitlines()
    assert lines[0] == "title" and "0.200" in lines[2] and lines[3].startswith("longer")
    assert AblationResult().medians() == {}
    assert np.isclose(AblationResult(roi_count={"o=4": [0.1, 0.4]}).medians()["roi_count"]["o=4"], 0.25)
