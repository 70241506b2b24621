"""Seeded ablation runs on synthetic data: stage ordering, fine-tune losses and RoI count.

Each arm of an ablation is run once per seed.  Arms are compared by the
median over seeds of image-retrieval R@1 on an in-domain pool.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import atomic_write_text, dump_json
from .model import Model, ModelConfig
from .retrieval import IMAGE_RETRIEVAL, eval_report, recall
from .synth import DomainShift, WorldSpec, make_domain_pair, make_eval_pool
from .tokenizer import Vocab
from .trainer import Stage, StagePlan, run_plan

log = logging.getLogger(__name__)

COMBOS = {
    "binary+ce+triplet": ("binary", "ce", "triplet"),
    "ce": ("ce",),
    "triplet": ("triplet",),
    "binary": ("binary",),
}


@dataclass(frozen=True)
class AblationScale:
    world: WorldSpec = WorldSpec(num_images=600)
    pool_images: int = 100
    model: ModelConfig = ModelConfig(num_visual_tokens=12)
    pretrain_epochs: int = 16
    pretrain_lr: float = 2e-3
    pretrain_batch: int = 24
    finetune_epochs: int = 4
    finetune_lr: float = 5e-4
    finetune_batch: int = 8
    group_size: int = 8
    shift: float = 1.0
    size_ratio: int = 2
    roi_counts: tuple[int, int] = (4, 12)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


def _r1(model: Model, pool, vocab: Vocab) -> float:
    return recall(eval_report(model, pool, vocab, (1,)), IMAGE_RETRIEVAL, 1)


def _pretrain_stage(scale: AblationScale, name: str, datasets: Sequence[str], epochs: int | None = None) -> Stage:
    return Stage(name, "pretrain", tuple(datasets), epochs=epochs or scale.pretrain_epochs,
                 batch_size=scale.pretrain_batch, lr=scale.pretrain_lr)


def _finetune_stage(scale: AblationScale, combo: Sequence[str]) -> Stage:
    return Stage("finetune", "finetune", ("ind",), epochs=scale.finetune_epochs, batch_size=scale.finetune_batch,
                 lr=scale.finetune_lr, loss_combo=tuple(combo), group_size=scale.group_size)


def _domain_data(scale: AblationScale, seed: int):
    ood, ind = make_domain_pair(scale.world, DomainShift(scale.shift, scale.size_ratio), seed)
    pool = make_eval_pool(scale.world, scale.pool_images, 1, seed)
    return {"ood": ood, "ind": ind}, pool


def _with_rois(cfg: ModelConfig, o: int) -> ModelConfig:
    return replace(cfg, num_visual_tokens=o, max_seq_len=max(cfg.max_seq_len, cfg.max_text_len + o))


def two_stage_pretrain(scale: AblationScale, seed: int, corpora: dict, model_cfg: ModelConfig | None = None) -> Model:
    """Out-of-domain stage followed by an in-domain stage."""
    stages = (_pretrain_stage(scale, "ood", ["ood"]), _pretrain_stage(scale, "ind", ["ind"]))
    plan = StagePlan(stages, model_cfg or scale.model, seed=seed, name="two_stage")
    return run_plan(plan, corpora=corpora)["model"]


def multistage_vs_merged(scale: AblationScale, seed: int, keep: dict | None = None) -> dict[str, float]:
    """Zero-shot in-domain R@1 of out-of-domain -> in-domain staging versus one merged stage.

    Both arms see every pair the same number of times.  When ``keep`` is given,
    the two-stage model and the data are stored in it for later fine-tuning arms.
    """
    corpora, pool = _domain_data(scale, seed)
    vocab = Vocab.default()
    two = two_stage_pretrain(scale, seed, corpora)
    merged_plan = StagePlan((_pretrain_stage(scale, "merged", ["ood", "ind"]),), scale.model, seed=seed,
                            name="merged")
    merged = run_plan(merged_plan, corpora=corpora)["model"]
    if keep is not None:
        keep.update(model=two, corpora=corpora, pool=pool)
    return {"two_stage": _r1(two, pool, vocab), "merged": _r1(merged, pool, vocab)}


def finetune_arm(model: Model, train, pool, scale: AblationScale, combo: Sequence[str], seed: int) -> float:
    plan = StagePlan((_finetune_stage(scale, combo),), model.config, seed=seed)
    res = run_plan(plan, init=model, corpora={"ind": train})
    return _r1(res["model"], pool, Vocab.default())


def finetune_loss_ablation(scale: AblationScale, seed: int, pretrained: dict | None = None) -> dict[str, float]:
    """Fine-tuned R@1 of every loss combination, all starting from the same two-stage checkpoint."""
    if pretrained is None:
        corpora, pool = _domain_data(scale, seed)
        pretrained = {"model": two_stage_pretrain(scale, seed, corpora), "corpora": corpora, "pool": pool}
    model, train, pool = pretrained["model"], pretrained["corpora"]["ind"], pretrained["pool"]
    return {name: finetune_arm(model, train, pool, scale, combo, seed) for name, combo in COMBOS.items()}


def roi_count_ablation(scale: AblationScale, seed: int, shared: dict | None = None) -> dict[str, float]:
    """Fine-tuned R@1 (binary loss) after two-stage pre-training, for each RoI count.

    ``shared`` maps an RoI count key such as ``"o=12"`` to a result already
    computed for the same seed.
    """
    corpora, pool = _domain_data(scale, seed)
    out = {}
    for o in scale.roi_counts:
        key = f"o={o}"
        if shared and key in shared:
            out[key] = shared[key]
            continue
        model = two_stage_pretrain(scale, seed, corpora, _with_rois(scale.model, o))
        out[key] = finetune_arm(model, corpora["ind"], pool, scale, ("binary",), seed)
    return out


def median_table(results: dict[str, list[float]], title: str) -> str:
    width = max(len(k) for k in results) + 2
    lines = [title, f"{'arm':<{width}}{'median':>8}  per-seed R@1"]
    for k, v in results.items():
        lines.append(f"{k:<{width}}{np.median(v):>8.3f}  " + " ".join(f"{x:.3f}" for x in v))
    return "\n".join(lines) + "\n"


def collect(per_seed: list[dict[str, float]]) -> dict[str, list[float]]:
    keys = list(per_seed[0])
    return {k: [r[k] for r in per_seed] for k in keys}


@dataclass
class AblationResult:
    multistage: dict[str, list[float]] = field(default_factory=dict)
    finetune_loss: dict[str, list[float]] = field(default_factory=dict)
    roi_count: dict[str, list[float]] = field(default_factory=dict)

    def medians(self) -> dict[str, dict[str, float]]:
        return {name: {k: float(np.median(v)) for k, v in block.items()}
                for name, block in asdict(self).items() if block}

    def tables(self) -> str:
        parts = []
        if self.multistage:
            parts.append(median_table(self.multistage, "stage ordering (zero-shot, in-domain pool)"))
        if self.finetune_loss:
            parts.append(median_table(self.finetune_loss, "fine-tune loss combination"))
        if self.roi_count:
            parts.append(median_table(self.roi_count, "RoI count (binary fine-tune)"))
        return "\n".join(parts)


def run_ablations(scale: AblationScale, which: Sequence[str] = ("multistage", "finetune_loss", "roi_count"),
                  out_dir: Path | None = None) -> AblationResult:
    """Run the requested ablations over ``scale.seeds``.

    Per seed, the two-stage checkpoint of the ordering ablation is the starting
    point of every fine-tuning arm, and the binary arm of the loss ablation
    doubles as the base model's RoI-count arm.
    """
    res = AblationResult()
    ms, fl, rc = [], [], []
    for seed in scale.seeds:
        log.info("ablation seed %d", seed)
        keep: dict = {}
        if "multistage" in which:
            ms.append(multistage_vs_merged(scale, seed, keep))
        shared = {}
        if "finetune_loss" in which:
            fl.append(finetune_loss_ablation(scale, seed, keep or None))
            shared[f"o={scale.model.num_visual_tokens}"] = fl[-1]["binary"]
        if "roi_count" in which:
            rc.append(roi_count_ablation(scale, seed, shared))
        log.info("seed %d R@1: %s", seed, {name: rows[-1] for name, rows in
                                            (("multistage", ms), ("finetune_loss", fl), ("roi_count", rc)) if rows})
    if ms:
        res.multistage = collect(ms)
    if fl:
        res.finetune_loss = collect(fl)
    if rc:
        res.roi_count = collect(rc)
    if out_dir is not None:
        write_report(res, scale, Path(out_dir))
    return res


def write_report(res: AblationResult, scale: AblationScale, out: Path) -> None:
    from . import plotting

    out.mkdir(parents=True, exist_ok=True)
    body = {"scale": scale.to_dict(), "per_seed": asdict(res), "medians": res.medians()}
    atomic_write_text(out / "ablations.json", dump_json(body))
    atomic_write_text(out / "ablations.txt", res.tables())
    titles = {"multistage": "stage ordering", "finetune_loss": "fine-tune loss", "roi_count": "RoI count"}
    for name, block in asdict(res).items():
        if block:
            plotting.ablation_comparison(block, out / f"ablation_{name}.png", titles[name])
