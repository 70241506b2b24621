"""Ordered training stages over heterogeneous corpora with checkpoint hand-off.

A plan is a list of pre-training stages (each over one or more corpora; several
corpora in one stage are merged and reshuffled) followed by optional mask-free
fine-tuning stages.  Every stage starts from the parameters the previous stage
ended with and a fresh optimizer.  Completed stages are checkpointed, and a
rerun into the same output directory resumes after the last completed stage.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .checkpoint import atomic_write_text, dump_json, load_tensors
from .data import Corpus
from .errors import CheckpointError, ConfigError
from .finetune import DEFAULT_MARGIN, DIRECTIONS, build_groups, finetune_step, validate_combo
from .model import Model, ModelConfig
from .optim import Adam
from .pretrain import TASKS, MaskConfig, pretrain_step, sample_pretrain_batch
from .retrieval import DEFAULT_KS, eval_report
from .rng import stream
from .tokenizer import Vocab

log = logging.getLogger(__name__)

PRETRAIN_DEFAULTS = {"batch_size": 48, "lr": 1e-4}
FINETUNE_DEFAULTS = {"batch_size": 24, "lr": 5e-5}


@dataclass(frozen=True)
class Stage:
    name: str
    kind: str  # "pretrain" | "finetune"
    datasets: tuple[str, ...]
    epochs: int = 1
    batch_size: int | None = None
    lr: float | None = None
    tasks: tuple[str, ...] = TASKS
    loss_combo: tuple[str, ...] = ("binary",)
    group_size: int = 8
    direction: str = "both"
    margin: float = DEFAULT_MARGIN
    max_steps: int | None = None

    def __post_init__(self):
        if self.kind not in ("pretrain", "finetune"):
            raise ConfigError(f"stage {self.name!r}: kind must be 'pretrain' or 'finetune'")
        if not self.datasets:
            raise ConfigError(f"stage {self.name!r} names no dataset")
        defaults = PRETRAIN_DEFAULTS if self.kind == "pretrain" else FINETUNE_DEFAULTS
        object.__setattr__(self, "datasets", tuple(self.datasets))
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "loss_combo", validate_combo(self.loss_combo))
        if self.batch_size is None:
            object.__setattr__(self, "batch_size", defaults["batch_size"])
        if self.lr is None:
            object.__setattr__(self, "lr", defaults["lr"])
        if self.epochs < 1:
            raise ConfigError(f"stage {self.name!r}: epochs must be >= 1")
        if self.direction not in DIRECTIONS + ("both",):
            raise ConfigError(f"stage {self.name!r}: bad direction {self.direction!r}")
        if self.kind == "pretrain" and (not self.tasks or set(self.tasks) - set(TASKS)):
            raise ConfigError(f"stage {self.name!r}: tasks must be a non-empty subset of {TASKS}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "Stage":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown stage keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("datasets", "tasks", "loss_combo"):
            d[k] = list(d[k])
        return d


@dataclass(frozen=True)
class StagePlan:
    stages: tuple[Stage, ...]
    model: ModelConfig
    datasets: Mapping[str, str] = field(default_factory=dict)  # name -> corpus directory
    seed: int = 42
    eval_pool: str | None = None  # corpus directory for zero-shot / after-stage evaluation
    eval_ks: tuple[int, ...] = DEFAULT_KS
    vocab: str | None = None
    name: str = "plan"

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("a plan needs at least one stage")
        seen_finetune = False
        for s in self.stages:
            if s.kind == "finetune":
                seen_finetune = True
            elif seen_finetune:
                raise ConfigError(f"pre-training stage {s.name!r} follows a fine-tuning stage")
        names = [s.name for s in self.stages]
        if len(set(names)) != len(names):
            raise ConfigError("stage names must be unique")

    @classmethod
    def from_dict(cls, d: Mapping, base_dir: Path | None = None) -> "StagePlan":
        d = dict(d)
        model = d.pop("model", {})
        stages = tuple(Stage.from_dict(s) for s in d.pop("stages", []))
        base = Path(base_dir) if base_dir else None

        def resolve(p):
            if p is None or base is None or Path(p).is_absolute():
                return p
            return str(base / p)

        datasets = {k: resolve(v) for k, v in d.pop("datasets", {}).items()}
        known = {"seed", "eval_pool", "eval_ks", "vocab", "name"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown plan keys: {sorted(unknown)}")
        if "eval_pool" in d:
            d["eval_pool"] = resolve(d["eval_pool"])
        if "vocab" in d:
            d["vocab"] = resolve(d["vocab"])
        if "eval_ks" in d:
            d["eval_ks"] = tuple(d["eval_ks"])
        cfg = model if isinstance(model, ModelConfig) else ModelConfig.from_dict(model)
        return cls(stages=stages, model=cfg, datasets=datasets, **d)

    @classmethod
    def from_file(cls, path) -> "StagePlan":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), path.parent)

    def to_dict(self) -> dict:
        return {"name": self.name, "seed": self.seed, "model": self.model.to_dict(),
                "datasets": dict(self.datasets), "eval_pool": self.eval_pool, "eval_ks": list(self.eval_ks),
                "vocab": self.vocab, "stages": [s.to_dict() for s in self.stages]}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# -- single stage ------------------------------------------------------------------

def train_stage(model: Model, stage: Stage, corpus: Corpus, vocab: Vocab, seed: int, stage_index: int = 0,
                mask_cfg: MaskConfig = MaskConfig(), on_step: Callable[[dict], None] | None = None) -> list[dict]:
    """Run one stage in place on ``model``; returns the per-step reports."""
    opt = Adam(model.params, lr=stage.lr)
    reports: list[dict] = []
    step = 0
    tag = f"stage{stage_index}"
    if stage.kind == "pretrain":
        n = corpus.num_pairs
        bs = min(stage.batch_size, n)
        for epoch in range(stage.epochs):
            order = stream(seed, tag + ".shuffle", epoch).permutation(n)
            for s in range(0, n - 1, bs):
                idx = order[s:s + bs]
                if len(idx) < 2:
                    break
                offset = stage_index * 1_000_000_000 + step * 2 * bs
                batch = sample_pretrain_batch(corpus, idx, model, vocab, seed, offset, mask_cfg)
                rep = pretrain_step(model, opt, batch, stage.tasks, stream(seed, tag + ".dropout", step),
                                    step, stage.name)
                rep["epoch"] = epoch
                reports.append(rep)
                if on_step:
                    on_step(rep)
                step += 1
                if stage.max_steps is not None and step >= stage.max_steps:
                    return reports
    else:
        directions = DIRECTIONS if stage.direction == "both" else (stage.direction,)
        for epoch in range(stage.epochs):
            # one stream of groups per direction; directions alternate step by step
            gens = [build_groups(corpus, stage.group_size, d, stream(seed, tag + f".groups.{d}", epoch))
                    for d in directions]
            n_steps = -(-corpus.num_pairs // stage.batch_size)
            for s in range(n_steps):
                d_i = step % len(directions)
                groups = [g for _, g in zip(range(stage.batch_size), gens[d_i])]
                if not groups:
                    break
                rep = finetune_step(model, opt, corpus, groups, vocab, stage.loss_combo, stage.margin,
                                    stream(seed, tag + ".dropout", step), step, stage.name)
                rep["epoch"] = epoch
                reports.append(rep)
                if on_step:
                    on_step(rep)
                step += 1
                if stage.max_steps is not None and step >= stage.max_steps:
                    return reports
    return reports


# -- plans ---------------------------------------------------------------------------

def load_vocab(path: str | None) -> Vocab:
    return Vocab.from_file(path) if path else Vocab.default()


def resolve_corpora(plan: StagePlan, corpora: Mapping[str, Corpus] | None = None) -> dict[str, Corpus]:
    """Load every dataset the plan references, failing before any training starts."""
    corpora = dict(corpora or {})
    needed = {name for s in plan.stages for name in s.datasets}
    missing = []
    for name in sorted(needed):
        if name in corpora:
            continue
        path = plan.datasets.get(name)
        if path is None or not (Path(path) / "records.jsonl").exists():
            missing.append(name)
            continue
        corpora[name] = Corpus.load(path)
    if missing:
        raise ConfigError(f"plan references unavailable datasets: {missing}")
    return corpora


def _stage_dir(out: Path, i: int, stage: Stage) -> Path:
    return out / f"stage{i}_{stage.name}"


def zero_shot_eval_hook(model: Model, pool: Corpus, vocab: Vocab, ks: Sequence[int] = DEFAULT_KS) -> list[dict]:
    """Retrieval evaluation of the current parameters; never updates them."""
    return eval_report(model, pool, vocab, ks)


def run_plan(plan: StagePlan, out_dir: Path | None = None, init: Model | str | Path | None = None,
             corpora: Mapping[str, Corpus] | None = None, eval_pool: Corpus | None = None,
             mask_cfg: MaskConfig = MaskConfig(), stop_after: int | None = None) -> dict:
    """Run all stages in order.  ``stop_after`` ends the run after that many stages (for resume tests)."""
    datasets = resolve_corpora(plan, corpora)
    vocab = load_vocab(plan.vocab)
    if plan.model.vocab_size != len(vocab):
        raise ConfigError(f"model vocab_size {plan.model.vocab_size} != vocabulary size {len(vocab)}")
    if eval_pool is None and plan.eval_pool:
        eval_pool = Corpus.load(plan.eval_pool)

    if isinstance(init, Model):
        model = init.copy()
    else:
        model = Model.create(plan.model, plan.seed)
        if init is not None:
            arrays, _ = load_tensors(init)
            model.load_state(arrays)
    if model.config != plan.model:
        raise CheckpointError("initial checkpoint config differs from the plan's model config")

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out / "plan.json", dump_json(plan.to_dict()))

    summary = {"plan": plan.name, "plan_digest": plan.digest(), "stages": []}
    for i, stage in enumerate(plan.stages):
        if stop_after is not None and i >= stop_after:
            break
        sdir = _stage_dir(out, i, stage) if out is not None else None
        done = sdir is not None and (sdir / "summary.json").exists()
        if done:
            prev = json.loads((sdir / "summary.json").read_text())
            if prev.get("plan_digest") != plan.digest():
                raise CheckpointError(f"{sdir} was produced by a different plan")
            arrays, _ = load_tensors(sdir / "model")
            model.load_state(arrays)
            summary["stages"].append(prev["stage"])
            log.info("stage %s already complete, resumed from checkpoint", stage.name)
            continue
        corpus = datasets[stage.datasets[0]] if len(stage.datasets) == 1 else \
            Corpus.merge([datasets[n] for n in stage.datasets], name="+".join(stage.datasets))
        log.info("stage %d/%d %s (%s) on %s: %d pairs", i + 1, len(plan.stages), stage.name, stage.kind,
                 "+".join(stage.datasets), corpus.num_pairs)
        reports = train_stage(model, stage, corpus, vocab, plan.seed, i, mask_cfg)
        block = {"index": i, "name": stage.name, "kind": stage.kind, "datasets": list(stage.datasets),
                 "steps": len(reports), "final_total": reports[-1]["total"] if reports else None}
        if eval_pool is not None:
            block["eval"] = zero_shot_eval_hook(model, eval_pool, vocab, plan.eval_ks)
        summary["stages"].append(block)
        if sdir is not None:
            sdir.mkdir(parents=True, exist_ok=True)
            atomic_write_text(sdir / "metrics.jsonl",
                              "".join(json.dumps(r, sort_keys=True) + "\n" for r in reports))
            model.save(sdir / "model", {"stage": stage.name, "plan_digest": plan.digest()})
            atomic_write_text(sdir / "summary.json",
                              dump_json({"plan_digest": plan.digest(), "stage": block}))
    if out is not None:
        model.save(out / "final", {"plan_digest": plan.digest()})
        atomic_write_text(out / "summary.json", dump_json(summary))
    summary["model"] = model
    return summary
