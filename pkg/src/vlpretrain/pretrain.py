"""Masked-token objectives and image-text matching for pre-training.

Four losses share one forward pass over a batch of positive pairs and their
in-batch mismatched negatives:

* MLM   cross-entropy on masked caption tokens (target = original token)
* MOC   cross-entropy over detector classes on masked RoIs
* MRFR  squared L2 between a projection of the masked RoI output and its
        original feature
* ITM   binary cross-entropy of the [CLS] score for match / mismatch

The three masked losses only use positive pairs (conditional masking); ITM
uses every pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, NonFiniteLossError
from .model import Model
from .rng import stream
from .tokenizer import Vocab

TASKS = ("mlm", "moc", "mrfr", "itm")

# text actions
MASK_TOKEN, RANDOM_TOKEN, KEEP_TOKEN = 0, 1, 2
# visual actions
ZERO_FEATURE, KEEP_FEATURE = 0, 1


@dataclass(frozen=True)
class MaskConfig:
    text_prob: float = 0.15
    text_actions: tuple[float, float, float] = (0.8, 0.1, 0.1)  # [MASK], random token, unchanged
    visual_prob: float = 0.15
    visual_actions: tuple[float, float] = (0.9, 0.1)  # zeroed, unchanged
    min_text_masks: int = 1

    def __post_init__(self):
        for p in (self.text_prob, self.visual_prob):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"mask probability {p} outside [0, 1]")
        if not math.isclose(sum(self.text_actions), 1.0) or not math.isclose(sum(self.visual_actions), 1.0):
            raise ConfigError("mask action probabilities must sum to 1")


@dataclass
class MaskPlan:
    text_positions: np.ndarray
    text_actions: np.ndarray
    text_random_ids: np.ndarray  # replacement ids, used where action == RANDOM_TOKEN
    visual_positions: np.ndarray
    visual_actions: np.ndarray

    @property
    def n_text(self) -> int:
        return len(self.text_positions)

    @property
    def n_visual(self) -> int:
        return len(self.visual_positions)


def plan_masks(token_ids: Sequence[int], attention_mask: Sequence[bool], n_rois: int,
               rng: np.random.Generator, vocab: Vocab, cfg: MaskConfig = MaskConfig()) -> MaskPlan:
    """Choose masked text and RoI positions for one sample.

    Special tokens and padding are never eligible.  If the text draw selects
    nothing, one eligible position is forced so that MLM stays defined.
    """
    ids = np.asarray(token_ids)
    att = np.asarray(attention_mask, dtype=bool)
    specials = np.array(sorted(vocab.special_ids - {vocab.unk_id}))
    eligible = np.flatnonzero(att & ~np.isin(ids, specials))
    draws = rng.random(len(eligible))
    chosen = eligible[draws < cfg.text_prob]
    if len(chosen) < cfg.min_text_masks and len(eligible):
        extra = rng.choice(np.setdiff1d(eligible, chosen), size=min(cfg.min_text_masks, len(eligible)) - len(chosen),
                           replace=False)
        chosen = np.sort(np.concatenate([chosen, extra]))
    t_actions = rng.choice(3, size=len(chosen), p=cfg.text_actions)
    regular = np.asarray(vocab.regular_ids)
    random_ids = regular[rng.integers(len(regular), size=len(chosen))]
    v_draws = rng.random(n_rois)
    v_chosen = np.flatnonzero(v_draws < cfg.visual_prob)
    v_actions = rng.choice(2, size=len(v_chosen), p=cfg.visual_actions)
    return MaskPlan(chosen.astype(np.int64), t_actions.astype(np.int64), random_ids.astype(np.int64),
                    v_chosen.astype(np.int64), v_actions.astype(np.int64))


def apply_text_plan(ids: np.ndarray, plan: MaskPlan, vocab: Vocab) -> np.ndarray:
    out = np.array(ids, copy=True)
    pos, act = plan.text_positions, plan.text_actions
    out[pos[act == MASK_TOKEN]] = vocab.mask_id
    out[pos[act == RANDOM_TOKEN]] = plan.text_random_ids[act == RANDOM_TOKEN]
    return out


def apply_visual_plan(features: np.ndarray, plan: MaskPlan) -> np.ndarray:
    """Zero the raw feature of masked RoIs; their geometry is untouched."""
    out = np.array(features, copy=True)
    out[plan.visual_positions[plan.visual_actions == ZERO_FEATURE]] = 0.0
    return out


@dataclass
class PretrainBatch:
    """Model inputs plus flat row indices and targets of every loss.

    Row indices address the flattened hidden states ``[B * L, d]``.
    """

    text_ids: np.ndarray
    text_mask: np.ndarray
    features: np.ndarray
    geometry: np.ndarray
    itm_labels: np.ndarray
    mlm_rows: np.ndarray
    mlm_targets: np.ndarray
    moc_rows: np.ndarray
    moc_targets: np.ndarray
    mrfr_rows: np.ndarray
    mrfr_targets: np.ndarray
    n_positive: int
    pair_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    image_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def size(self) -> int:
        return self.text_ids.shape[0]


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random permutation without fixed points (a single random cycle)."""
    if n < 2:
        raise ConfigError("need at least two pairs to form in-batch negatives")
    order = rng.permutation(n)
    perm = np.empty(n, dtype=np.int64)
    perm[order] = np.roll(order, -1)
    return perm


def build_batch(text_ids: np.ndarray, text_mask: np.ndarray, features: np.ndarray, geometry: np.ndarray,
                roi_labels: np.ndarray, itm_labels: np.ndarray, plans: Sequence[MaskPlan], vocab: Vocab,
                max_text_len: int) -> PretrainBatch:
    """Apply mask plans and collect loss rows; only ``itm_labels == 1`` rows feed masked losses."""
    B, T = text_ids.shape
    n_vis = features.shape[1]
    L = T + n_vis
    ids = np.empty_like(text_ids)
    feats = np.empty_like(features)
    mlm_rows, mlm_t, moc_rows, moc_t, mrfr_t = [], [], [], [], []
    for b, plan in enumerate(plans):
        ids[b] = apply_text_plan(text_ids[b], plan, vocab)
        feats[b] = apply_visual_plan(features[b], plan)
        if itm_labels[b] != 1:
            continue
        mlm_rows.append(b * L + plan.text_positions)
        mlm_t.append(text_ids[b, plan.text_positions])
        moc_rows.append(b * L + T + plan.visual_positions)
        moc_t.append(roi_labels[b, plan.visual_positions])
        mrfr_t.append(features[b, plan.visual_positions])

    def cat(xs, dtype=np.int64, width=None):
        if xs:
            return np.concatenate(xs).astype(dtype)
        return np.zeros((0,) if width is None else (0, width), dtype=dtype)

    moc_rows_a = cat(moc_rows)
    return PretrainBatch(
        text_ids=ids, text_mask=text_mask, features=feats, geometry=geometry,
        itm_labels=np.asarray(itm_labels, dtype=np.float64),
        mlm_rows=cat(mlm_rows), mlm_targets=cat(mlm_t),
        moc_rows=moc_rows_a, moc_targets=cat(moc_t),
        mrfr_rows=moc_rows_a, mrfr_targets=cat(mrfr_t, np.float64, features.shape[-1]),
        n_positive=int(np.sum(np.asarray(itm_labels) == 1)),
    )


def sample_pretrain_batch(corpus, pair_idx: np.ndarray, model: Model, vocab: Vocab, seed: int,
                          sample_offset: int, mask_cfg: MaskConfig = MaskConfig(),
                          negatives: bool = True) -> PretrainBatch:
    """Positives ``pair_idx`` plus one in-batch mismatched negative per positive.

    Mask streams are keyed by ``sample_offset + j`` so results do not depend on
    how samples are grouped or which worker plans them.
    """
    cfg = model.config
    ids_all, mask_all = corpus.token_arrays(vocab, cfg.max_text_len)
    pair_img = corpus.pair_images()
    pair_idx = np.asarray(pair_idx, dtype=np.int64)
    imgs = pair_img[pair_idx]
    txt = pair_idx
    labels = np.ones(len(pair_idx))
    if negatives:
        perm = derangement(len(pair_idx), stream(seed, "itm.negatives", sample_offset))
        imgs = np.concatenate([imgs, imgs])
        txt = np.concatenate([txt, pair_idx[perm]])
        labels = np.concatenate([labels, (pair_img[pair_idx[perm]] == pair_img[pair_idx]).astype(float)])
    feats, geom, roi_labels = corpus.visual_batch(imgs, cfg)
    ids, tmask = ids_all[txt], mask_all[txt]
    plans = [plan_masks(ids[j], tmask[j], cfg.num_visual_tokens, stream(seed, "mask", sample_offset + j), vocab,
                        mask_cfg) for j in range(len(txt))]
    batch = build_batch(ids, tmask, feats, geom, roi_labels, labels, plans, vocab, cfg.max_text_len)
    batch.pair_index = txt
    batch.image_index = imgs
    return batch


def _zero() -> Tensor:
    return Tensor(0.0)


def mlm_loss(model: Model, hidden: Tensor, batch: PretrainBatch) -> tuple[Tensor, bool]:
    """Mean NLL of original tokens at masked caption positions of positive pairs."""
    if len(batch.mlm_rows) == 0:
        return _zero(), False
    return ag.softmax_ce(model.mlm_logits(hidden, batch.mlm_rows), batch.mlm_targets), True


def moc_loss(model: Model, hidden: Tensor, batch: PretrainBatch) -> tuple[Tensor, bool]:
    if len(batch.moc_rows) == 0:
        return _zero(), False
    return ag.softmax_ce(model.moc_logits(hidden, batch.moc_rows), batch.moc_targets), True


def mrfr_loss(model: Model, hidden: Tensor, batch: PretrainBatch) -> tuple[Tensor, bool]:
    """Per-pair sum of squared L2 feature errors, averaged over positive pairs."""
    if len(batch.mrfr_rows) == 0:
        return _zero(), False
    pred = model.mrfr_pred(hidden, batch.mrfr_rows)
    return ag.scale(ag.l2_loss(pred, Tensor(batch.mrfr_targets)), 1.0 / batch.n_positive), True


def itm_loss(model: Model, hidden: Tensor, batch: PretrainBatch) -> tuple[Tensor, bool]:
    """Binary cross-entropy of the match score over every pair (no conditional mask)."""
    score = ag.sigmoid(model.itm_logit(hidden))
    return ag.binary_ce(score, batch.itm_labels), True


LOSSES = {"mlm": mlm_loss, "moc": moc_loss, "mrfr": mrfr_loss, "itm": itm_loss}


def pretrain_losses(model: Model, batch: PretrainBatch, tasks: Sequence[str] = TASKS, mode: str = "eval",
                    rng: np.random.Generator | None = None) -> dict[str, Tensor]:
    """Forward once and return each enabled task loss plus ``total`` (their plain sum)."""
    unknown = set(tasks) - set(TASKS)
    if unknown or not tasks:
        raise ConfigError(f"tasks must be a non-empty subset of {TASKS}, got {list(tasks)}")
    hidden = model.forward(batch.text_ids, batch.text_mask, batch.features, batch.geometry, mode, rng)
    out = {t: LOSSES[t](model, hidden, batch)[0] for t in TASKS if t in tasks}
    out["total"] = ag.add_n(out[t] for t in TASKS if t in tasks)
    return out


def pretrain_step(model: Model, opt, batch: PretrainBatch, tasks: Sequence[str] = TASKS,
                  rng: np.random.Generator | None = None, step: int = 0, stage: str = "",
                  dump_dir=None) -> dict:
    """One Adam step on the summed task losses; returns the per-step loss report."""
    losses = pretrain_losses(model, batch, tasks, "train", rng)
    total = losses["total"]
    if not np.isfinite(total.data):
        raise NonFiniteLossError(f"non-finite pre-training loss at step {step}",
                                 _dump_batch(batch, dump_dir, step, stage))
    opt.zero_grad()
    if total.requires_grad:
        total.backward()
    opt.step()
    report = {"step": step, "stage": stage, "lr": opt.lr}
    for t in TASKS:
        report[t] = float(losses[t].data) if t in losses else None
    report["total"] = float(total.data)
    return report


def _dump_batch(batch: PretrainBatch, dump_dir, step: int, stage: str):
    if dump_dir is None:
        return None
    from pathlib import Path

    path = Path(dump_dir) / f"bad_batch_{stage or 'stage'}_{step}.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **{k: v for k, v in vars(batch).items() if isinstance(v, np.ndarray)})
    return str(path)
