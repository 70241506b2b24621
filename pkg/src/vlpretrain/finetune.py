"""Retrieval fine-tuning: sampled candidate groups and three ranking losses.

A group holds one ground-truth (image, caption) pair at slot 0 and ``P - 1``
negatives.  Image-to-text groups keep the image and swap in captions of other
images; text-to-image groups keep the caption and swap in other images.
Inputs are never masked.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, NonFiniteLossError
from .model import Model
from .tokenizer import Vocab

DIRECTIONS = ("image_to_text", "text_to_image")
LOSS_NAMES = ("binary", "ce", "triplet")
DEFAULT_MARGIN = 0.2


@dataclass(frozen=True)
class RetrievalGroup:
    """Slot 0 is the positive; ``images[j]``/``captions[j]`` index the corpus."""

    direction: str
    images: np.ndarray  # [P] image indices
    captions: np.ndarray  # [P] pair (caption) indices

    @property
    def size(self) -> int:
        return len(self.images)


def build_groups(corpus, P: int, direction: str, rng: np.random.Generator,
                 anchors: Sequence[int] | None = None) -> Iterator[RetrievalGroup]:
    """One group per anchor pair (all pairs, shuffled, unless ``anchors`` given).

    Negatives are drawn uniformly without replacement from candidates belonging
    to a different ground-truth image.
    """
    if P < 2:
        raise ConfigError(f"group size P must be >= 2, got {P}")
    if direction not in DIRECTIONS:
        raise ConfigError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    pair_img = corpus.pair_images()
    n_img = corpus.num_images
    if direction == "text_to_image" and n_img < P:
        raise ConfigError(f"corpus has {n_img} images, need at least P={P}")
    if direction == "image_to_text":
        per_image = np.bincount(pair_img, minlength=n_img)
        if (len(pair_img) - per_image.max()) < P - 1:
            raise ConfigError(f"corpus too small for P={P} caption candidates")
    order = rng.permutation(len(pair_img)) if anchors is None else np.asarray(anchors)
    for a in order:
        img = pair_img[a]
        if direction == "image_to_text":
            # rejection keeps sampling uniform over captions of other images
            negs: list[int] = []
            seen = {int(a)}
            while len(negs) < P - 1:
                c = int(rng.integers(len(pair_img)))
                if c in seen or pair_img[c] == img:
                    continue
                seen.add(c)
                negs.append(c)
            yield RetrievalGroup(direction, np.full(P, img, dtype=np.int64),
                                 np.array([a] + negs, dtype=np.int64))
        else:
            others = rng.choice(n_img - 1, size=P - 1, replace=False)
            others = others + (others >= img)  # skip the positive image
            yield RetrievalGroup(direction, np.concatenate([[img], others]).astype(np.int64),
                                 np.full(P, a, dtype=np.int64))


def group_logits(model: Model, corpus, groups: Sequence[RetrievalGroup], vocab: Vocab,
                 mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
    """Raw similarity scores [G, P] for every candidate of every group."""
    cfg = model.config
    P = groups[0].size
    imgs = np.concatenate([g.images for g in groups])
    caps = np.concatenate([g.captions for g in groups])
    ids_all, mask_all = corpus.token_arrays(vocab, cfg.max_text_len)
    feats, geom, _ = corpus.visual_batch(imgs, cfg)
    hidden = model.forward(ids_all[caps], mask_all[caps], feats, geom, mode, rng)
    return ag.reshape(model.itm_logit(hidden), (len(groups), P))


def bce_finetune_loss(logits: Tensor) -> Tensor:
    """Binary CE on sigmoid scores: slot 0 labelled 1, the rest 0; mean over all P scores."""
    y = np.zeros(logits.shape)
    y[:, 0] = 1.0
    return ag.binary_ce(ag.sigmoid(logits), y)


def ce_finetune_loss(logits: Tensor) -> Tensor:
    """Softmax CE over each group's P raw scores, positive at slot 0."""
    return ag.softmax_ce(logits, np.zeros(logits.shape[0], dtype=np.int64))


def hardest_negative(logits: np.ndarray) -> np.ndarray:
    """Slot of the highest-scoring negative in each group (ties -> lowest slot)."""
    return 1 + np.argmax(logits[:, 1:], axis=1)


def triplet_finetune_loss(logits: Tensor, margin: float = DEFAULT_MARGIN) -> Tensor:
    """mean_g max(0, margin - s_pos + s_hard); the hard-negative choice is not differentiated."""
    if margin <= 0:
        raise ConfigError(f"triplet margin must be positive, got {margin}")
    G = logits.shape[0]
    hard = hardest_negative(logits.data)
    pos = ag.index(logits, (np.arange(G), np.zeros(G, dtype=np.int64)))
    neg = ag.index(logits, (np.arange(G), hard))
    return ag.mean(ag.relu(ag.sub(neg, pos) + margin))


def finetune_losses(logits: Tensor, combo: Sequence[str], margin: float = DEFAULT_MARGIN) -> dict[str, Tensor]:
    combo = validate_combo(combo)
    fns = {"binary": bce_finetune_loss, "ce": ce_finetune_loss,
           "triplet": lambda z: triplet_finetune_loss(z, margin)}
    out = {name: fns[name](logits) for name in LOSS_NAMES if name in combo}
    out["total"] = ag.add_n(out[n] for n in LOSS_NAMES if n in combo)
    return out


def validate_combo(combo: Sequence[str]) -> tuple[str, ...]:
    combo = tuple(combo)
    if not combo:
        raise ConfigError("fine-tuning loss combination is empty")
    bad = set(combo) - set(LOSS_NAMES)
    if bad:
        raise ConfigError(f"unknown fine-tuning losses {sorted(bad)}; choose from {LOSS_NAMES}")
    return combo


def finetune_step(model: Model, opt, corpus, groups: Sequence[RetrievalGroup], vocab: Vocab,
                  combo: Sequence[str] = ("binary",), margin: float = DEFAULT_MARGIN,
                  rng: np.random.Generator | None = None, step: int = 0, stage: str = "") -> dict:
    combo = validate_combo(combo)
    logits = group_logits(model, corpus, groups, vocab, "train", rng)
    losses = finetune_losses(logits, combo, margin)
    total = losses["total"]
    if not np.isfinite(total.data):
        raise NonFiniteLossError(f"non-finite fine-tuning loss at step {step}")
    opt.zero_grad()
    if total.requires_grad:
        total.backward()
    opt.step()
    report = {"step": step, "stage": stage, "direction": groups[0].direction, "lr": opt.lr}
    for n in LOSS_NAMES:
        report[n] = float(losses[n].data) if n in losses else None
    report["total"] = float(total.data)
    return report
