"""Exhaustive cross-scoring of an evaluation pool and Recall@K."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autograd as ag
from .errors import ConfigError
from .model import Model
from .tokenizer import Vocab

IMAGE_RETRIEVAL = "image_retrieval"
SENTENCE_RETRIEVAL = "sentence_retrieval"
DEFAULT_KS = (1, 5, 10)


def score_all(model: Model, pool, vocab: Vocab, batch_size: int = 256) -> np.ndarray:
    """Raw match score for every (image, caption) pair: [n_images, n_captions].

    Runs in eval mode with no masking.  Scores are computed per sequence, so
    ``batch_size`` only affects memory and speed.
    """
    cfg = model.config
    ids_all, mask_all = pool.token_arrays(vocab, cfg.max_text_len)
    n_img, n_cap = pool.num_images, pool.num_pairs
    img_idx = np.repeat(np.arange(n_img), n_cap)
    cap_idx = np.tile(np.arange(n_cap), n_img)
    out = np.empty(n_img * n_cap)
    with ag.no_grad():
        for s in range(0, len(out), batch_size):
            sl = slice(s, s + batch_size)
            feats, geom, _ = pool.visual_batch(img_idx[sl], cfg)
            caps = cap_idx[sl]
            hidden = model.forward(ids_all[caps], mask_all[caps], feats, geom, "eval")
            out[sl] = model.itm_logit(hidden).data
    return out.reshape(n_img, n_cap)


def _check(matrix: np.ndarray, ground_truth: np.ndarray, k: int, direction: str) -> None:
    if direction not in (IMAGE_RETRIEVAL, SENTENCE_RETRIEVAL):
        raise ConfigError(f"unknown retrieval direction {direction!r}")
    if k < 1:
        raise ConfigError(f"K must be >= 1, got {k}")
    n_img, n_cap = matrix.shape
    limit = n_img if direction == IMAGE_RETRIEVAL else n_cap
    if k > limit:
        raise ConfigError(f"K={k} exceeds the {limit} candidates for {direction}")
    if ground_truth.shape != (n_cap,):
        raise ConfigError("ground truth must give one image index per caption")
    if not np.all(np.isfinite(matrix)):
        raise ConfigError("score matrix has non-finite entries")


def ranks(matrix: np.ndarray, ground_truth: np.ndarray, direction: str) -> np.ndarray:
    """0-based rank of the correct answer per query; equal scores rank the lower index first.

    Image retrieval: one rank per caption.  Sentence retrieval: per image, the
    best rank among its ground-truth captions.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    gt = np.asarray(ground_truth, dtype=np.int64)
    n_img, n_cap = matrix.shape
    if direction == IMAGE_RETRIEVAL:
        s_gt = matrix[gt, np.arange(n_cap)]
        higher = (matrix > s_gt[None, :]).sum(axis=0)
        tied_before = ((matrix == s_gt[None, :]) & (np.arange(n_img)[:, None] < gt[None, :])).sum(axis=0)
        return higher + tied_before
    rows = matrix[gt]  # row of each caption's own image
    s = rows[np.arange(n_cap), np.arange(n_cap)]
    higher = (rows > s[:, None]).sum(axis=1)
    tied_before = ((rows == s[:, None]) & (np.arange(n_cap)[None, :] < np.arange(n_cap)[:, None])).sum(axis=1)
    cap_rank = higher + tied_before
    best = np.full(n_img, np.iinfo(np.int64).max)
    np.minimum.at(best, gt, cap_rank)
    return best[np.isin(np.arange(n_img), gt)]


def recall_at_k(matrix: np.ndarray, ground_truth: np.ndarray, k: int, direction: str) -> float:
    """Fraction of queries whose correct match is among the top ``k`` candidates."""
    matrix = np.asarray(matrix, dtype=np.float64)
    gt = np.asarray(ground_truth, dtype=np.int64)
    _check(matrix, gt, k, direction)
    return float(np.mean(ranks(matrix, gt, direction) < k))


def report_from_matrix(matrix: np.ndarray, ground_truth: np.ndarray, ks: Sequence[int] = DEFAULT_KS,
                       checkpoint: str = "") -> list[dict]:
    rows = []
    for direction in (IMAGE_RETRIEVAL, SENTENCE_RETRIEVAL):
        for k in ks:
            rows.append({"direction": direction, "K": int(k),
                         "recall": recall_at_k(matrix, ground_truth, k, direction),
                         "pool_size": int(matrix.shape[0]), "checkpoint": checkpoint})
    return rows


def eval_report(model: Model, pool, vocab: Vocab, ks: Sequence[int] = DEFAULT_KS,
                batch_size: int = 256) -> list[dict]:
    matrix = score_all(model, pool, vocab, batch_size)
    return report_from_matrix(matrix, pool.pair_images(), ks, model.checkpoint_id())


def format_table(rows: list[dict]) -> str:
    """Aligned text table: one line, image retrieval R@Ks then sentence retrieval R@Ks."""
    ks = sorted({r["K"] for r in rows})
    get = {(r["direction"], r["K"]): r["recall"] for r in rows}
    head1 = f"{'':<12}" + f"{'Image Retrieval':^{8 * len(ks)}}" + f"{'Sentence Retrieval':^{8 * len(ks)}}"
    head2 = f"{'pool':<12}" + "".join(f"{'R@' + str(k):>8}" for k in ks) * 2
    pool = rows[0]["pool_size"] if rows else 0
    vals = [get[(IMAGE_RETRIEVAL, k)] for k in ks] + [get[(SENTENCE_RETRIEVAL, k)] for k in ks]
    line = f"{pool:<12}" + "".join(f"{100 * v:>8.1f}" for v in vals)
    return "\n".join([head1, head2, line]) + "\n"


def recall(rows: list[dict], direction: str, k: int) -> float:
    for r in rows:
        if r["direction"] == direction and r["K"] == k:
            return r["recall"]
    raise KeyError((direction, k))
