"""On-disk corpus format shared by the generator, the cleaning pipeline and the trainer.

A corpus directory holds

``records.jsonl``
    one image per line: ``image_id``, ``page_lang``, ``is_dominant``, ``width``,
    ``height``, ``content_flags``, ``candidate_texts`` (list of
    ``{"source", "text"}``), ``tags`` (latent class names), ``class_labels``,
    ``boxes`` and ``feature_row``.  Every candidate text forms one
    (image, caption) pair.
``features.json`` / ``features.bin``
    tensor bundle with ``roi_features`` [N, R, d_v] and ``global_features`` [N, d_v].
``corpus.json``
    metadata: name, class names, visual dim, RoIs per image.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import atomic_write_text, dump_json, load_tensors, save_tensors
from .errors import ConfigError, InputError
from .model import ModelConfig, VisualTokenSet
from .tokenizer import Vocab, tokenize

RECORDS = "records.jsonl"
FEATURES = "features"
META = "corpus.json"


def write_jsonl(path: Path, rows) -> None:
    text = "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in rows)
    atomic_write_text(Path(path), text)


def read_jsonl(path: Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{n}: invalid JSON: {exc}") from exc
    return out


@dataclass
class Corpus:
    """Images with RoI annotations plus their captions, held in memory."""

    name: str
    records: list[dict]
    roi_features: np.ndarray  # [N, R, d_v]
    global_features: np.ndarray  # [N, d_v]
    class_names: list[str]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.records)
        self.class_labels = np.array([r["class_labels"] for r in self.records], dtype=np.int64).reshape(n, -1)
        self.boxes = np.array([r["boxes"] for r in self.records], dtype=np.float64).reshape(n, -1, 4)
        self.sizes = np.array([[r["width"], r["height"]] for r in self.records], dtype=np.float64).reshape(n, 2)
        rows = np.array([r["feature_row"] for r in self.records], dtype=np.int64)
        self._rows = rows
        # per-image geometry_vector, vectorised
        x0, y0, x1, y1 = (self.boxes[..., k] for k in range(4))
        W, H = self.sizes[:, :1], self.sizes[:, 1:]
        self.geometry = np.stack([x0 / W, y0 / H, x1 / W, y1 / H, (x1 - x0) * (y1 - y0) / (W * H)], axis=-1)
        self.pairs: list[tuple[int, str]] = [
            (i, c["text"]) for i, r in enumerate(self.records) for c in r["candidate_texts"]
        ]
        self._token_cache: dict = {}

    # -- sizes ------------------------------------------------------------------
    @property
    def num_images(self) -> int:
        return len(self.records)

    @property
    def num_pairs(self) -> int:
        return len(self.pairs)

    @property
    def rois_per_image(self) -> int:
        return self.class_labels.shape[1]

    @property
    def visual_dim(self) -> int:
        return self.roi_features.shape[-1]

    def image_ids(self) -> list[str]:
        return [r["image_id"] for r in self.records]

    # -- model inputs -------------------------------------------------------------
    def features_of(self, images: np.ndarray) -> np.ndarray:
        return self.roi_features[self._rows[images]]

    def visual(self, i: int) -> VisualTokenSet:
        r = self.records[i]
        return VisualTokenSet(self.roi_features[self._rows[i]], self.class_labels[i], self.boxes[i],
                              (r["width"], r["height"]), self.global_features[self._rows[i]])

    def visual_batch(self, images: Sequence[int], cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Features [B, n_visual, d_v], geometry [B, n_visual, 5] and labels [B, o]."""
        images = np.asarray(images, dtype=np.int64)
        o = cfg.num_visual_tokens
        if o > self.rois_per_image:
            raise InputError(f"model wants {o} RoIs, corpus {self.name!r} stores {self.rois_per_image}")
        if cfg.visual_dim != self.visual_dim:
            raise InputError(f"model visual_dim {cfg.visual_dim} != corpus {self.visual_dim}")
        feats = self.roi_features[self._rows[images], :o]
        geom = self.geometry[images, :o]
        if cfg.use_global_feature:
            g = self.global_features[self._rows[images]][:, None, :]
            gg = np.broadcast_to(np.array([0.0, 0.0, 1.0, 1.0, 1.0]), (len(images), 1, 5))
            feats = np.concatenate([feats, g], axis=1)
            geom = np.concatenate([geom, gg], axis=1)
        return feats, geom, self.class_labels[images, :o]

    def token_arrays(self, vocab: Vocab, max_len: int) -> tuple[np.ndarray, np.ndarray]:
        """Token ids [P, max_len] and attention mask for every pair, cached."""
        key = (id(vocab), max_len)
        if key not in self._token_cache:
            seqs = [tokenize(text, vocab, max_len) for _, text in self.pairs]
            ids = np.array([s.token_ids for s in seqs], dtype=np.int64).reshape(len(seqs), max_len)
            mask = np.array([s.attention_mask for s in seqs], dtype=bool).reshape(len(seqs), max_len)
            self._token_cache[key] = (ids, mask)
        return self._token_cache[key]

    def pair_images(self) -> np.ndarray:
        return np.array([i for i, _ in self.pairs], dtype=np.int64)

    # -- composition --------------------------------------------------------------
    def subset(self, images: Sequence[int], name: str | None = None) -> "Corpus":
        images = list(images)
        rows = self._rows[images]
        recs = []
        for new, i in enumerate(images):
            r = dict(self.records[i])
            r["feature_row"] = new
            recs.append(r)
        return Corpus(name or self.name, recs, self.roi_features[rows], self.global_features[rows],
                      list(self.class_names), dict(self.meta))

    @staticmethod
    def merge(corpora: Sequence["Corpus"], name: str = "merged") -> "Corpus":
        if not corpora:
            raise ConfigError("nothing to merge")
        base = corpora[0]
        recs = []
        offset = 0
        for c in corpora:
            if c.class_names != base.class_names or c.roi_features.shape[1:] != base.roi_features.shape[1:]:
                raise ConfigError(f"corpus {c.name!r} is incompatible with {base.name!r}")
            for r in c.records:
                r = dict(r)
                r["feature_row"] = offset + r["feature_row"]
                recs.append(r)
            offset += c.roi_features.shape[0]
        return Corpus(name, recs, np.concatenate([c.roi_features for c in corpora]),
                      np.concatenate([c.global_features for c in corpora]), list(base.class_names),
                      {"merged_from": [c.name for c in corpora]})

    # -- persistence --------------------------------------------------------------
    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_jsonl(d / RECORDS, self.records)
        save_tensors(d / FEATURES, {"roi_features": self.roi_features, "global_features": self.global_features})
        meta = dict(self.meta)
        meta.update({"name": self.name, "class_names": self.class_names, "num_images": self.num_images,
                     "num_pairs": self.num_pairs, "visual_dim": self.visual_dim,
                     "rois_per_image": self.rois_per_image})
        atomic_write_text(d / META, dump_json(meta))
        return d

    @classmethod
    def load(cls, directory) -> "Corpus":
        d = Path(directory)
        if not (d / RECORDS).exists():
            raise FileNotFoundError(f"no corpus at {d} (missing {RECORDS})")
        meta = json.loads((d / META).read_text())
        arrays, _ = load_tensors(d / FEATURES)
        return cls(meta.get("name", d.name), read_jsonl(d / RECORDS), arrays["roi_features"],
                   arrays["global_features"], list(meta["class_names"]), meta)
