"""Synthetic image-text corpora with known alignment.

An image is a handful of distinct object classes.  The detector view of it is
``rois_per_image`` RoIs sorted by confidence: one RoI per object plus
lower-confidence duplicate or part detections of the same objects.  RoI
features are a unit-norm class prototype plus Gaussian noise, so the class of
each RoI is linearly recoverable.  A caption names every object class, wrapped
in a template whose wording depends on the dataset's dialect.

Out-of-domain data differs from in-domain data by a skewed class frequency,
a different caption dialect and weaker (noisier) captions.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import Corpus
from .errors import ConfigError
from .rng import stream

CLASS_NAMES = (
    "dog", "cat", "car", "bus", "tree", "chair", "table", "bird", "horse", "boat", "cup", "lamp",
    "bike", "clock", "bottle", "sofa", "train", "plane", "sheep", "cow", "kite", "umbrella",
    "skateboard", "pizza",
)

# in-domain wording: descriptive, human-written style
CAPTION_TEMPLATES = (
    "a picture of {objs} .",
    "there is {objs} in this scene .",
    "{objs} can be seen here .",
    "this photo shows {objs} .",
)
# out-of-domain wording: terse web alt-text style
WEB_TEMPLATES = (
    "stock image {objs}",
    "{objs} photo",
    "view with {objs} - free picture",
    "best {objs} shot",
)


@dataclass(frozen=True)
class WorldSpec:
    num_classes: int = 12
    visual_dim: int = 32
    rois_per_image: int = 12
    min_objects: int = 2
    max_objects: int = 5
    num_images: int = 2000
    captions_per_image: int = 1
    feature_noise: float = 0.1
    caption_noise: float = 0.0  # chance each named class is swapped for a wrong one
    class_skew: float = 0.0  # class frequency ~ exp(-skew * rank)
    web_dialect: float = 0.0  # chance of a web-style template
    world_seed: int = 7  # fixes class prototypes shared by every dataset of this world
    prefix: str = "img"

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ConfigError(f"num_classes must be in [1, {len(CLASS_NAMES)}]")
        if not 1 <= self.min_objects <= self.max_objects <= min(self.num_classes, self.rois_per_image):
            raise ConfigError("need 1 <= min_objects <= max_objects <= min(num_classes, rois_per_image)")
        if self.captions_per_image < 1 or self.num_images < 1:
            raise ConfigError("need at least one image and one caption per image")

    @property
    def class_names(self) -> list[str]:
        return list(CLASS_NAMES[: self.num_classes])

    def to_dict(self) -> dict:
        return asdict(self)


def prototypes(spec: WorldSpec) -> np.ndarray:
    """Unit-norm class prototype vectors [K, d_v]."""
    p = stream(spec.world_seed, "synth.prototypes").standard_normal((spec.num_classes, spec.visual_dim))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def class_frequencies(spec: WorldSpec) -> np.ndarray:
    # the skew ranks classes in a world-fixed shuffled order
    order = stream(spec.world_seed, "synth.class_order").permutation(spec.num_classes)
    w = np.exp(-spec.class_skew * np.arange(spec.num_classes, dtype=np.float64))
    freq = np.empty(spec.num_classes)
    freq[order] = w
    return freq / freq.sum()


def _render_objects(names: list[str]) -> str:
    parts = list(names)
    if len(parts) == 1:
        return parts[0]
    return " , ".join(parts[:-1]) + " and " + parts[-1]


def caption_for(names: list[str], rng: np.random.Generator, web_dialect: float) -> str:
    templates = WEB_TEMPLATES if rng.random() < web_dialect else CAPTION_TEMPLATES
    return templates[int(rng.integers(len(templates)))].format(objs=_render_objects(names))


def _box(rng: np.random.Generator, W: float, H: float, frac_lo: float, frac_hi: float) -> list[float]:
    w = rng.uniform(frac_lo, frac_hi) * W
    h = rng.uniform(frac_lo, frac_hi) * H
    x0 = rng.uniform(0, W - w)
    y0 = rng.uniform(0, H - h)
    box = [round(x0, 1), round(y0, 1), round(x0 + w, 1), round(y0 + h, 1)]
    box[2] = min(max(box[2], box[0] + 1.0), W)
    box[3] = min(max(box[3], box[1] + 1.0), H)
    return box


def _image(spec: WorldSpec, protos: np.ndarray, freq: np.ndarray, seed: int, i: int):
    rng = stream(seed, "synth.image", i)
    K, R = spec.num_classes, spec.rois_per_image
    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    classes = [int(c) for c in rng.choice(K, size=n_obj, replace=False, p=freq)]
    W = float(rng.integers(320, 641))
    H = float(rng.integers(320, 641))
    rois = []  # (confidence, class, box)
    for c in classes:
        rois.append((rng.uniform(0.5, 1.0), c, _box(rng, W, H, 0.2, 0.6)))
    for _ in range(R - n_obj):
        c = classes[int(rng.integers(n_obj))]
        rois.append((rng.uniform(0.05, 0.6), c, _box(rng, W, H, 0.05, 0.3)))
    rois.sort(key=lambda t: -t[0])
    labels = [c for _, c, _ in rois]
    boxes = [b for _, _, b in rois]
    feats = protos[labels] + spec.feature_noise * rng.standard_normal((R, spec.visual_dim))
    glob = protos[classes].mean(axis=0) + spec.feature_noise * rng.standard_normal(spec.visual_dim)
    names = spec.class_names
    texts = []
    for _ in range(spec.captions_per_image):
        mention = list(rng.permutation(classes))
        for j in range(len(mention)):
            if rng.random() < spec.caption_noise:
                wrong = [k for k in range(K) if k not in mention]
                if wrong:
                    mention[j] = wrong[int(rng.integers(len(wrong)))]
        texts.append(caption_for([names[int(c)] for c in mention], rng, spec.web_dialect))
    record = {
        "image_id": f"{spec.prefix}-{i:06d}",
        "page_lang": "en",
        "is_dominant": True,
        "width": int(W),
        "height": int(H),
        "content_flags": [],
        "candidate_texts": [{"source": "alt", "text": t} for t in texts],
        "tags": sorted(names[c] for c in classes),
        "class_labels": labels,
        "boxes": boxes,
        "feature_row": i,
    }
    return record, feats, glob


def generate(spec: WorldSpec, seed: int, name: str = "synthetic") -> Corpus:
    """Deterministic corpus for ``(spec, seed)``; each image uses its own derived stream."""
    protos = prototypes(spec)
    freq = class_frequencies(spec)
    records, feats, globs = [], [], []
    for i in range(spec.num_images):
        r, f, g = _image(spec, protos, freq, seed, i)
        records.append(r)
        feats.append(f)
        globs.append(g)
    meta = {"world": spec.to_dict(), "seed": seed}
    return Corpus(name, records, np.stack(feats), np.stack(globs), spec.class_names, meta)


@dataclass(frozen=True)
class DomainShift:
    shift: float = 1.0
    size_ratio: int = 5  # out-of-domain images per in-domain image
    ood_caption_noise: float = 0.3


def domain_specs(spec: WorldSpec, shift: DomainShift | float) -> tuple[WorldSpec, WorldSpec]:
    """World specs of the (out-of-domain, in-domain) datasets.

    ``shift`` scales the class-frequency skew, the share of web-style captions
    and the caption noise of the out-of-domain side.  At zero both sides are
    drawn from the same distribution.
    """
    if not isinstance(shift, DomainShift):
        shift = DomainShift(shift=float(shift))
    if shift.shift < 0:
        raise ConfigError("shift must be non-negative")
    s = shift.shift
    ind = replace(spec, class_skew=0.0, web_dialect=0.0, caption_noise=spec.caption_noise, prefix="ind")
    ood = replace(spec, num_images=spec.num_images * shift.size_ratio, class_skew=s,
                  web_dialect=min(1.0, s), caption_noise=min(0.9, spec.caption_noise + shift.ood_caption_noise * min(1.0, s)),
                  prefix="ood")
    return ood, ind


def make_domain_pair(spec: WorldSpec, shift: DomainShift | float, seed: int) -> tuple[Corpus, Corpus]:
    """Large out-of-domain corpus and a smaller in-domain corpus over the same classes.

    ``spec.num_images`` is the in-domain size.
    """
    ood_spec, ind_spec = domain_specs(spec, shift)
    return generate(ood_spec, seed * 2 + 1, "out_of_domain"), generate(ind_spec, seed * 2 + 2, "in_domain")


def make_eval_pool(spec: WorldSpec, num_images: int, captions_per_image: int, seed: int) -> Corpus:
    """In-domain evaluation pool, disjoint in sampling stream from training sets."""
    _, ind = domain_specs(spec, 0.0)
    pool_spec = replace(ind, num_images=num_images, captions_per_image=captions_per_image, prefix="pool")
    return generate(pool_spec, 10_000 + seed, "eval_pool")


def class_divergence(a: Corpus, b: Corpus) -> float:
    """Symmetrised KL divergence between the object-class frequencies of two corpora."""
    k = len(a.class_names)

    def freq(c: Corpus) -> np.ndarray:
        counts = np.ones(k)  # add-one smoothing
        for r in c.records:
            for t in r["tags"]:
                counts[c.class_names.index(t)] += 1
        return counts / counts.sum()

    p, q = freq(a), freq(b)
    return float(0.5 * (np.sum(p * np.log(p / q)) + np.sum(q * np.log(q / p))))
