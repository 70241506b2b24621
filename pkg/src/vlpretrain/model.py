"""Single-stream image-text Transformer: embeddings, encoder and task heads.

Joint sequence layout (length ``max_text_len + n_visual``)::

    [CLS] w1 .. wn [SEP] [PAD].. | v1 .. vo [global]

Text tokens use ascending position ids and segment 0.  Visual tokens use
segment 1 and share one dummy position id (``max_text_len``, an extra row of
the position table); their location enters through the projected 5-d box
geometry instead.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .checkpoint import load_tensors, save_tensors
from .errors import CheckpointError, ConfigError, InputError, ShapeError

FULL_IMAGE_GEOMETRY = (0.0, 0.0, 1.0, 1.0, 1.0)


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    hidden: int = 64
    intermediate: int = 256
    heads: int = 4
    dropout: float = 0.1
    max_seq_len: int = 32
    max_text_len: int = 20  # includes [CLS] and [SEP]
    num_visual_tokens: int = 6
    visual_dim: int = 32
    vocab_size: int = 201
    num_classes: int = 12
    use_global_feature: bool = False
    ln_eps: float = 1e-12
    init_std: float = 0.02

    def __post_init__(self):
        if min(self.layers, self.hidden, self.intermediate, self.heads) < 1:
            raise ConfigError("layers, hidden, intermediate and heads must be positive")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.max_text_len < 3 or self.num_visual_tokens < 1:
            raise ConfigError("need max_text_len >= 3 and at least one visual token")
        if self.seq_len > self.max_seq_len:
            raise ConfigError(
                f"max_text_len {self.max_text_len} + visual {self.n_visual} exceeds max_seq_len {self.max_seq_len}")

    @property
    def n_visual(self) -> int:
        return self.num_visual_tokens + int(self.use_global_feature)

    @property
    def seq_len(self) -> int:
        return self.max_text_len + self.n_visual

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @classmethod
    def base(cls, **overrides) -> "ModelConfig":
        """12 layers, 768 hidden, 3072 intermediate, 12 heads, 144 tokens incl. 100 RoIs."""
        base = dict(layers=12, hidden=768, intermediate=3072, heads=12, dropout=0.1,
                    max_seq_len=144, max_text_len=44, num_visual_tokens=100, visual_dim=2048,
                    vocab_size=30522, num_classes=1600)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        base = dict(layers=2, hidden=16, intermediate=32, heads=2, dropout=0.0,
                    max_seq_len=16, max_text_len=8, num_visual_tokens=4, visual_dim=6,
                    vocab_size=30, num_classes=5)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class VisualTokenSet:
    """Detector output for one image: RoI features, labels and pixel boxes."""

    features: np.ndarray  # [o, d_v]
    class_labels: np.ndarray  # [o]
    boxes: np.ndarray  # [o, 4] as x_tl, y_tl, x_br, y_br
    image_size: tuple[int, int]  # (W, H)
    global_feature: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.class_labels = np.asarray(self.class_labels, dtype=np.int64)
        self.boxes = np.asarray(self.boxes, dtype=np.float64)
        if self.global_feature is not None:
            self.global_feature = np.asarray(self.global_feature, dtype=np.float64)

    def validate(self, num_classes: int | None = None) -> None:
        o = self.features.shape[0]
        if o < 1:
            raise InputError("a visual token set needs at least one RoI")
        if self.boxes.shape != (o, 4) or self.class_labels.shape != (o,):
            raise InputError("features, boxes and class labels disagree on the RoI count")
        w, h = self.image_size
        x0, y0, x1, y1 = self.boxes.T
        if not (np.all(0 <= x0) and np.all(x0 < x1) and np.all(x1 <= w)
                and np.all(0 <= y0) and np.all(y0 < y1) and np.all(y1 <= h)):
            raise InputError("bounding box outside image or degenerate")
        if num_classes is not None and (self.class_labels.min() < 0 or self.class_labels.max() >= num_classes):
            raise InputError(f"class label outside [0, {num_classes})")

    def top(self, o: int) -> "VisualTokenSet":
        """First ``o`` RoIs (RoIs are stored by descending detector confidence)."""
        return VisualTokenSet(self.features[:o], self.class_labels[:o], self.boxes[:o],
                              self.image_size, self.global_feature)


def geometry_vector(box, width: float, height: float) -> np.ndarray:
    """Normalised corners plus area fraction: (x0/W, y0/H, x1/W, y1/H, area/(WH))."""
    if width <= 0 or height <= 0:
        raise ConfigError(f"image size must be positive, got {width}x{height}")
    b = np.asarray(box, dtype=np.float64)
    x0, y0, x1, y1 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    area = (x1 - x0) * (y1 - y0) / (width * height)
    return np.stack([x0 / width, y0 / height, x1 / width, y1 / height, area], axis=-1)


def visual_arrays(visuals: list[VisualTokenSet], cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Stack features and geometry for a batch, truncating to the configured RoI count."""
    o = cfg.num_visual_tokens
    feats = np.zeros((len(visuals), cfg.n_visual, cfg.visual_dim))
    geom = np.zeros((len(visuals), cfg.n_visual, 5))
    for i, v in enumerate(visuals):
        if v.features.shape[0] < o:
            raise InputError(f"image has {v.features.shape[0]} RoIs, model expects {o}")
        feats[i, :o] = v.features[:o]
        geom[i, :o] = geometry_vector(v.boxes[:o], *v.image_size)
        if cfg.use_global_feature:
            if v.global_feature is None:
                raise InputError("use_global_feature is set but the image has no global feature")
            feats[i, o] = v.global_feature
            geom[i, o] = FULL_IMAGE_GEOMETRY
    return feats, geom


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return z * std


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Truncated-normal weights, zero biases, unit LayerNorm gains."""
    from .rng import stream

    rng = stream(seed, "init")
    d = cfg.hidden
    shapes: list[tuple[str, tuple[int, ...], str]] = [
        ("emb.word", (cfg.vocab_size, d), "w"),
        ("emb.segment", (2, d), "w"),
        ("emb.position", (cfg.max_text_len + 1, d), "w"),
        ("emb.text_ln.gain", (d,), "one"),
        ("emb.text_ln.bias", (d,), "zero"),
        ("emb.image.w", (cfg.visual_dim, d), "w"),
        ("emb.image.b", (d,), "zero"),
        ("emb.geometry.w", (5, d), "w"),
        ("emb.geometry.b", (d,), "zero"),
        ("emb.visual_ln.gain", (d,), "one"),
        ("emb.visual_ln.bias", (d,), "zero"),
    ]
    for i in range(cfg.layers):
        p = f"enc.{i}."
        for name in ("q", "k", "v", "o"):
            shapes.append((p + f"attn.{name}.w", (d, d), "w"))
            shapes.append((p + f"attn.{name}.b", (d,), "zero"))
        shapes += [
            (p + "ln1.gain", (d,), "one"), (p + "ln1.bias", (d,), "zero"),
            (p + "mlp.fc1.w", (d, cfg.intermediate), "w"), (p + "mlp.fc1.b", (cfg.intermediate,), "zero"),
            (p + "mlp.fc2.w", (cfg.intermediate, d), "w"), (p + "mlp.fc2.b", (d,), "zero"),
            (p + "ln2.gain", (d,), "one"), (p + "ln2.bias", (d,), "zero"),
        ]
    shapes += [
        # MLM decoder weights are tied to emb.word
        ("head.mlm.b", (cfg.vocab_size,), "zero"),
        ("head.moc.w", (d, cfg.num_classes), "w"),
        ("head.moc.b", (cfg.num_classes,), "zero"),
        ("head.mrfr.w", (d, cfg.visual_dim), "w"),
        ("head.mrfr.b", (cfg.visual_dim,), "zero"),
        ("head.itm.w", (d, 1), "w"),
        ("head.itm.b", (1,), "zero"),
    ]
    params = {}
    for name, shape, kind in shapes:
        if kind == "w":
            arr = _trunc_normal(rng, shape, cfg.init_std)
        elif kind == "one":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr, requires_grad=True)
    return params


class Model:
    """Configuration plus named parameters, with the forward computation."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "Model":
        return cls(config, init_params(config, seed))

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    # -- embeddings -----------------------------------------------------------
    def embed_text(self, text_ids: np.ndarray) -> Tensor:
        cfg, P = self.config, self.params
        text_ids = np.asarray(text_ids)
        n = text_ids.shape[-1]
        if n > cfg.max_text_len:
            raise ConfigError(f"text length {n} exceeds max_text_len {cfg.max_text_len}")
        x = ag.embedding_lookup(P["emb.word"], text_ids)
        x = x + ag.index(P["emb.segment"], 0)
        x = x + ag.index(P["emb.position"], slice(0, n))
        return ag.layer_norm(x, P["emb.text_ln.gain"], P["emb.text_ln.bias"], cfg.ln_eps)

    def embed_visual(self, features: np.ndarray, geometry: np.ndarray) -> Tensor:
        cfg, P = self.config, self.params
        features = np.asarray(features, dtype=np.float64)
        if features.shape[-2] > cfg.n_visual:
            raise InputError(f"{features.shape[-2]} visual tokens exceed the configured {cfg.n_visual}")
        if features.shape[-1] != cfg.visual_dim:
            raise ShapeError(f"visual feature dim {features.shape[-1]} != configured {cfg.visual_dim}")
        x = ag.linear(Tensor(features), P["emb.image.w"], P["emb.image.b"])
        x = x + ag.linear(Tensor(geometry), P["emb.geometry.w"], P["emb.geometry.b"])
        x = x + ag.index(P["emb.segment"], 1)
        x = x + ag.index(P["emb.position"], cfg.max_text_len)
        return ag.layer_norm(x, P["emb.visual_ln.gain"], P["emb.visual_ln.bias"], cfg.ln_eps)

    # -- encoder --------------------------------------------------------------
    def _attention(self, x: Tensor, key_mask: np.ndarray, i: int) -> Tensor:
        cfg, P = self.config, self.params
        b, L, d = x.shape
        h, dh = cfg.heads, cfg.head_dim
        p = f"enc.{i}.attn."

        def split(t):
            return ag.transpose(ag.reshape(t, (b, L, h, dh)), (0, 2, 1, 3))

        q = split(ag.linear(x, P[p + "q.w"], P[p + "q.b"]))
        k = split(ag.linear(x, P[p + "k.w"], P[p + "k.b"]))
        v = split(ag.linear(x, P[p + "v.w"], P[p + "v.b"]))
        scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        probs = ag.softmax(scores, axis=-1, mask=key_mask[:, None, None, :])
        ctx = ag.reshape(ag.transpose(ag.matmul(probs, v), (0, 2, 1, 3)), (b, L, d))
        return ag.linear(ctx, P[p + "o.w"], P[p + "o.b"])

    def encode(self, text_emb: Tensor, visual_emb: Tensor, attention_mask: np.ndarray,
               mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
        """Post-LN Transformer over the concatenated sequence; returns [B, L, d]."""
        cfg, P = self.config, self.params
        x = ag.concat([text_emb, visual_emb], axis=1)
        attention_mask = np.asarray(attention_mask, dtype=bool)
        if attention_mask.shape != x.shape[:2]:
            raise ShapeError(f"attention mask {attention_mask.shape} does not match sequence {x.shape[:2]}")
        p_drop = cfg.dropout
        x = ag.dropout(x, p_drop, mode, rng)
        for i in range(cfg.layers):
            p = f"enc.{i}."
            a = ag.dropout(self._attention(x, attention_mask, i), p_drop, mode, rng)
            x = ag.layer_norm(x + a, P[p + "ln1.gain"], P[p + "ln1.bias"], cfg.ln_eps)
            m = ag.gelu(ag.linear(x, P[p + "mlp.fc1.w"], P[p + "mlp.fc1.b"]))
            m = ag.dropout(ag.linear(m, P[p + "mlp.fc2.w"], P[p + "mlp.fc2.b"]), p_drop, mode, rng)
            x = ag.layer_norm(x + m, P[p + "ln2.gain"], P[p + "ln2.bias"], cfg.ln_eps)
        return x

    def forward(self, text_ids: np.ndarray, text_mask: np.ndarray, features: np.ndarray,
                geometry: np.ndarray, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
        t = self.embed_text(text_ids)
        v = self.embed_visual(features, geometry)
        mask = np.concatenate([np.asarray(text_mask, dtype=bool),
                               np.ones(features.shape[:2], dtype=bool)], axis=1)
        return self.encode(t, v, mask, mode, rng)

    # -- heads ----------------------------------------------------------------
    def _rows(self, hidden: Tensor, flat_rows: np.ndarray) -> Tensor:
        b, L, d = hidden.shape
        return ag.take_rows(ag.reshape(hidden, (b * L, d)), flat_rows)

    def mlm_logits(self, hidden: Tensor, flat_rows: np.ndarray) -> Tensor:
        P = self.params
        h = self._rows(hidden, flat_rows)
        return ag.matmul(h, ag.transpose(P["emb.word"])) + P["head.mlm.b"]

    def moc_logits(self, hidden: Tensor, flat_rows: np.ndarray) -> Tensor:
        return ag.linear(self._rows(hidden, flat_rows), self.params["head.moc.w"], self.params["head.moc.b"])

    def mrfr_pred(self, hidden: Tensor, flat_rows: np.ndarray) -> Tensor:
        return ag.linear(self._rows(hidden, flat_rows), self.params["head.mrfr.w"], self.params["head.mrfr.b"])

    def itm_logit(self, hidden: Tensor) -> Tensor:
        """Raw similarity from the [CLS] output, shape [B]."""
        P = self.params
        cls = ag.index(hidden, (slice(None), 0))
        # elementwise product + row sum keeps each score independent of batch size
        return ag.tsum(ag.mul(cls, ag.reshape(P["head.itm.w"], (1, -1))), axis=1) + ag.reshape(P["head.itm.b"], ())

    def heads(self, hidden: Tensor, n_text: int | None = None) -> dict[str, Tensor]:
        """All head outputs for every position: text rows get MLM logits, visual rows MOC/MRFR."""
        b, L, _ = hidden.shape
        n_text = self.config.max_text_len if n_text is None else n_text
        n_vis = L - n_text
        text_rows = (np.arange(b)[:, None] * L + np.arange(n_text)[None]).ravel()
        vis_rows = (np.arange(b)[:, None] * L + n_text + np.arange(n_vis)[None]).ravel()
        logit = self.itm_logit(hidden)
        return {
            "mlm_logits": ag.reshape(self.mlm_logits(hidden, text_rows), (b, n_text, -1)),
            "moc_logits": ag.reshape(self.moc_logits(hidden, vis_rows), (b, n_vis, -1)),
            "mrfr_pred": ag.reshape(self.mrfr_pred(hidden, vis_rows), (b, n_vis, -1)),
            "itm_logit": logit,
            "itm_score": ag.sigmoid(logit),
        }

    # -- persistence ----------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def checkpoint_id(self) -> str:
        h = hashlib.sha256(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for k, p in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def save(self, stem, extra_meta: dict | None = None) -> Path:
        meta = {"config": self.config.to_dict(), "checkpoint_id": self.checkpoint_id()}
        if extra_meta:
            meta.update(extra_meta)
        return save_tensors(stem, self.state_dict(), meta)

    @classmethod
    def load(cls, stem) -> "Model":
        arrays, meta = load_tensors(stem)
        if "config" not in meta:
            raise CheckpointError(f"{stem}: manifest has no model config")
        cfg = ModelConfig.from_dict(meta["config"])
        model = cls.create(cfg, 0)
        model.load_state(arrays)
        return model

    def load_state(self, arrays: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise CheckpointError(f"checkpoint lacks tensor {sorted(missing)[0]}")
        for k, p in self.params.items():
            if arrays[k].shape != p.shape:
                raise CheckpointError(f"tensor {k}: checkpoint shape {arrays[k].shape} != model shape {p.shape}")
        for k, p in self.params.items():
            p.data = np.array(arrays[k], dtype=np.float64)
            p.grad = None

    def copy(self) -> "Model":
        return Model(self.config, {k: Tensor(p.data.copy(), requires_grad=True) for k, p in self.params.items()})
