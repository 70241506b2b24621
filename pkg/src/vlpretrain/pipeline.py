"""Weakly supervised image-text corpus cleaning over local JSONL records.

Stages, in order:

1. ``images``: drop records by page language, dominance, size and content flags.
2. ``sentences``: strip bad spans and noisy words from each candidate text, then
   drop texts of abnormal length or with too many out-of-vocabulary words.
3. ``scoring``: score every surviving (image, text) pair and drop low scores.
4. ``best_per_image``: keep the single best text per ``image_id`` (an image may
   arrive in several records, one per web page it was found on).
5. ``dedup``: drop every pair whose text is the chosen text of more than
   ``max_dup`` images.

Every stage keeps ``input == kept + sum(dropped)``.  The output is sorted by
image id and does not depend on input order or worker count.
"""

from __future__ import annotations

import json
import math
import re
import shutil
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Iterator, Protocol, Sequence

from .checkpoint import atomic_write_text, dump_json
from .data import read_jsonl
from .errors import ConfigError, InputError
from .tokenizer import UNK, Vocab, basic_tokenize, wordpiece

CONTENT_FLAGS = ("pornographic", "racy", "unnatural")
TEXT_SOURCES = ("alt", "title", "surrounding")
STAGES = ("images", "sentences", "scoring", "best_per_image", "dedup")

DEFAULT_BAD_SPANS = (
    r"https?://\S+",
    r"www\.\S+",
    r"\S+@\S+\.\w+",
    r"&[a-z]+;",
    r"\S+\.(?:jpe?g|png|gif|bmp|webp)\b",
    r"\[[^\]]*\]",
    r"\bclick here\b",
    r"\bimage \d+ of \d+\b",
)
DEFAULT_NOISY_WORDS = ("click", "buy", "cheap", "sale", "download", "subscribe", "xxx", "sexy")


@dataclass(frozen=True)
class Policy:
    languages: tuple[str, ...] = ("en",)
    min_side: int = 300  # both sides must be strictly larger
    blocked_flags: tuple[str, ...] = CONTENT_FLAGS
    bad_spans: tuple[str, ...] = DEFAULT_BAD_SPANS
    noisy_words: tuple[str, ...] = DEFAULT_NOISY_WORDS
    min_len: int = 3
    max_len: int = 30
    max_oov_ratio: float = 0.25
    score_threshold: float = 0.5
    max_dup: int = 10
    vocab: str | None = None  # WordPiece vocabulary used for the OOV test; None = bundled vocab

    def __post_init__(self):
        for k in ("languages", "blocked_flags", "bad_spans", "noisy_words"):
            object.__setattr__(self, k, tuple(getattr(self, k)))
        if not 0 <= self.min_len <= self.max_len:
            raise ConfigError("need 0 <= min_len <= max_len")
        if not 0.0 <= self.max_oov_ratio <= 1.0:
            raise ConfigError("max_oov_ratio must be in [0, 1]")
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ConfigError("score_threshold must be in [0, 1]")
        if self.max_dup < 1:
            raise ConfigError("max_dup must be >= 1")
        for p in self.bad_spans:
            try:
                re.compile(p)
            except re.error as e:
                raise ConfigError(f"bad span pattern {p!r}: {e}") from None

    @classmethod
    def from_dict(cls, d: dict) -> "Policy":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown policy keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "Policy":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


# -- stage 1 ---------------------------------------------------------------------

def validate_record(rec: dict) -> None:
    """Raise InputError unless ``rec`` has the raw-record fields with sane values."""
    if not isinstance(rec.get("image_id"), str) or not rec["image_id"]:
        raise InputError("record needs a non-empty string image_id")
    for k in ("width", "height"):
        v = rec.get(k)
        if not isinstance(v, (int, float)) or isinstance(v, bool) or v < 0:
            raise InputError(f"{rec['image_id']}: {k} must be a non-negative number")
    if not isinstance(rec.get("candidate_texts", []), list):
        raise InputError(f"{rec['image_id']}: candidate_texts must be a list")
    for t in rec.get("candidate_texts", []):
        if not isinstance(t, dict) or not isinstance(t.get("text"), str):
            raise InputError(f"{rec['image_id']}: candidate text entries need a 'text' string")
        if t.get("source", "alt") not in TEXT_SOURCES:
            raise InputError(f"{rec['image_id']}: unknown text source {t.get('source')!r}")


def filter_image(rec: dict, policy: Policy) -> str | None:
    """Drop reason for a record, or None to keep it.  Reasons are checked in a fixed order."""
    try:
        validate_record(rec)
    except InputError:
        return "invalid"
    if rec.get("page_lang", "") not in policy.languages:
        return "lang"
    if not rec.get("is_dominant", False):
        return "dominant"
    if rec["width"] <= policy.min_side or rec["height"] <= policy.min_side:
        return "size"
    if set(rec.get("content_flags", ())) & set(policy.blocked_flags):
        return "content"
    return None


# -- stage 2 ---------------------------------------------------------------------

def _words(text: str) -> list[str]:
    return [t for t in basic_tokenize(text) if any(ch.isalnum() for ch in t)]


class SentenceCleaner:
    def __init__(self, policy: Policy, vocab: Vocab | None = None):
        self.policy = policy
        self.vocab = vocab or (Vocab.from_file(policy.vocab) if policy.vocab else Vocab.default())
        self._spans = [re.compile(p, re.IGNORECASE) for p in policy.bad_spans]
        noisy = sorted(policy.noisy_words, key=len, reverse=True)
        self._noisy = re.compile(r"\b(?:" + "|".join(map(re.escape, noisy)) + r")\b", re.IGNORECASE) if noisy else None

    def strip(self, text: str) -> str:
        for p in self._spans:
            text = p.sub(" ", text)
        if self._noisy is not None:
            text = self._noisy.sub(" ", text)
        return " ".join(text.split())

    def oov_ratio(self, words: Sequence[str]) -> float:
        if not words:
            return 0.0
        return sum(UNK in wordpiece(w, self.vocab) for w in words) / len(words)

    def __call__(self, text: str) -> tuple[str | None, str | None]:
        """``(cleaned, None)`` when kept, ``(None, reason)`` when dropped."""
        cleaned = self.strip(text)
        words = _words(cleaned)
        if not self.policy.min_len <= len(words) <= self.policy.max_len:
            return None, "length"
        if self.oov_ratio(words) > self.policy.max_oov_ratio:
            return None, "oov"
        return cleaned, None


def clean_sentence(text: str, policy: Policy, vocab: Vocab | None = None) -> tuple[str | None, str | None]:
    return SentenceCleaner(policy, vocab)(text)


# -- stage 3 ---------------------------------------------------------------------

@dataclass(frozen=True)
class ScoredPair:
    image_id: str
    text: str
    score: float
    features: dict[str, list[float]] = field(default_factory=dict)
    source: str = "alt"
    record: dict = field(default_factory=dict, compare=False)  # raw-record fields carried to the output

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


class SemanticScorer(Protocol):
    def features(self, rec: dict, text: str) -> dict[str, list[float]]: ...

    def score(self, feats: dict[str, list[float]]) -> float: ...


@dataclass(frozen=True)
class ReferenceScorer:
    """Logistic over interpretable features.

    ``overlap`` is the fraction of the image's tags named in the text and
    ``length_prior`` is a Gaussian bump around a typical caption length.
    Default weights put a fully overlapping caption above 0.98 and a caption
    with no overlap below 0.05.
    """

    bias: float = -4.0
    w_overlap: float = 8.0
    w_length: float = 1.0
    typical_len: float = 13.0
    len_scale: float = 6.0

    def features(self, rec: dict, text: str) -> dict[str, list[float]]:
        words = _words(text)
        tags = {w for t in rec.get("tags", []) for w in _words(t)}
        n = len(words)
        overlap = len(tags & set(words)) / len(tags) if tags else 0.0
        length_prior = math.exp(-0.5 * ((n - self.typical_len) / self.len_scale) ** 2) if n else 0.0
        return {"text": [float(n), length_prior], "image": [float(len(tags))], "cross": [overlap]}

    def score(self, feats: dict[str, list[float]]) -> float:
        if feats["text"][0] == 0:
            return 0.0
        z = self.bias + self.w_overlap * feats["cross"][0] + self.w_length * feats["text"][1]
        return 1.0 / (1.0 + math.exp(-z))


def score_pair(rec: dict, text: str, scorer: SemanticScorer) -> ScoredPair:
    feats = scorer.features(rec, text)
    s = float(scorer.score(feats))
    if not 0.0 <= s <= 1.0 or math.isnan(s):
        raise ValueError(f"scorer returned {s} outside [0, 1]")
    return ScoredPair(rec["image_id"], text, s, feats)


# -- stats ------------------------------------------------------------------------

@dataclass
class StageCounter:
    input: int = 0
    kept: int = 0
    dropped: Counter = field(default_factory=Counter)

    def drop(self, reason: str, n: int = 1) -> None:
        if n:
            self.dropped[reason] += n

    @property
    def balanced(self) -> bool:
        return self.input == self.kept + sum(self.dropped.values())

    def to_dict(self) -> dict:
        return {"input": self.input, "kept": self.kept, "dropped": dict(sorted(self.dropped.items()))}


@dataclass
class PipelineStats:
    stages: dict[str, StageCounter] = field(default_factory=lambda: {s: StageCounter() for s in STAGES})

    def reconciles(self) -> bool:
        return all(c.balanced for c in self.stages.values())

    def to_dict(self) -> dict:
        return {"stages": {k: self.stages[k].to_dict() for k in STAGES}, "reconciles": self.reconciles()}


# -- per-record work (parallelisable) ---------------------------------------------------

@dataclass
class _RecordResult:
    image_reason: str | None
    sentence_drops: list[str]
    score_drops: list[str]
    pairs: list[tuple[str, str, float, dict]]  # (text, source, score, features)


def _process_record(rec: dict, policy: Policy, cleaner: SentenceCleaner, scorer: SemanticScorer) -> _RecordResult:
    reason = filter_image(rec, policy)
    if reason is not None:
        return _RecordResult(reason, [], [], [])
    sdrops, pdrops, pairs = [], [], []
    for cand in rec.get("candidate_texts", []):
        cleaned, why = cleaner(cand["text"])
        if cleaned is None:
            sdrops.append(why)
            continue
        try:
            sp = score_pair(rec, cleaned, scorer)
        except Exception:  # a failing scorer skips the pair, not the run
            pdrops.append("scorer_error")
            continue
        if sp.score < policy.score_threshold:
            pdrops.append("low_score")
            continue
        pairs.append((cleaned, cand.get("source", "alt"), sp.score, sp.features))
    return _RecordResult(None, sdrops, pdrops, pairs)


_WORKER_STATE: tuple | None = None


def _init_worker(policy, scorer):
    global _WORKER_STATE
    _WORKER_STATE = (policy, SentenceCleaner(policy), scorer)


def _worker(rec):
    policy, cleaner, scorer = _WORKER_STATE
    return _process_record(rec, policy, cleaner, scorer)


def _carry(rec: dict) -> dict:
    """Fields of the raw record passed through to the output."""
    return {k: v for k, v in rec.items() if k != "candidate_texts"}


def run(records: Iterable[dict], policy: Policy = Policy(), scorer: SemanticScorer | None = None,
        workers: int = 1) -> tuple[list[dict], PipelineStats]:
    """Clean ``records``; returns (output records sorted by image id, stats)."""
    scorer = scorer or ReferenceScorer()
    stats = PipelineStats()
    records = list(records)
    if workers > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(policy, scorer)) as ex:
            results = list(ex.map(_worker, records, chunksize=64))
    else:
        cleaner = SentenceCleaner(policy)
        results = [_process_record(r, policy, cleaner, scorer) for r in records]

    img, sen, sco = stats.stages["images"], stats.stages["sentences"], stats.stages["scoring"]
    pairs: list[ScoredPair] = []
    for rec, res in zip(records, results):
        img.input += 1
        if res.image_reason is not None:
            img.drop(res.image_reason)
            continue
        img.kept += 1
        n_text = len(rec.get("candidate_texts", []))
        sen.input += n_text
        sen.kept += n_text - len(res.sentence_drops)
        for r in res.sentence_drops:
            sen.drop(r)
        sco.input += n_text - len(res.sentence_drops)
        sco.kept += len(res.pairs)
        for r in res.score_drops:
            sco.drop(r)
        carried = _carry(rec)
        for text, source, sc, feats in res.pairs:
            pairs.append(ScoredPair(rec["image_id"], text, sc, feats, source, carried))

    kept, agg_stats = aggregate(pairs, policy.max_dup)
    stats.stages["best_per_image"] = agg_stats["best_per_image"]
    stats.stages["dedup"] = agg_stats["dedup"]
    out = []
    for p in kept:
        rec = dict(p.record)
        rec["candidate_texts"] = [{"source": p.source, "text": p.text}]
        rec["score"] = round(p.score, 12)
        out.append(rec)
    return out, stats


def _rank_key(p: ScoredPair) -> tuple:
    # highest score first; ties -> lexicographically smallest text, then source, then record content
    return (-p.score, p.text, p.source, json.dumps(p.record, sort_keys=True))


def aggregate(pairs: Iterable[ScoredPair], max_dup: int = 10) -> tuple[list[ScoredPair], dict[str, StageCounter]]:
    """Best pair per image, then drop texts chosen by more than ``max_dup`` images.

    Returns the surviving pairs sorted by image id and the two stage counters.
    """
    if max_dup < 1:
        raise ConfigError("max_dup must be >= 1")
    best_stage, dedup = StageCounter(), StageCounter()
    best: dict[str, ScoredPair] = {}
    for p in pairs:
        best_stage.input += 1
        cur = best.get(p.image_id)
        if cur is None or _rank_key(p) < _rank_key(cur):
            best[p.image_id] = p
    best_stage.kept = len(best)
    best_stage.drop("not_best", best_stage.input - len(best))

    dedup.input = len(best)
    text_images = Counter(normalize_key(p.text) for p in best.values())
    out = []
    for image_id in sorted(best):
        p = best[image_id]
        if text_images[normalize_key(p.text)] > max_dup:
            dedup.drop("over_duplicated")
            continue
        dedup.kept += 1
        out.append(p)
    return out, {"best_per_image": best_stage, "dedup": dedup}


def normalize_key(text: str) -> str:
    return " ".join(basic_tokenize(text))


# -- files --------------------------------------------------------------------------------

def _records_path(path: Path) -> Path:
    return path / "records.jsonl" if path.is_dir() else path


def run_files(in_path, out_path, policy: Policy = Policy(), report_path=None,
              scorer: SemanticScorer | None = None, workers: int = 1) -> PipelineStats:
    """File front end.  A corpus directory input yields a corpus directory output
    (feature blobs are copied unchanged); a JSONL file input yields a JSONL file."""
    in_path, out_path = Path(in_path), Path(out_path)
    src = _records_path(in_path)
    if not src.exists():
        raise InputError(f"no input records at {src}")
    out, stats = run(read_jsonl(src), policy, scorer, workers)
    body = "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in out)
    if in_path.is_dir():
        out_path.mkdir(parents=True, exist_ok=True)
        for name in ("features.json", "features.bin", "corpus.json"):
            if (in_path / name).exists():
                shutil.copyfile(in_path / name, out_path / name)
        atomic_write_text(out_path / "records.jsonl", body)
    else:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out_path, body)
    if report_path is not None:
        report = {"policy": policy.to_dict(), "output_records": len(out), **stats.to_dict()}
        atomic_write_text(Path(report_path), dump_json(report))
    return stats


def iter_records(path) -> Iterator[dict]:
    yield from read_jsonl(_records_path(Path(path)))
