"""WordPiece tokenization of captions (greedy longest-match-first)."""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
CONTINUATION = "##"
MAX_WORD_CHARS = 100


class Vocab:
    """Immutable token <-> id map.  ``[PAD]`` is always id 0."""

    def __init__(self, tokens: Sequence[str], lowercase: bool = True):
        tokens = list(tokens)
        if not tokens:
            raise ConfigError("vocabulary is empty")
        if len(set(tokens)) != len(tokens):
            dup = sorted({t for t in tokens if tokens.count(t) > 1})
            raise ConfigError(f"duplicate vocabulary entries: {dup[:5]}")
        for sp in SPECIAL_TOKENS:
            if sp not in tokens:
                raise ConfigError(f"vocabulary lacks reserved token {sp}")
        if tokens[0] != PAD:
            raise ConfigError(f"{PAD} must have id 0")
        self._tokens = tuple(tokens)
        self._ids = {t: i for i, t in enumerate(tokens)}
        self.lowercase = lowercase
        self.pad_id = self._ids[PAD]
        self.unk_id = self._ids[UNK]
        self.cls_id = self._ids[CLS]
        self.sep_id = self._ids[SEP]
        self.mask_id = self._ids[MASK]
        self.special_ids = frozenset(self._ids[t] for t in SPECIAL_TOKENS)
        # candidates for the MLM random-token replacement
        self.regular_ids = tuple(i for i in range(len(tokens)) if i not in self.special_ids)

    @classmethod
    def from_file(cls, path, lowercase: bool = True) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls([line.rstrip("\r") for line in text.split("\n") if line.strip()], lowercase=lowercase)

    @classmethod
    def default(cls) -> "Vocab":
        """The small fixture vocabulary shipped with the package."""
        text = resources.files("vlpretrain.resources").joinpath("vocab.txt").read_text(encoding="utf-8")
        return cls([line for line in text.split("\n") if line.strip()])

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        return self._ids.get(token, self.unk_id)

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self._tokens):
            raise IndexError(f"token id {idx} outside vocabulary of size {len(self._tokens)}")
        return self._tokens[idx]

    @property
    def tokens(self) -> tuple[str, ...]:
        return self._tokens

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self._tokens) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class TokenSequence:
    token_ids: tuple[int, ...]
    segment_ids: tuple[int, ...]
    positions: tuple[int, ...]
    attention_mask: tuple[bool, ...]

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def length(self) -> int:
        """Number of non-pad tokens."""
        return sum(self.attention_mask)


def _is_punct(ch: str) -> bool:
    cp = ord(ch)
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def basic_tokenize(text: str, lowercase: bool = True) -> list[str]:
    """Whitespace split, then punctuation split; optional lowercasing with accent stripping."""
    if lowercase:
        text = unicodedata.normalize("NFD", text.lower())
        text = "".join(c for c in text if unicodedata.category(c) != "Mn")
    words: list[str] = []
    for chunk in text.split():
        cur = []
        for ch in chunk:
            if _is_punct(ch):
                if cur:
                    words.append("".join(cur))
                    cur = []
                words.append(ch)
            else:
                cur.append(ch)
        if cur:
            words.append("".join(cur))
    return words


def wordpiece(word: str, vocab: Vocab) -> list[str]:
    if len(word) > MAX_WORD_CHARS:
        return [UNK]
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        piece = None
        while start < end:
            sub = word[start:end]
            if start > 0:
                sub = CONTINUATION + sub
            if sub in vocab:
                piece = sub
                break
            end -= 1
        if piece is None:
            return [UNK]
        pieces.append(piece)
        start = end
    return pieces


def subword_tokens(text: str, vocab: Vocab) -> list[str]:
    out: list[str] = []
    for word in basic_tokenize(text, vocab.lowercase):
        out.extend(wordpiece(word, vocab))
    return out


def tokenize(text: str, vocab: Vocab, max_len: int) -> TokenSequence:
    """``[CLS] pieces... [SEP]`` right-padded with ``[PAD]`` to ``max_len``."""
    if len(vocab) == 0:
        raise ConfigError("vocabulary is empty")
    if max_len < 3:
        raise ConfigError(f"max_len must be at least 3, got {max_len}")
    pieces = subword_tokens(text, vocab)[: max_len - 2]
    ids = [vocab.cls_id] + [vocab.id(p) for p in pieces] + [vocab.sep_id]
    n = len(ids)
    ids += [vocab.pad_id] * (max_len - n)
    return TokenSequence(
        token_ids=tuple(ids),
        segment_ids=(0,) * max_len,
        positions=tuple(range(max_len)),
        attention_mask=tuple([True] * n + [False] * (max_len - n)),
    )


def detokenize(seq: TokenSequence | Iterable[int], vocab: Vocab) -> str:
    ids = seq.token_ids if isinstance(seq, TokenSequence) else seq
    words: list[str] = []
    for i in ids:
        tok = vocab.token(int(i))
        if tok in SPECIAL_TOKENS and tok != UNK:
            continue
        if tok.startswith(CONTINUATION) and words:
            words[-1] += tok[len(CONTINUATION):]
        else:
            words.append(tok)
    return " ".join(words)


def normalize_text(text: str, lowercase: bool = True) -> str:
    """Whitespace/punctuation normal form used for round-trip comparison."""
    return " ".join(basic_tokenize(text, lowercase))
