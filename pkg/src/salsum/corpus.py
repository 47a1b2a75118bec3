"""Corpus ingestion: tokenization, vocabulary, salience labels, record I/O.

Records are UTF-8 lines "source<TAB>summary".  Word mode splits on Unicode
whitespace and case-folds; char mode emits one token per non-whitespace
code point.  Salience labels mark source tokens that recur in the summary
and are neither stopwords nor punctuation.
"""

from __future__ import annotations

import os
import unicodedata
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

PAD_ID = 0
UNK_ID = 1
BOS_ID = 2
EOS_ID = 3
RESERVED = ("<pad>", "<unk>", "<s>", "</s>")
_RESERVED_SET = frozenset(RESERVED)


class CorpusFormatError(ValueError):
    """A corpus line violates the one-TAB-per-line record format."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def tokenize(text: str, mode: str = "word") -> list[str]:
    """Split text into tokens. Word mode case-folds; char mode does not."""
    if mode == "word":
        return [t.casefold() for t in text.split()]
    if mode == "char":
        return [ch for ch in text if not ch.isspace()]
    raise ValueError(f"unknown tokenization mode: {mode!r}")


class Vocabulary:
    """Bijective token<->id map with PAD/UNK/BOS/EOS pinned to ids 0..3."""

    def __init__(self, id_to_token: Sequence[str]):
        if tuple(id_to_token[:4]) != RESERVED:
            raise ValueError("vocabulary must start with the four reserved tokens")
        self.id_to_token = list(id_to_token)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate token in vocabulary")

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        return self.id_to_token[idx]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id_of(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.token_of(i) for i in ids]


def build_vocabulary(token_sequences: Iterable[Sequence[str]], max_size: int, min_count: int = 1) -> Vocabulary:
    """Rank tokens by descending count (lexicographic ties), cap at max_size.

    max_size counts the whole table including the 4 reserved ids.
    """
    if max_size <= 4:
        raise ValueError(f"max_size must exceed the 4 reserved ids, got {max_size}")
    counts: Counter = Counter()
    for seq in token_sequences:
        counts.update(t for t in seq if t not in _RESERVED_SET)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    id_to_token = list(RESERVED)
    for token, count in ranked:
        if count < min_count or len(id_to_token) >= max_size:
            break
        id_to_token.append(token)
    return Vocabulary(id_to_token)


def save_vocabulary(vocab: Vocabulary, path: str) -> None:
    """One non-reserved token per line; id = 4 + line index.  Atomic write."""
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for token in vocab.id_to_token[len(RESERVED) :]:
            fh.write(token + "\n")
    os.replace(tmp, path)


def load_vocabulary(path: str) -> Vocabulary:
    tokens = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            token = line.rstrip("\r\n")
            if token:
                tokens.append(token)
    return Vocabulary(list(RESERVED) + tokens)


class StopwordSet:
    """Case-folded exact-match stopword lookup."""

    def __init__(self, words: Iterable[str] = ()):
        self.words = {w.casefold() for w in words}

    def __contains__(self, token: str) -> bool:
        return token.casefold() in self.words

    def __len__(self) -> int:
        return len(self.words)

    @classmethod
    def from_file(cls, path: str) -> "StopwordSet":
        words = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                word = line.strip()
                if word:
                    words.append(word)
        return cls(words)


def is_punctuation(token: str) -> bool:
    """True when every character is in a Unicode punctuation category."""
    return bool(token) and all(unicodedata.category(ch).startswith("P") for ch in token)


def derive_salience_labels(
    source_tokens: Sequence[str], summary_tokens: Sequence[str], stopwords: StopwordSet
) -> list[int]:
    """1 where a source token recurs in the summary and is content-bearing.

    Bag semantics on the summary side: order and multiplicity are ignored.
    Every matching source occurrence is labeled 1.
    """
    summary = set(summary_tokens)
    return [
        1 if (tok in summary and tok not in stopwords and not is_punctuation(tok)) else 0
        for tok in source_tokens
    ]


def content_positions(source_tokens: Sequence[str], stopwords: StopwordSet) -> list[bool]:
    """Graph-vertex mask: non-stopword, non-punctuation positions."""
    return [not (tok in stopwords or is_punctuation(tok)) for tok in source_tokens]


@dataclass(frozen=True)
class LengthLimits:
    max_src_len: int
    max_tgt_len: int

    @classmethod
    def for_mode(cls, mode: str) -> "LengthLimits":
        if mode == "word":
            return cls(100, 50)
        if mode == "char":
            return cls(120, 25)
        raise ValueError(f"unknown tokenization mode: {mode!r}")


@dataclass
class TrainingPair:
    """One encoded (source, summary) record.

    target_ids ends with EOS and excludes BOS; the decoder prepends BOS
    itself.  content_mask marks word-graph vertices, independent of whether
    the token recurs in the summary.
    """

    source_ids: list[int]
    target_ids: list[int]
    salience_labels: list[int]
    source_tokens: list[str]
    summary_tokens: list[str]
    content_mask: list[bool]


def encode_pair(
    source_tokens: Sequence[str],
    summary_tokens: Sequence[str],
    vocab: Vocabulary,
    limits: LengthLimits,
    stopwords: Optional[StopwordSet] = None,
) -> Optional[TrainingPair]:
    """Encode one record; returns None as the skip signal for empty sources.

    Source ids, labels, and the content mask are truncated in lockstep at
    max_src_len; the summary keeps max_tgt_len - 1 tokens so EOS fits.
    """
    if stopwords is None:
        stopwords = StopwordSet()
    src = list(source_tokens)[: limits.max_src_len]
    if not src:
        return None
    labels = derive_salience_labels(source_tokens, summary_tokens, stopwords)[: limits.max_src_len]
    mask = content_positions(source_tokens, stopwords)[: limits.max_src_len]
    tgt = list(summary_tokens)[: limits.max_tgt_len - 1]
    return TrainingPair(
        source_ids=vocab.encode(src),
        target_ids=vocab.encode(tgt) + [EOS_ID],
        salience_labels=labels,
        source_tokens=src,
        summary_tokens=tgt,
        content_mask=mask,
    )


def read_corpus(path: str) -> list[tuple[str, str]]:
    """Read "source<TAB>summary" lines; any other TAB count is an error."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            n_tabs = line.count("\t")
            if n_tabs != 1:
                raise CorpusFormatError(line_no, f"expected exactly one TAB, found {n_tabs}")
            source, summary = line.split("\t")
            records.append((source, summary))
    return records


def load_pairs(
    records: Sequence[tuple[str, str]],
    vocab: Vocabulary,
    limits: LengthLimits,
    stopwords: StopwordSet,
    mode: str = "word",
) -> tuple[list[TrainingPair], int]:
    """Tokenize and encode records; returns (pairs, skipped_count)."""
    pairs = []
    skipped = 0
    for source_text, summary_text in records:
        pair = encode_pair(
            tokenize(source_text, mode), tokenize(summary_text, mode), vocab, limits, stopwords
        )
        if pair is None:
            skipped += 1
        else:
            pairs.append(pair)
    return pairs, skipped
