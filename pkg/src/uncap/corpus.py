"""Unpaired corpus ingestion: vocabulary building, tokenization, JSONL loading."""

from __future__ import annotations

import string
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from .serialize import read_jsonl

PAD_INDEX = 0
SOS_INDEX = 1
EOS_INDEX = 2
UNK_INDEX = 3
SPECIAL_TOKENS = ("<pad>", "<sos>", "<eos>", "<unk>")

DEFAULT_MAX_LEN = 20
DEFAULT_MIN_COUNT = 4


class CorpusFormatError(ValueError):
    pass


def normalize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip punctuation off token edges."""
    tokens = []
    for raw in text.lower().split():
        tok = raw.strip(string.punctuation)
        if tok:
            tokens.append(tok)
    return tokens


class Vocabulary:
    """Bijective token<->index map with reserved special indices 0..3.

    Content words occupy indices 4 and up; every one of them occurred at
    least ``min_count`` times in the sentence corpus the vocabulary was
    built from.
    """

    def __init__(self, words: Sequence[str], min_count: int = DEFAULT_MIN_COUNT):
        if min_count < 1:
            raise ValueError("min_count must be >= 1")
        words = tuple(words)
        if len(set(words)) != len(words):
            raise ValueError("duplicate words in vocabulary")
        for w in words:
            if w in SPECIAL_TOKENS:
                raise ValueError(f"word {w!r} shadows a special token")
        self.min_count = min_count
        self.words: tuple[str, ...] = SPECIAL_TOKENS + words
        self._index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Vocabulary)
            and self.words == other.words
            and self.min_count == other.min_count
        )

    def index_of(self, token: str) -> int:
        return self._index.get(token, UNK_INDEX)

    def word_at(self, index: int) -> str:
        if not 0 <= index < len(self.words):
            raise ValueError(f"index {index} out of range for vocabulary of size {len(self.words)}")
        return self.words[index]

    @property
    def content_words(self) -> tuple[str, ...]:
        return self.words[len(SPECIAL_TOKENS) :]

    @property
    def content_indices(self) -> range:
        return range(len(SPECIAL_TOKENS), len(self.words))


@dataclass(frozen=True)
class TokenSequence:
    """A caption as vocabulary indices. Never padded, never empty."""

    indices: tuple[int, ...]
    max_len: int = DEFAULT_MAX_LEN

    def __post_init__(self):
        if not 1 <= len(self.indices) <= self.max_len:
            raise ValueError(
                f"sequence length {len(self.indices)} outside [1, {self.max_len}]"
            )
        for idx in self.indices:
            if not isinstance(idx, int) or idx < 0:
                raise ValueError(f"invalid token index {idx!r}")
            if idx == PAD_INDEX:
                raise ValueError("PAD is not a sequence token")

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)


@dataclass
class UnpairedCorpus:
    """Images and sentences with no pairing information between them."""

    images: list[dict]
    sentences: list[str]
    concepts: dict[str, tuple[str, ...]] | None = None


def build_vocabulary(sentences: Iterable[str], min_count: int = DEFAULT_MIN_COUNT) -> Vocabulary:
    """Vocabulary of all tokens occurring at least ``min_count`` times.

    Index order is descending frequency with lexicographic tie-breaking,
    which makes builds reproducible across platforms.
    """
    sentences = list(sentences)
    if not sentences:
        raise CorpusFormatError("cannot build a vocabulary from an empty corpus")
    counts: Counter[str] = Counter()
    for text in sentences:
        counts.update(normalize(text))
    kept = sorted(
        (tok for tok, c in counts.items() if c >= min_count),
        key=lambda tok: (-counts[tok], tok),
    )
    return Vocabulary(kept, min_count=min_count)


def tokenize(text: str, vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> TokenSequence:
    """Map normalized text to indices; unknown words become UNK; truncate."""
    tokens = normalize(text)
    if not tokens:
        raise CorpusFormatError(f"text {text!r} is empty after normalization")
    indices = tuple(vocab.index_of(t) for t in tokens[:max_len])
    return TokenSequence(indices=indices, max_len=max_len)


def detokenize(seq: TokenSequence | Sequence[int], vocab: Vocabulary) -> str:
    """Space-joined surface tokens with all specials dropped ("" if nothing left)."""
    indices = seq.indices if isinstance(seq, TokenSequence) else tuple(seq)
    words = []
    for idx in indices:
        word = vocab.word_at(idx)
        if idx >= len(SPECIAL_TOKENS):
            words.append(word)
    return " ".join(words)


def load_corpus(
    image_path: str,
    sentence_path: str,
    concept_path: str | None = None,
) -> UnpairedCorpus:
    """Load the unpaired datasets from JSONL files.

    Errors carry the offending file and line number; duplicate image ids
    are rejected with the full duplicate list.
    """
    images = []
    seen: dict[str, int] = {}
    duplicates = []
    for record in read_jsonl(image_path):
        image_id = record.get("id")
        if not isinstance(image_id, str) or not image_id:
            raise CorpusFormatError(f"{image_path}: image record without a string 'id': {record!r}")
        if ("feature" in record) == ("latent" in record):
            raise CorpusFormatError(
                f"{image_path}: image {image_id!r} must carry exactly one of 'feature'/'latent'"
            )
        if image_id in seen:
            duplicates.append(image_id)
        seen[image_id] = seen.get(image_id, 0) + 1
        images.append(record)
    if duplicates:
        raise CorpusFormatError(f"{image_path}: duplicate image ids: {sorted(set(duplicates))}")

    sentences = []
    for record in read_jsonl(sentence_path):
        text = record.get("text")
        if not isinstance(text, str) or not text.strip():
            raise CorpusFormatError(f"{sentence_path}: sentence record without non-empty 'text': {record!r}")
        sentences.append(text)

    concepts = None
    if concept_path is not None:
        concepts = {}
        for record in read_jsonl(concept_path):
            image_id = record.get("image_id")
            words = record.get("concepts")
            if not isinstance(image_id, str) or not isinstance(words, list):
                raise CorpusFormatError(
                    f"{concept_path}: concept record needs 'image_id' and 'concepts': {record!r}"
                )
            if image_id in concepts:
                raise CorpusFormatError(f"{concept_path}: duplicate concepts for image {image_id!r}")
            concepts[image_id] = tuple(str(w) for w in words)

    return UnpairedCorpus(images=images, sentences=sentences, concepts=concepts)
