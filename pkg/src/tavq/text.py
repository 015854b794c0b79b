"""Sentence / phrase / word splitting of long captions and unit embedding."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

TAGS = ("noun", "adjective", "quantifier", "determiner", "verb", "other")
WORD_TAGS = frozenset({"noun", "adjective", "quantifier"})

_SENTENCE_END = re.compile(r"[.!?]+(?=\s|$)")
_EDGE_PUNCT = ".,;:!?\"'()[]{}"


class Lexicon:
    """Case-insensitive word -> part-of-speech table; unknown words are "other"."""

    def __init__(self, table: dict[str, str] | None = None):
        self._table: dict[str, str] = {}
        for word, tag in (table or {}).items():
            self.add(word, tag)

    def add(self, word: str, tag: str) -> None:
        if tag not in TAGS:
            raise ValueError(f"unknown tag {tag!r} for {word!r}; expected one of {TAGS}")
        self._table[word.lower()] = tag

    def tag(self, word: str) -> str:
        return self._table.get(word.lower(), "other")

    def __contains__(self, word: str) -> bool:
        return word.lower() in self._table

    def words(self, tag: str | None = None) -> list[str]:
        return sorted(w for w, t in self._table.items() if tag is None or t == tag)

    @classmethod
    def from_text(cls, text: str) -> "Lexicon":
        lex = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"lexicon line {lineno}: expected 'word<TAB>tag', got {line!r}")
            lex.add(parts[0].strip(), parts[1].strip())
        return lex

    @classmethod
    def from_file(cls, path: str | Path) -> "Lexicon":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def default(cls) -> "Lexicon":
        text = resources.files("tavq.data").joinpath("lexicon.tsv").read_text(encoding="utf-8")
        return cls.from_text(text)


def tokenize(text: str) -> list[str]:
    toks = (t.strip(_EDGE_PUNCT) for t in text.split())
    return [t for t in toks if t]


def split_sentences(text: str) -> list[str]:
    """Split on runs of '.', '!' or '?' followed by whitespace or the end."""
    parts = (p.strip() for p in _SENTENCE_END.split(text))
    return [p for p in parts if p]


def chunk_phrases(sentence: str, lex: Lexicon) -> list[str]:
    """Maximal ``determiner? (adjective|quantifier)* noun+`` runs.

    A run made of a single bare noun is skipped; words cover those.
    """
    tokens = tokenize(sentence)
    tags = [lex.tag(t) for t in tokens]
    phrases = []
    i = 0
    while i < len(tokens):
        j = i
        if tags[j] == "determiner":
            j += 1
        while j < len(tokens) and tags[j] in ("adjective", "quantifier"):
            j += 1
        k = j
        while k < len(tokens) and tags[k] == "noun":
            k += 1
        if k > j:
            if k - i >= 2:
                phrases.append(" ".join(tokens[i:k]))
            i = k
        else:
            i += 1
    return phrases


def filter_words(text: str, lex: Lexicon) -> list[str]:
    """Lowercased nouns, adjectives and quantifiers, first occurrence order."""
    seen: dict[str, None] = {}
    for tok in tokenize(text):
        low = tok.lower()
        if lex.tag(low) in WORD_TAGS and low not in seen:
            seen[low] = None
    return list(seen)


# --------------------------------------------------------------------------
# embedding providers


class HashEmbedding:
    """Deterministic unit vectors: the token's SHA-256 keys a Philox stream."""

    normalize_units = True

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("embedding dimension must be positive")
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def vector(self, token: str) -> np.ndarray:
        token = token.lower()
        vec = self._cache.get(token)
        if vec is None:
            digest = hashlib.sha256(token.encode("utf-8")).digest()
            key = int.from_bytes(digest[:16], "little")
            gen = np.random.Generator(np.random.Philox(key=key))
            vec = gen.standard_normal(self.dim)
            vec /= np.linalg.norm(vec)
            vec.setflags(write=False)
            self._cache[token] = vec
        return vec


class FileEmbedding:
    """Vectors read from a text table: header ``count dim`` then ``token v1 .. vdim``."""

    normalize_units = False

    def __init__(self, table: dict[str, np.ndarray], dim: int):
        self.dim = dim
        self._table = table

    @classmethod
    def from_file(cls, path: str | Path) -> "FileEmbedding":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise ValueError(f"{path}: empty embedding file")
        count, dim = (int(x) for x in lines[0].split())
        table = {}
        for lineno, line in enumerate(lines[1:], 2):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != dim + 1:
                raise ValueError(f"{path}:{lineno}: expected {dim} values after the token")
            table[parts[0]] = np.array([float(x) for x in parts[1:]], dtype=np.float64)
        if len(table) != count:
            raise ValueError(f"{path}: header says {count} tokens, found {len(table)}")
        return cls(table, dim)

    def vector(self, token: str) -> np.ndarray:
        vec = self._table.get(token)
        if vec is None:
            vec = self._table.get(token.lower())
        if vec is None:
            raise KeyError(token)
        return vec


EmbeddingProvider = HashEmbedding | FileEmbedding


def embed(units: list[str], provider: EmbeddingProvider) -> list[np.ndarray]:
    """One vector per unit; multi-word units average their word vectors."""
    out = []
    missing: list[str] = []
    for unit in units:
        words = tokenize(unit)
        if not words:
            raise ValueError(f"cannot embed an empty unit {unit!r}")
        vecs = []
        for w in words:
            try:
                vecs.append(provider.vector(w))
            except KeyError:
                missing.append(w)
        if missing:
            continue
        if len(vecs) == 1:
            vec = np.array(vecs[0], dtype=np.float64)
        else:
            vec = np.mean(vecs, axis=0)
            if provider.normalize_units:
                norm = np.linalg.norm(vec)
                if norm > 0:
                    vec = vec / norm
        out.append(vec)
    if missing:
        raise KeyError(f"tokens missing from embedding table: {', '.join(sorted(set(missing)))}")
    return out


@dataclass
class GranularText:
    sentences: list[str]
    phrases: list[str]
    words: list[str]
    sentence_emb: np.ndarray
    phrase_emb: np.ndarray
    word_emb: np.ndarray
    dim: int = field(default=0)

    def units(self, granularity: str) -> np.ndarray:
        return {"word": self.word_emb, "phrase": self.phrase_emb,
                "sentence": self.sentence_emb}[granularity]

    def counts(self) -> tuple[int, int, int]:
        return len(self.words), len(self.phrases), len(self.sentences)

    @staticmethod
    def merge(bundles: list["GranularText"]) -> "GranularText":
        """Concatenate several bundles (no deduplication)."""
        dim = bundles[0].dim
        cat = lambda name: np.concatenate([getattr(b, name) for b in bundles], axis=0)  # noqa: E731
        return GranularText(
            sentences=[s for b in bundles for s in b.sentences],
            phrases=[p for b in bundles for p in b.phrases],
            words=[w for b in bundles for w in b.words],
            sentence_emb=cat("sentence_emb"), phrase_emb=cat("phrase_emb"),
            word_emb=cat("word_emb"), dim=dim)


def _stack(vecs: list[np.ndarray], dim: int) -> np.ndarray:
    return np.stack(vecs) if vecs else np.zeros((0, dim))


def encode_caption(text: str, lex: Lexicon, provider: EmbeddingProvider) -> GranularText:
    sentences = split_sentences(text)
    phrases = [p for s in sentences for p in chunk_phrases(s, lex)]
    words = filter_words(text, lex)
    d = provider.dim
    return GranularText(
        sentences=sentences, phrases=phrases, words=words,
        sentence_emb=_stack(embed(sentences, provider), d),
        phrase_emb=_stack(embed(phrases, provider), d),
        word_emb=_stack(embed(words, provider), d),
        dim=d)
