"""Corpus ingestion, a from-scratch BM25 inverted index, and hit-set overlap."""

from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

from .errors import InputError

logger = logging.getLogger(__name__)

INDEX_FORMAT = "grouprag-index-v1"
DEFAULT_K1 = 1.2
DEFAULT_B = 0.75

_TOKEN_RE = re.compile(r"[^\W_]+")


def tokenize(text: str) -> List[str]:
    """Lowercase and split on anything that is not a letter or digit. No stemming."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class ChunkingConfig:
    max_tokens: int = 256
    overlap_tokens: int = 32

    def __post_init__(self) -> None:
        if not (0 <= self.overlap_tokens < self.max_tokens):
            raise InputError(
                f"need 0 <= overlap_tokens < max_tokens, got "
                f"overlap={self.overlap_tokens} max={self.max_tokens}"
            )


@dataclass(frozen=True)
class Chunk:
    id: str
    doc_id: str
    text: str
    token_count: int

    def to_dict(self) -> dict:
        return {"id": self.id, "doc_id": self.doc_id, "text": self.text, "token_count": self.token_count}

    @classmethod
    def from_dict(cls, data: dict) -> "Chunk":
        return cls(str(data["id"]), str(data["doc_id"]), str(data["text"]), int(data["token_count"]))


@dataclass
class Corpus:
    chunks: List[Chunk] = field(default_factory=list)
    chunking: ChunkingConfig = field(default_factory=ChunkingConfig)
    warnings: List[str] = field(default_factory=list)

    @property
    def skipped_documents(self) -> int:
        return sum(1 for w in self.warnings if w.startswith("skipped"))


@dataclass(frozen=True)
class RankedHits:
    query: str
    k: int
    entries: Tuple[Tuple[str, float], ...] = ()

    @property
    def ids(self) -> List[str]:
        return [cid for cid, _ in self.entries]

    def to_dict(self) -> dict:
        return {"query": self.query, "k": self.k, "entries": [[c, s] for c, s in self.entries]}

    @classmethod
    def from_dict(cls, data: dict) -> "RankedHits":
        return cls(
            query=data["query"],
            k=int(data["k"]),
            entries=tuple((str(c), float(s)) for c, s in data["entries"]),
        )


def window_chunks(tokens: Sequence[str], cfg: ChunkingConfig) -> List[List[str]]:
    """Sliding windows of at most ``max_tokens`` with ``overlap_tokens`` carried over."""
    if not tokens:
        return []
    step = cfg.max_tokens - cfg.overlap_tokens
    out = []
    start = 0
    while True:
        out.append(list(tokens[start : start + cfg.max_tokens]))
        if start + cfg.max_tokens >= len(tokens):
            return out
        start += step


def _iter_documents(source: Path) -> Iterator[Tuple[str, str]]:
    if source.is_dir():
        files = sorted(p for p in source.rglob("*") if p.is_file() and p.suffix in (".txt", ".jsonl"))
        for path in files:
            if path.suffix == ".txt":
                yield path.relative_to(source).with_suffix("").as_posix(), path.read_text(encoding="utf-8")
            else:
                yield from _iter_jsonl(path)
    elif source.suffix == ".jsonl":
        yield from _iter_jsonl(source)
    else:
        yield source.stem, source.read_text(encoding="utf-8")


def _iter_jsonl(path: Path) -> Iterator[Tuple[str, str]]:
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                yield str(rec["id"]), str(rec["text"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise InputError(f"{path}:{lineno}: expected {{\"id\", \"text\"}} record ({exc})") from exc


def ingest_corpus(source_path: Union[str, Path], config: Optional[ChunkingConfig] = None) -> Corpus:
    """Split every document under ``source_path`` into whitespace-token windows.

    Chunk ids are ``"<doc_id>:<window index>"``. Documents with no tokens are
    skipped and noted in ``Corpus.warnings``.
    """
    config = config or ChunkingConfig()
    source = Path(source_path)
    if not source.exists():
        raise InputError(f"corpus path does not exist: {source}")
    corpus = Corpus(chunking=config)
    seen_docs = set()
    for doc_id, text in _iter_documents(source):
        if doc_id in seen_docs:
            raise InputError(f"duplicate document id {doc_id!r} in {source}")
        seen_docs.add(doc_id)
        tokens = text.split()
        if not tokens:
            corpus.warnings.append(f"skipped empty document {doc_id!r}")
            continue
        for idx, window in enumerate(window_chunks(tokens, config)):
            corpus.chunks.append(Chunk(f"{doc_id}:{idx}", doc_id, " ".join(window), len(window)))
    if not seen_docs:
        corpus.warnings.append(f"no documents found under {source}")
    for w in corpus.warnings:
        logger.warning(w)
    return corpus


class Index:
    """Immutable BM25 inverted index over a corpus' chunks."""

    def __init__(
        self,
        chunks: Sequence[Chunk],
        k1: float = DEFAULT_K1,
        b: float = DEFAULT_B,
        chunking: Optional[ChunkingConfig] = None,
    ) -> None:
        self._chunks: Tuple[Chunk, ...] = tuple(chunks)
        self.k1 = k1
        self.b = b
        self.chunking = chunking or ChunkingConfig()
        self._by_id: Dict[str, int] = {}
        for pos, chunk in enumerate(self._chunks):
            if chunk.id in self._by_id:
                raise InputError(f"duplicate chunk id {chunk.id!r}")
            self._by_id[chunk.id] = pos

        term_freqs = [Counter(tokenize(c.text)) for c in self._chunks]
        self._lengths: Tuple[int, ...] = tuple(sum(tf.values()) for tf in term_freqs)
        n = len(self._chunks)
        self.avg_length = sum(self._lengths) / n if n else 0.0

        postings: Dict[str, List[Tuple[int, int]]] = {}
        for pos, tf in enumerate(term_freqs):
            for term in sorted(tf):
                postings.setdefault(term, []).append((pos, tf[term]))
        self._postings = {t: tuple(p) for t, p in sorted(postings.items())}
        self._doc_freq = {t: len(p) for t, p in self._postings.items()}
        # Lucene-style idf stays positive, so every matching chunk scores > 0
        self._idf = {t: math.log(1.0 + (n - df + 0.5) / (df + 0.5)) for t, df in self._doc_freq.items()}

    def __len__(self) -> int:
        return len(self._chunks)

    @property
    def chunks(self) -> Tuple[Chunk, ...]:
        return self._chunks

    @property
    def vocabulary(self) -> frozenset:
        return frozenset(self._postings)

    def doc_freq(self, term: str) -> int:
        return self._doc_freq.get(term, 0)

    def term_freq(self, chunk_id: str, term: str) -> int:
        pos = self._by_id[chunk_id]
        for p, tf in self._postings.get(term, ()):
            if p == pos:
                return tf
        return 0

    def chunk(self, chunk_id: str) -> Chunk:
        try:
            return self._chunks[self._by_id[chunk_id]]
        except KeyError:
            raise InputError(f"unknown chunk id {chunk_id!r}") from None

    def __contains__(self, chunk_id: object) -> bool:
        return chunk_id in self._by_id

    def scores(self, query_tokens: Sequence[str]) -> Dict[int, float]:
        """Accumulate BM25 contributions per chunk position, query tokens in order."""
        acc: Dict[int, float] = {}
        for term in query_tokens:
            idf = self._idf.get(term)
            if idf is None:
                continue
            for pos, tf in self._postings[term]:
                norm = self.k1 * (1 - self.b + self.b * self._lengths[pos] / self.avg_length)
                acc[pos] = acc.get(pos, 0.0) + idf * (tf * (self.k1 + 1)) / (tf + norm)
        return acc

    def signature(self) -> dict:
        return {
            "format": INDEX_FORMAT,
            "k1": self.k1,
            "b": self.b,
            "chunking": {
                "max_tokens": self.chunking.max_tokens,
                "overlap_tokens": self.chunking.overlap_tokens,
            },
            "chunks": [c.to_dict() for c in self._chunks],
        }

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Index):
            return NotImplemented
        return self.signature() == other.signature() and self._postings == other._postings

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.signature(), ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Index":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read index {path}: {exc}") from exc
        if data.get("format") != INDEX_FORMAT:
            raise InputError(f"{path}: not a {INDEX_FORMAT} file (format={data.get('format')!r})")
        chunking = ChunkingConfig(**data["chunking"])
        return cls([Chunk.from_dict(c) for c in data["chunks"]], data["k1"], data["b"], chunking)


def build_index(corpus: Corpus, k1: float = DEFAULT_K1, b: float = DEFAULT_B) -> Index:
    return Index(corpus.chunks, k1=k1, b=b, chunking=corpus.chunking)


def retrieve(index: Index, query: str, k: int) -> RankedHits:
    """Top-``k`` chunks by BM25; only positive scores, ties by ascending chunk id."""
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    tokens = tokenize(query)
    if not tokens:
        raise InputError(f"query has no searchable tokens: {query!r}")
    scored = [(index.chunks[pos].id, s) for pos, s in index.scores(tokens).items() if s > 0]
    scored.sort(key=lambda e: (-e[1], e[0]))
    return RankedHits(query=query, k=k, entries=tuple(scored[:k]))


def retrieval_overlap(a: RankedHits, b: RankedHits) -> float:
    """Jaccard similarity of the two hit lists' chunk-id sets (0 when both empty)."""
    sa, sb = set(a.ids), set(b.ids)
    union = sa | sb
    if not union:
        return 0.0
    return len(sa & sb) / len(union)
