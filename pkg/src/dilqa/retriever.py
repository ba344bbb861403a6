"""Paragraph splitting and Okapi BM25 ranked retrieval over a paragraph store."""

from __future__ import annotations

import math
import re
import struct
from collections import Counter
from dataclasses import dataclass, field

from .text import tokenize

INDEX_MAGIC = b"DILI"
STORE_MAGIC = b"DILS"
FORMAT_VERSION = 1

# Anserini-style defaults.
BM25_K1 = 0.9
BM25_B = 0.4

WINDOW_WORDS = 100
WINDOW_STRIDE = 50
MIN_PARAGRAPH_CHARS = 30

_BLANK_LINE_RE = re.compile(r"\n\s*\n")
_WORD_RE = re.compile(r"\S+")


def window_spans(n_items: int, width: int, stride: int) -> list[tuple[int, int]]:
    """Half-open [start, end) windows at each stride multiple below n_items.

    A window whose end equals the previous window's end adds nothing and is
    dropped, so short tails are not emitted twice.
    """
    spans: list[tuple[int, int]] = []
    s = 0
    while s < n_items:
        end = min(s + width, n_items)
        if not spans or end != spans[-1][1]:
            spans.append((s, end))
        s += stride
    return spans


def split_paragraphs(doc: str, strategy: str = "window") -> list[str]:
    """Split a document into paragraphs.

    "newline": blank-line delimited, items under 30 characters discarded.
    "window": 100-word chunks with a 50-word sliding stride; chunk text is
    the original substring covering those words.
    """
    if strategy == "newline":
        parts = [p.strip() for p in _BLANK_LINE_RE.split(doc)]
        return [p for p in parts if len(p) >= MIN_PARAGRAPH_CHARS]
    if strategy == "window":
        words = list(_WORD_RE.finditer(doc))
        if not words:
            return []
        out = []
        for lo, hi in window_spans(len(words), WINDOW_WORDS, WINDOW_STRIDE):
            out.append(doc[words[lo].start() : words[hi - 1].end()])
        return out
    raise ValueError(f"unknown split strategy: {strategy!r}")


@dataclass(frozen=True)
class Paragraph:
    pid: int
    doc_id: str
    text: str
    word_lo: int = 0
    word_hi: int = 0


@dataclass
class ParagraphStore:
    """Dense, stable paragraph ids over split documents."""

    paragraphs: list[Paragraph] = field(default_factory=list)
    strategy: str = "window"

    def __len__(self):
        return len(self.paragraphs)

    def __getitem__(self, pid: int) -> Paragraph:
        return self.paragraphs[pid]

    def add_document(self, doc_id: str, text: str) -> None:
        if self.strategy == "window":
            words = list(_WORD_RE.finditer(text))
            for lo, hi in window_spans(len(words), WINDOW_WORDS, WINDOW_STRIDE) if words else []:
                self.paragraphs.append(Paragraph(
                    pid=len(self.paragraphs), doc_id=doc_id,
                    text=text[words[lo].start():words[hi - 1].end()],
                    word_lo=lo, word_hi=hi,
                ))
        else:
            for chunk in split_paragraphs(text, self.strategy):
                self.paragraphs.append(Paragraph(
                    pid=len(self.paragraphs), doc_id=doc_id, text=chunk))

    @classmethod
    def from_documents(cls, docs, strategy: str = "window") -> "ParagraphStore":
        store = cls(strategy=strategy)
        for doc_id, text in docs:
            store.add_document(doc_id, text)
        return store


@dataclass
class InvertedIndex:
    """term -> [(paragraph id, term frequency)], postings sorted by id."""

    postings: dict[str, list[tuple[int, int]]]
    lengths: list[int]
    n_paragraphs: int
    avg_length: float
    k1: float = BM25_K1
    b: float = BM25_B

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def idf(self, term: str) -> float:
        # Lucene variant: never negative.
        n, df = self.n_paragraphs, self.df(term)
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))


def build_index(store: ParagraphStore, k1: float = BM25_K1, b: float = BM25_B) -> InvertedIndex:
    if len(store) == 0:
        raise ValueError("cannot index an empty paragraph store")
    postings: dict[str, list[tuple[int, int]]] = {}
    lengths = []
    for para in store.paragraphs:
        tokens = tokenize(para.text).tokens
        lengths.append(len(tokens))
        for term, tf in sorted(Counter(tokens).items()):
            postings.setdefault(term, []).append((para.pid, tf))
    total = sum(lengths)
    return InvertedIndex(
        postings=postings,
        lengths=lengths,
        n_paragraphs=len(store),
        avg_length=total / len(store),
        k1=k1,
        b=b,
    )


def bm25_score(query_terms, pid: int, index: InvertedIndex) -> float:
    """Okapi BM25 with the ln(1 + .) idf; duplicate query terms count once."""
    if not (0 <= pid < index.n_paragraphs):
        raise ValueError(f"paragraph id {pid} not in index")
    norm = index.k1 * (1.0 - index.b + index.b * index.lengths[pid] / index.avg_length)
    score = 0.0
    for term in sorted(set(query_terms)):
        tf = 0
        for doc, f in index.postings.get(term, ()):
            if doc == pid:
                tf = f
                break
        if tf == 0:
            continue
        score += index.idf(term) * tf * (index.k1 + 1.0) / (tf + norm)
    return score


@dataclass(frozen=True)
class RetrievalResult:
    pid: int
    s_bm25: float


def search(question: str, index: InvertedIndex, p: int) -> list[RetrievalResult]:
    """Top-p paragraphs by BM25, score descending, ties by smaller paragraph id."""
    if p < 1:
        raise ValueError("p must be >= 1")
    terms = sorted(set(tokenize(question).tokens))
    if not terms:
        return []
    scores: dict[int, float] = {}
    for term in terms:
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = index.idf(term)
        for pid, tf in plist:
            norm = index.k1 * (1.0 - index.b + index.b * index.lengths[pid] / index.avg_length)
            scores[pid] = scores.get(pid, 0.0) + idf * tf * (index.k1 + 1.0) / (tf + norm)
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:p]
    return [RetrievalResult(pid=pid, s_bm25=s) for pid, s in ranked]


# ---------------------------------------------------------------------------
# Persistence: varint-packed postings ("DILI") and length-prefixed store ("DILS")
# ---------------------------------------------------------------------------

def _write_varint(out: bytearray, value: int) -> None:
    if value < 0:
        raise ValueError("varints are unsigned")
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return


def _read_varint(buf: bytes, pos: int) -> tuple[int, int]:
    result = shift = 0
    while True:
        byte = buf[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7


def _write_str(f, s: str) -> None:
    data = s.encode("utf-8")
    f.write(struct.pack("<I", len(data)))
    f.write(data)


def _read_str(f) -> str:
    (n,) = struct.unpack("<I", f.read(4))
    return f.read(n).decode("utf-8")


def save_index(index: InvertedIndex, path) -> None:
    with open(path, "wb") as f:
        f.write(INDEX_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Id", index.n_paragraphs, index.avg_length))
        f.write(struct.pack("<dd", index.k1, index.b))
        f.write(struct.pack("<I", len(index.lengths)))
        for n in index.lengths:
            f.write(struct.pack("<I", n))
        f.write(struct.pack("<I", len(index.postings)))
        for term in sorted(index.postings):
            _write_str(f, term)
            plist = index.postings[term]
            packed = bytearray()
            _write_varint(packed, len(plist))
            prev = 0
            for pid, tf in plist:
                _write_varint(packed, pid - prev)  # delta-coded ids
                _write_varint(packed, tf)
                prev = pid
            f.write(struct.pack("<I", len(packed)))
            f.write(packed)


def load_index(path) -> InvertedIndex:
    with open(path, "rb") as f:
        if f.read(4) != INDEX_MAGIC:
            raise ValueError(f"{path}: not an index file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported index version {version}")
        n_paragraphs, avg_length = struct.unpack("<Id", f.read(12))
        k1, b = struct.unpack("<dd", f.read(16))
        (n_lengths,) = struct.unpack("<I", f.read(4))
        lengths = [struct.unpack("<I", f.read(4))[0] for _ in range(n_lengths)]
        (n_terms,) = struct.unpack("<I", f.read(4))
        postings: dict[str, list[tuple[int, int]]] = {}
        for _ in range(n_terms):
            term = _read_str(f)
            (blob_len,) = struct.unpack("<I", f.read(4))
            blob = f.read(blob_len)
            count, pos = _read_varint(blob, 0)
            plist = []
            prev = 0
            for _ in range(count):
                delta, pos = _read_varint(blob, pos)
                tf, pos = _read_varint(blob, pos)
                prev += delta
                plist.append((prev, tf))
            postings[term] = plist
    return InvertedIndex(postings=postings, lengths=lengths, n_paragraphs=n_paragraphs,
                         avg_length=avg_length, k1=k1, b=b)


def save_store(store: ParagraphStore, path) -> None:
    with open(path, "wb") as f:
        f.write(STORE_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        _write_str(f, store.strategy)
        f.write(struct.pack("<I", len(store)))
        for para in store.paragraphs:
            f.write(struct.pack("<III", para.pid, para.word_lo, para.word_hi))
            _write_str(f, para.doc_id)
            _write_str(f, para.text)


def load_store(path) -> ParagraphStore:
    with open(path, "rb") as f:
        if f.read(4) != STORE_MAGIC:
            raise ValueError(f"{path}: not a paragraph store file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported store version {version}")
        strategy = _read_str(f)
        (count,) = struct.unpack("<I", f.read(4))
        store = ParagraphStore(strategy=strategy)
        for _ in range(count):
            pid, lo, hi = struct.unpack("<III", f.read(12))
            doc_id = _read_str(f)
            text = _read_str(f)
            store.paragraphs.append(Paragraph(pid=pid, doc_id=doc_id, text=text,
                                              word_lo=lo, word_hi=hi))
    return store
