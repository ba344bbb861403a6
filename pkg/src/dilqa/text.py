"""Word-level tokenization, vocabulary, answer normalization, QA dataset loading."""

from __future__ import annotations

import json
import re
import string
from collections import Counter
from dataclasses import dataclass, field

PAD_ID = 0
UNK_ID = 1
CLS_ID = 2
SEP_ID = 3
RESERVED = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"]

_PUNCT = set(string.punctuation)


class SchemaError(ValueError):
    """Input file does not follow the expected schema."""


@dataclass(frozen=True)
class TokenizedText:
    """Lowercased tokens plus (start, end) character offsets into the original string."""

    tokens: tuple[str, ...]
    offsets: tuple[tuple[int, int], ...]

    def __len__(self):
        return len(self.tokens)


def tokenize(text: str) -> TokenizedText:
    """Split on whitespace, peeling punctuation characters into their own tokens.

    Offsets always index the original (un-lowercased) string, so predicted
    spans can be mapped back to exact source text.
    """
    tokens: list[str] = []
    offsets: list[tuple[int, int]] = []
    start = None
    for i, ch in enumerate(text):
        if ch.isspace():
            if start is not None:
                tokens.append(text[start:i].lower())
                offsets.append((start, i))
                start = None
        elif ch in _PUNCT:
            if start is not None:
                tokens.append(text[start:i].lower())
                offsets.append((start, i))
                start = None
            tokens.append(ch.lower())
            offsets.append((i, i + 1))
        else:
            if start is None:
                start = i
    if start is not None:
        tokens.append(text[start:].lower())
        offsets.append((start, len(text)))
    return TokenizedText(tuple(tokens), tuple(offsets))


@dataclass
class Vocab:
    """Dense token -> id map with reserved PAD/UNK/CLS/SEP ids 0..3."""

    stoi: dict[str, int] = field(default_factory=dict)
    itos: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.itos:
            self.itos = list(RESERVED)
            self.stoi = {t: i for i, t in enumerate(self.itos)}

    @property
    def size(self) -> int:
        return len(self.itos)

    def id_of(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def encode(self, tokens) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def save(self, path) -> None:
        # One non-reserved token per line; line number = id - 4.
        with open(path, "w", encoding="utf-8") as f:
            for token in self.itos[len(RESERVED):]:
                f.write(token + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        vocab = cls()
        with open(path, encoding="utf-8") as f:
            for line in f:
                token = line.rstrip("\n")
                if token:
                    vocab.stoi[token] = len(vocab.itos)
                    vocab.itos.append(token)
        return vocab


def build_vocab(corpus, max_size: int) -> Vocab:
    """Keep the max_size - 4 most frequent tokens; ties broken lexicographically."""
    if max_size < len(RESERVED):
        raise ValueError(f"max_size must be >= {len(RESERVED)}")
    counts: Counter[str] = Counter()
    for doc in corpus:
        counts.update(tokenize(doc).tokens)
    kept = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[: max_size - len(RESERVED)]
    vocab = Vocab()
    for token, _ in kept:
        vocab.stoi[token] = len(vocab.itos)
        vocab.itos.append(token)
    return vocab


_ARTICLES_RE = re.compile(r"\b(a|an|the)\b")


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation, drop articles, collapse whitespace."""
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLES_RE.sub(" ", text)
    return " ".join(text.split())


@dataclass(frozen=True)
class QaExample:
    qid: str
    question: str
    context: str
    answers: tuple[str, ...]
    answer_starts: tuple[int, ...]


@dataclass(frozen=True)
class QaDataset:
    examples: tuple[QaExample, ...]

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)


def load_squad_json(path) -> QaDataset:
    """Flatten a SQuAD v1.1-layout JSON file into a QaDataset.

    Raises SchemaError when a required field is missing or a gold answer
    does not occur verbatim at its recorded offset.
    """
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: malformed JSON: {e}") from e

    examples: list[QaExample] = []

    def need(obj, key, where):
        if not isinstance(obj, dict) or key not in obj:
            raise SchemaError(f"{path}: missing field '{key}' at {where}")
        return obj[key]

    for ai, article in enumerate(need(raw, "data", "$")):
        for pi, para in enumerate(need(article, "paragraphs", f"data[{ai}]")):
            where = f"data[{ai}].paragraphs[{pi}]"
            context = need(para, "context", where)
            for qi, qa in enumerate(need(para, "qas", where)):
                qwhere = f"{where}.qas[{qi}]"
                qid = str(need(qa, "id", qwhere))
                question = need(qa, "question", qwhere)
                answers, starts = [], []
                for aj, ans in enumerate(need(qa, "answers", qwhere)):
                    awhere = f"{qwhere}.answers[{aj}]"
                    atext = need(ans, "text", awhere)
                    astart = need(ans, "answer_start", awhere)
                    if context[astart : astart + len(atext)] != atext:
                        raise SchemaError(
                            f"{path}: answer at {awhere} does not occur at offset {astart}"
                        )
                    answers.append(atext)
                    starts.append(astart)
                examples.append(
                    QaExample(qid, question, context, tuple(answers), tuple(starts))
                )
    return QaDataset(tuple(examples))
