import json

import pytest
from hypothesis import given, strategies as st

from dilqa.text import (
    CLS_ID,
    PAD_ID,
    RESERVED,
    SEP_ID,
    SchemaError,
    UNK_ID,
    Vocab,
    build_vocab,
    load_squad_json,
    normalize_answer,
    tokenize,
)


def charclass_scan(text):
    """Oracle tokenizer: classify each char, break runs at class changes."""
    import string
    tokens, cur = [], ""
    for ch in text:
        if ch.isspace():
            if cur:
                tokens.append(cur.lower())
                cur = ""
        elif ch in string.punctuation:
            if cur:
                tokens.append(cur.lower())
                cur = ""
            tokens.append(ch)
        else:
            cur += ch
    if cur:
        tokens.append(cur.lower())
    return tokens


class TestTokenize:
    def test_simple_sentence(self):
        assert list(tokenize("The cat.").tokens) == ["the", "cat", "."]

    def test_empty(self):
        assert len(tokenize("")) == 0

    def test_hyphenated_number(self):
        assert list(tokenize("mid-1521").tokens) == charclass_scan("mid-1521") == ["mid", "-", "1521"]

    def test_offsets_reproduce_substrings(self):
        text = "Hello, world! mid-1521 x"
        tok = tokenize(text)
        for t, (lo, hi) in zip(tok.tokens, tok.offsets):
            assert text[lo:hi].lower() == t

    def test_offsets_strictly_increasing(self):
        tok = tokenize("a bb  ccc, dd")
        for (lo1, hi1), (lo2, hi2) in zip(tok.offsets, tok.offsets[1:]):
            assert lo1 < hi1 <= lo2 < hi2

    @given(st.text(max_size=80))
    def test_offset_fidelity_property(self, text):
        tok = tokenize(text)
        for t, (lo, hi) in zip(tok.tokens, tok.offsets):
            assert text[lo:hi].lower() == t


class TestVocab:
    def test_reserved_ids(self):
        v = Vocab()
        assert v.itos[:4] == RESERVED
        assert (PAD_ID, UNK_ID, CLS_ID, SEP_ID) == (0, 1, 2, 3)

    def test_build_small(self):
        v = build_vocab(["a a b"], max_size=6)
        assert v.size == 6
        assert set(v.itos[4:]) == {"a", "b"}

    def test_build_empty_corpus(self):
        v = build_vocab([], max_size=10)
        assert v.itos == RESERVED

    def test_frequency_cut(self):
        v = build_vocab(["x y", "y"], max_size=5)
        assert "y" in v.stoi and "x" not in v.stoi

    def test_tie_broken_lexicographically(self):
        v = build_vocab(["b a"], max_size=5)
        assert "a" in v.stoi and "b" not in v.stoi

    def test_unknown_lookup(self):
        v = build_vocab(["a"], max_size=5)
        assert v.id_of("zzz") == UNK_ID

    def test_roundtrip(self, tmp_path):
        v = build_vocab(["the cat sat on the mat"], max_size=10)
        path = tmp_path / "vocab.txt"
        v.save(path)
        loaded = Vocab.load(path)
        assert loaded.itos == v.itos
        # line number = id - 4 for non-reserved tokens
        lines = path.read_text().splitlines()
        for lineno, token in enumerate(lines):
            assert v.stoi[token] == lineno + 4


class TestNormalizeAnswer:
    def test_article_stripped(self):
        assert normalize_answer("The Quarterback") == "quarterback"

    def test_empty(self):
        assert normalize_answer("") == ""

    def test_punct_and_articles(self):
        assert normalize_answer("a  b.") == "b"

    @given(st.text(max_size=60))
    def test_idempotent(self, s):
        once = normalize_answer(s)
        assert normalize_answer(once) == once


def make_squad(tmp_path, data):
    path = tmp_path / "squad.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


class TestLoadSquad:
    def test_minimal_file(self, tmp_path):
        path = make_squad(tmp_path, {"data": [{"paragraphs": [{
            "context": "The sky is blue.",
            "qas": [{"id": "q1", "question": "What color is the sky?",
                     "answers": [{"text": "blue", "answer_start": 11}]}],
        }]}]})
        ds = load_squad_json(path)
        assert len(ds) == 1
        ex = ds.examples[0]
        assert ex.qid == "q1" and ex.answers == ("blue",)

    def test_empty_answers_accepted(self, tmp_path):
        path = make_squad(tmp_path, {"data": [{"paragraphs": [{
            "context": "x", "qas": [{"id": "q", "question": "?", "answers": []}]}]}]})
        assert load_squad_json(path).examples[0].answers == ()

    def test_inconsistent_offset(self, tmp_path):
        path = make_squad(tmp_path, {"data": [{"paragraphs": [{
            "context": "The sky is blue.",
            "qas": [{"id": "q", "question": "?",
                     "answers": [{"text": "blue", "answer_start": 0}]}]}]}]})
        with pytest.raises(SchemaError, match="does not occur"):
            load_squad_json(path)

    def test_missing_field(self, tmp_path):
        path = make_squad(tmp_path, {"data": [{"paragraphs": [{"qas": []}]}]})
        with pytest.raises(SchemaError, match="context"):
            load_squad_json(path)

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(SchemaError, match="malformed"):
            load_squad_json(path)
