"""Split-phase reader: independent question/paragraph encoding, joint tail, span decoding.

Paragraph positions always start at the fixed offset q_max, whatever the
actual question length, so a paragraph's states after the first k blocks
are a function of (paragraph, weights, config) alone and can be cached.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import (
    EncoderWeights,
    ModelConfig,
    embed,
    full_mask,
    qa_head,
    run_blocks,
)
from .tensor import ContractError, MacCounter, Matrix
from .text import CLS_ID, SEP_ID, TokenizedText, Vocab, tokenize

MAX_ANSWER_TOKENS = 30


@dataclass(frozen=True)
class SegmentedInput:
    """Question ids ([CLS] q... [SEP]) and paragraph ids (p... [SEP]) plus decode metadata.

    p_offsets holds character offsets into paragraph_text for each paragraph
    token (None for the final [SEP]); both are optional for synthetic inputs.
    """

    q_ids: np.ndarray
    p_ids: np.ndarray
    q_max: int
    p_offsets: tuple | None = None
    paragraph_text: str | None = None

    def __post_init__(self):
        if len(self.q_ids) < 2:
            raise ContractError("question segment needs at least [CLS] and [SEP]")
        if len(self.p_ids) < 1:
            raise ContractError("paragraph segment must not be empty")

    @property
    def n_q(self) -> int:
        return len(self.q_ids)

    @property
    def n_p(self) -> int:
        return len(self.p_ids)

    @property
    def q_positions(self) -> np.ndarray:
        return np.arange(self.n_q)

    @property
    def p_positions(self) -> np.ndarray:
        return self.q_max + np.arange(self.n_p)

    def concat_ids(self) -> np.ndarray:
        return np.concatenate([self.q_ids, self.p_ids])

    def concat_positions(self) -> np.ndarray:
        return np.concatenate([self.q_positions, self.p_positions])

    def concat_segments(self) -> np.ndarray:
        return np.concatenate([np.zeros(self.n_q, dtype=int), np.ones(self.n_p, dtype=int)])


@dataclass(frozen=True)
class SpanPrediction:
    """A candidate answer span in paragraph-token coordinates."""

    start: int
    end: int
    s_s: float
    s_e: float
    s_r: float
    answer_text: str = ""
    paragraph_id: int = -1

    def __post_init__(self):
        if self.start > self.end:
            raise ContractError("span start must not exceed end")


def question_ids(question: str, vocab: Vocab, config: ModelConfig) -> np.ndarray:
    """[CLS] + question tokens + [SEP], truncated to q_max total."""
    ids = vocab.encode(tokenize(question).tokens)[: config.q_max - 2]
    return np.array([CLS_ID] + ids + [SEP_ID], dtype=int)


def paragraph_part(tok: TokenizedText, lo: int, hi: int, vocab: Vocab,
                   config: ModelConfig) -> tuple[np.ndarray, tuple]:
    """Token window [lo, hi) + [SEP], truncated to p_max total; returns (ids, offsets)."""
    hi = min(hi, lo + config.p_max - 1)
    tokens = tok.tokens[lo:hi]
    offsets = tok.offsets[lo:hi]
    ids = np.array(vocab.encode(tokens) + [SEP_ID], dtype=int)
    return ids, offsets + (None,)


def segment_input(question: str, paragraph: str, vocab: Vocab,
                  config: ModelConfig) -> SegmentedInput:
    """Single-window segmentation; the paragraph is truncated to p_max - 1 tokens."""
    tok = tokenize(paragraph)
    if len(tok) == 0:
        raise ContractError("paragraph has no tokens")
    p_ids, p_offsets = paragraph_part(tok, 0, len(tok), vocab, config)
    return SegmentedInput(
        q_ids=question_ids(question, vocab, config),
        p_ids=p_ids,
        q_max=config.q_max,
        p_offsets=p_offsets,
        paragraph_text=paragraph,
    )


def encode_question(q_ids: np.ndarray, weights: EncoderWeights, config: ModelConfig,
                    counter: MacCounter | None = None) -> Matrix:
    """Embedding plus the first k blocks over the question alone."""
    if len(q_ids) > config.q_max:
        raise ContractError(f"question segment length {len(q_ids)} exceeds q_max={config.q_max}")
    n_q = len(q_ids)
    h = embed(q_ids, np.arange(n_q), np.zeros(n_q, dtype=int), weights)
    return run_blocks(h, full_mask(n_q), weights, config, 0, config.k, counter)


def encode_paragraph(p_ids: np.ndarray, weights: EncoderWeights, config: ModelConfig,
                     counter: MacCounter | None = None) -> Matrix:
    """Embedding plus the first k blocks over the paragraph alone.

    Positions start at q_max, segment id is 1; no question enters here.
    """
    if len(p_ids) > config.p_max:
        raise ContractError(f"paragraph segment length {len(p_ids)} exceeds p_max={config.p_max}")
    n_p = len(p_ids)
    h = embed(p_ids, config.q_max + np.arange(n_p), np.ones(n_p, dtype=int), weights)
    return run_blocks(h, full_mask(n_p), weights, config, 0, config.k, counter)


def dil_forward(q_states: Matrix, p_states: Matrix, weights: EncoderWeights,
                config: ModelConfig,
                counter: MacCounter | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate the split-phase outputs, run blocks [k, l) jointly, project logits."""
    if q_states.shape[1] != config.d_model or p_states.shape[1] != config.d_model:
        raise ContractError("state width does not match d_model")
    h = np.concatenate([q_states, p_states], axis=0)
    h = run_blocks(h, full_mask(h.shape[0]), weights, config, config.k, config.l, counter)
    return qa_head(h, weights, counter)


def baseline_forward(seg: SegmentedInput, weights: EncoderWeights, config: ModelConfig,
                     counter: MacCounter | None = None) -> tuple[np.ndarray, np.ndarray]:
    """The unsplit original model: one embedding pass, all l blocks with full attention."""
    h = embed(seg.concat_ids(), seg.concat_positions(), seg.concat_segments(), weights)
    h = run_blocks(h, full_mask(h.shape[0]), weights, config, 0, config.l, counter)
    return qa_head(h, weights)


def forward(seg: SegmentedInput, weights: EncoderWeights, config: ModelConfig,
            counter: MacCounter | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Full split-phase pass on one segmented input."""
    q_states = encode_question(seg.q_ids, weights, config, counter)
    p_states = encode_paragraph(seg.p_ids, weights, config, counter)
    return dil_forward(q_states, p_states, weights, config, counter)


def valid_span_positions(seg: SegmentedInput) -> np.ndarray:
    """Paragraph token indices eligible as span endpoints ([SEP]/[CLS]/PAD excluded)."""
    special = {0, CLS_ID, SEP_ID}
    return np.array([t for t in range(seg.n_p) if int(seg.p_ids[t]) not in special], dtype=int)


def decode_span(start_logits: np.ndarray, end_logits: np.ndarray, seg: SegmentedInput,
                max_answer_tokens: int = MAX_ANSWER_TOKENS) -> SpanPrediction:
    """Best (start, end) pair with start <= end < start + max_answer_tokens.

    Both endpoints must be paragraph tokens. Ties go to the smaller start,
    then the smaller end, so decoding is deterministic.
    """
    if len(start_logits) != seg.n_q + seg.n_p:
        raise ContractError("logits must cover the full sequence")
    candidates = valid_span_positions(seg)
    if len(candidates) == 0:
        raise ContractError("paragraph has no valid span positions")
    cand = set(candidates.tolist())
    best = None
    for i in candidates:
        s_s = start_logits[seg.n_q + i]
        for j in range(i, min(i + max_answer_tokens, seg.n_p)):
            if j not in cand:
                continue
            score = s_s + end_logits[seg.n_q + j]
            if best is None or score > best[0]:
                best = (score, int(i), int(j))
    _, i, j = best
    s_s = float(start_logits[seg.n_q + i])
    s_e = float(end_logits[seg.n_q + j])
    answer = ""
    if seg.p_offsets is not None and seg.paragraph_text is not None:
        answer = seg.paragraph_text[seg.p_offsets[i][0] : seg.p_offsets[j][1]]
    return SpanPrediction(start=i, end=j, s_s=s_s, s_e=s_e, s_r=(s_s + s_e) / 2.0,
                          answer_text=answer)


def read(question: str, paragraph: str, weights: EncoderWeights, config: ModelConfig,
         vocab: Vocab, max_answer_tokens: int = MAX_ANSWER_TOKENS,
         counter: MacCounter | None = None) -> SpanPrediction:
    """End-to-end single-pair reading.

    Paragraphs longer than p_max - 1 tokens are windowed with the same
    fixed-width / half-stride scheme the retriever uses for documents, and
    the window with the highest reader score wins.
    """
    from .retriever import window_spans

    if not question.strip() or not paragraph.strip():
        raise ContractError("question and paragraph must be non-empty")
    tok = tokenize(paragraph)
    width = config.p_max - 1
    q_ids = question_ids(question, vocab, config)
    q_states = encode_question(q_ids, weights, config, counter)
    best = None
    for lo, hi in window_spans(len(tok), width, max(1, width // 2)):
        p_ids, p_offsets = paragraph_part(tok, lo, hi, vocab, config)
        seg = SegmentedInput(q_ids=q_ids, p_ids=p_ids, q_max=config.q_max,
                             p_offsets=p_offsets, paragraph_text=paragraph)
        p_states = encode_paragraph(p_ids, weights, config, counter)
        logits = dil_forward(q_states, p_states, weights, config, counter)
        span = decode_span(logits[0], logits[1], seg, max_answer_tokens)
        if best is None or span.s_r > best.s_r:
            best = span
    return best
