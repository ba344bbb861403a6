import numpy as np
import pytest

from dilqa.encoder import ModelConfig, init_weights
from dilqa.reader import (
    SegmentedInput,
    SpanPrediction,
    baseline_forward,
    decode_span,
    dil_forward,
    encode_paragraph,
    encode_question,
    forward,
    question_ids,
    read,
    segment_input,
)
from dilqa.tensor import ContractError
from dilqa.text import CLS_ID, SEP_ID, Vocab, build_vocab

from conftest import masked_oracle_forward, random_segmented


class TestSegmentedInput:
    def test_positions_and_segments(self, small_config):
        rng = np.random.default_rng(0)
        seg = random_segmented(rng, small_config, n_q=4, n_p=6)
        assert list(seg.q_positions) == [0, 1, 2, 3]
        assert list(seg.p_positions) == [small_config.q_max + i for i in range(6)]
        assert seg.concat_segments().tolist() == [0] * 4 + [1] * 6

    def test_paragraph_positions_independent_of_question_length(self, small_config):
        rng = np.random.default_rng(1)
        short = random_segmented(rng, small_config, n_q=3, n_p=5)
        long = random_segmented(rng, small_config, n_q=7, n_p=5)
        assert np.array_equal(short.p_positions, long.p_positions)

    def test_minimum_lengths(self, small_config):
        with pytest.raises(ContractError):
            SegmentedInput(q_ids=np.array([CLS_ID]), p_ids=np.array([SEP_ID]),
                           q_max=small_config.q_max)

    def test_question_truncation(self, small_config):
        vocab = build_vocab(["w" + " w".join(str(i) for i in range(40))], max_size=60)
        ids = question_ids("w0 " * 40, vocab, small_config)
        assert len(ids) == small_config.q_max
        assert ids[0] == CLS_ID and ids[-1] == SEP_ID


class TestEncodeSides:
    def test_k0_returns_embedding(self, small_config):
        cfg = ModelConfig(**{**small_config.__dict__, "k": 0})
        w = init_weights(cfg)
        rng = np.random.default_rng(2)
        seg = random_segmented(rng, cfg)
        from dilqa.encoder import embed
        q = encode_question(seg.q_ids, w, cfg)
        expected = embed(seg.q_ids, seg.q_positions, np.zeros(seg.n_q, dtype=int), w)
        assert np.array_equal(q, expected)

    def test_paragraph_encoding_deterministic(self, small_model):
        cfg, w = small_model
        rng = np.random.default_rng(3)
        seg = random_segmented(rng, cfg)
        a = encode_paragraph(seg.p_ids, w, cfg)
        b = encode_paragraph(seg.p_ids, w, cfg)
        assert np.array_equal(a, b)

    def test_question_independence_of_paragraph_states(self, small_model):
        """The cacheability property: paragraph states never see the question."""
        cfg, w = small_model
        rng = np.random.default_rng(4)
        p_ids = np.concatenate([rng.integers(4, cfg.vocab_size, 7), [SEP_ID]])
        states = encode_paragraph(p_ids, w, cfg)
        hashes = set()
        for _ in range(3):
            _ = random_segmented(rng, cfg)  # unrelated question context
            hashes.add(encode_paragraph(p_ids, w, cfg).tobytes())
        assert hashes == {states.tobytes()}

    def test_sides_match_block_diagonal_joint_pass(self, small_model):
        cfg, w = small_model
        rng = np.random.default_rng(5)
        seg = random_segmented(rng, cfg)
        from dilqa.encoder import block_diagonal_mask, embed, run_blocks
        joint = embed(seg.concat_ids(), seg.concat_positions(), seg.concat_segments(), w)
        joint = run_blocks(joint, block_diagonal_mask(seg.n_q, seg.n_p), w, cfg, 0, cfg.k)
        assert np.abs(encode_question(seg.q_ids, w, cfg) - joint[: seg.n_q]).max() <= 1e-10
        assert np.abs(encode_paragraph(seg.p_ids, w, cfg) - joint[seg.n_q :]).max() <= 1e-10

    def test_overlong_segments_rejected(self, small_model):
        cfg, w = small_model
        with pytest.raises(ContractError):
            encode_question(np.zeros(cfg.q_max + 1, dtype=int), w, cfg)


class TestDilForward:
    def test_k0_bitwise_equals_baseline(self, small_config):
        cfg = ModelConfig(**{**small_config.__dict__, "k": 0})
        w = init_weights(cfg)
        rng = np.random.default_rng(6)
        for _ in range(5):
            seg = random_segmented(rng, cfg)
            s1, e1 = forward(seg, w, cfg)
            s2, e2 = baseline_forward(seg, w, cfg)
            assert np.array_equal(s1, s2) and np.array_equal(e1, e2)

    @pytest.mark.parametrize("k", [0, 1, 2, 3])
    def test_masked_oracle_equivalence(self, k):
        cfg = ModelConfig(l=3, k=k, d_model=32, n_heads=4, d_ff=48,
                          vocab_size=64, q_max=16, p_max=16, seed=21)
        w = init_weights(cfg)
        rng = np.random.default_rng(100 + k)
        for _ in range(5):
            seg = random_segmented(rng, cfg)
            s1, e1 = forward(seg, w, cfg)
            s2, e2 = masked_oracle_forward(seg, w, cfg)
            assert max(np.abs(s1 - s2).max(), np.abs(e1 - e2).max()) <= 1e-9

    def test_k_equals_l_paragraph_logits_question_invariant(self, small_config):
        cfg = ModelConfig(**{**small_config.__dict__, "k": small_config.l})
        w = init_weights(cfg)
        rng = np.random.default_rng(7)
        seg_a = random_segmented(rng, cfg, n_q=4, n_p=6)
        seg_b = SegmentedInput(
            q_ids=random_segmented(rng, cfg, n_q=6).q_ids,
            p_ids=seg_a.p_ids, q_max=cfg.q_max)
        sa, ea = forward(seg_a, w, cfg)
        sb, eb = forward(seg_b, w, cfg)
        # identical up to BLAS blocking noise in the final projection, whose
        # input row count differs with the question length
        assert np.abs(sa[seg_a.n_q :] - sb[seg_b.n_q :]).max() <= 1e-12
        assert np.abs(ea[seg_a.n_q :] - eb[seg_b.n_q :]).max() <= 1e-12
        # the cached states themselves are bitwise question-independent
        from dilqa.reader import encode_paragraph
        assert np.array_equal(encode_paragraph(seg_a.p_ids, w, cfg),
                              encode_paragraph(seg_b.p_ids, w, cfg))

    def test_dimension_mismatch(self, small_model):
        cfg, w = small_model
        with pytest.raises(ContractError):
            dil_forward(np.zeros((3, cfg.d_model + 1)), np.zeros((4, cfg.d_model)), w, cfg)


def exhaustive_decode(start_logits, end_logits, seg, max_answer_tokens):
    """Oracle: scan all O(n^2) pairs with the same constraints and tie rule."""
    from dilqa.reader import valid_span_positions

    valid = set(valid_span_positions(seg).tolist())
    best = None
    for i in sorted(valid):
        for j in sorted(valid):
            if i <= j < i + max_answer_tokens:
                score = start_logits[seg.n_q + i] + end_logits[seg.n_q + j]
                if best is None or score > best[0]:
                    best = (score, i, j)
    return best[1], best[2]


class TestDecodeSpan:
    def make_seg(self, small_config, n_p=8):
        rng = np.random.default_rng(8)
        return random_segmented(rng, small_config, n_q=4, n_p=n_p)

    def test_peaked_unigram(self, small_config):
        seg = self.make_seg(small_config)
        n = seg.n_q + seg.n_p
        start = np.full(n, -5.0)
        end = np.full(n, -5.0)
        start[seg.n_q + 2] = 10.0
        end[seg.n_q + 2] = 10.0
        span = decode_span(start, end, seg)
        assert (span.start, span.end) == (2, 2)
        assert span.s_r == (span.s_s + span.s_e) / 2

    def test_crossed_best_pair_still_valid(self, small_config):
        seg = self.make_seg(small_config)
        n = seg.n_q + seg.n_p
        start = np.zeros(n)
        end = np.zeros(n)
        start[seg.n_q + 5] = 8.0   # unconstrained argmax start after argmax end
        end[seg.n_q + 1] = 8.0
        span = decode_span(start, end, seg)
        assert span.start <= span.end
        oracle = exhaustive_decode(start, end, seg, 30)
        assert (span.start, span.end) == oracle

    def test_matches_exhaustive_oracle_random(self, small_config):
        rng = np.random.default_rng(9)
        for trial in range(25):
            seg = self.make_seg(small_config)
            n = seg.n_q + seg.n_p
            start, end = rng.normal(size=n), rng.normal(size=n)
            cap = int(rng.integers(1, 6))
            span = decode_span(start, end, seg, max_answer_tokens=cap)
            assert (span.start, span.end) == exhaustive_decode(start, end, seg, cap)
            assert span.end - span.start < cap

    def test_shift_invariance(self, small_config):
        seg = self.make_seg(small_config)
        rng = np.random.default_rng(10)
        n = seg.n_q + seg.n_p
        start, end = rng.normal(size=n), rng.normal(size=n)
        a = decode_span(start, end, seg)
        b = decode_span(start + 3.5, end, seg)
        assert (a.start, a.end) == (b.start, b.end)

    def test_tie_break_smaller_indices(self, small_config):
        seg = self.make_seg(small_config)
        n = seg.n_q + seg.n_p
        span = decode_span(np.zeros(n), np.zeros(n), seg, max_answer_tokens=1)
        valid = sorted(set(range(seg.n_p)) - {seg.n_p - 1})
        assert (span.start, span.end) == (valid[0], valid[0])

    def test_empty_paragraph_rejected(self, small_config):
        seg = SegmentedInput(q_ids=np.array([CLS_ID, 5, SEP_ID]),
                             p_ids=np.array([SEP_ID]), q_max=small_config.q_max)
        with pytest.raises(ContractError):
            decode_span(np.zeros(4), np.zeros(4), seg)


class TestSpanPrediction:
    def test_invalid_span_rejected(self):
        with pytest.raises(ContractError):
            SpanPrediction(start=3, end=1, s_s=0, s_e=0, s_r=0)


class TestRead:
    @pytest.fixture
    def setup(self, small_config):
        corpus = ["the red fox jumped over the lazy dog near the old mill",
                  "what did the fox jump over"]
        vocab = build_vocab(corpus, max_size=40)
        w = init_weights(small_config)
        return small_config, w, vocab

    def test_answer_is_substring(self, setup):
        cfg, w, vocab = setup
        span = read("what did the fox jump over", corpus_paragraph(), w, cfg, vocab)
        assert span.answer_text in corpus_paragraph()

    def test_k0_equals_baseline_pipeline(self, setup):
        cfg0 = ModelConfig(**{**setup[0].__dict__, "k": 0})
        w = init_weights(cfg0)
        vocab = setup[2]
        question, paragraph = "where is the fox", "the red fox sat here"
        span = read(question, paragraph, w, cfg0, vocab)
        seg = segment_input(question, paragraph, vocab, cfg0)
        s, e = baseline_forward(seg, w, cfg0)
        expected = decode_span(s, e, seg)
        assert (span.start, span.end) == (expected.start, expected.end)

    def test_long_paragraph_windowed(self, setup):
        cfg, w, vocab = setup
        words = " ".join(f"tok{i % 7}" for i in range(cfg.p_max * 3))
        span = read("tok1 tok2", words, w, cfg, vocab)
        assert span.answer_text in words

    def test_empty_inputs_rejected(self, setup):
        cfg, w, vocab = setup
        with pytest.raises(ContractError):
            read("", "some paragraph", w, cfg, vocab)


def corpus_paragraph():
    return "the red fox jumped over the lazy dog near the old mill"
