import numpy as np
import pytest

from dilqa.encoder import (
    ModelConfig,
    block_diagonal_mask,
    embed,
    full_mask,
    init_weights,
    qa_head,
    run_blocks,
)
from dilqa.reader import SegmentedInput


def random_segmented(rng, config, n_q=None, n_p=None):
    """Random well-formed input: [CLS] q.. [SEP] | p.. [SEP]."""
    n_q = n_q if n_q is not None else int(rng.integers(3, config.q_max + 1))
    n_p = n_p if n_p is not None else int(rng.integers(2, config.p_max + 1))
    q_ids = np.concatenate([[2], rng.integers(4, config.vocab_size, n_q - 2), [3]])
    p_ids = np.concatenate([rng.integers(4, config.vocab_size, n_p - 1), [3]])
    return SegmentedInput(q_ids=q_ids.astype(int), p_ids=p_ids.astype(int),
                          q_max=config.q_max)


def masked_oracle_forward(seg, weights, config):
    """Independent reference: one joint pass, block-diagonal mask in the first
    k blocks, full attention afterwards."""
    h = embed(seg.concat_ids(), seg.concat_positions(), seg.concat_segments(), weights)
    h = run_blocks(h, block_diagonal_mask(seg.n_q, seg.n_p), weights, config, 0, config.k)
    h = run_blocks(h, full_mask(seg.n_q + seg.n_p), weights, config, config.k, config.l)
    return qa_head(h, weights)


@pytest.fixture
def small_config():
    return ModelConfig(l=3, k=1, d_model=32, n_heads=4, d_ff=48,
                       vocab_size=64, q_max=8, p_max=16, seed=11)


@pytest.fixture
def small_model(small_config):
    return small_config, init_weights(small_config)
