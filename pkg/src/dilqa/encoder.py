"""Embedding layer and the stack of l transformer encoder blocks.

The same code runs as the original joint model or as the two split phases
of the delayed-interaction variant: callers choose block ranges and
attention masks, nothing here knows about questions or paragraphs.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from .tensor import ContractError, MacCounter, Matrix, gelu, layer_norm, matmul, softmax_rows

CHECKPOINT_MAGIC = b"DILW"
CHECKPOINT_VERSION = 1

# Additive pre-softmax penalty for masked attention logits. Large enough that
# exp() underflows to exactly 0.0 after max-subtraction.
MASK_PENALTY = -1e30


@dataclass(frozen=True)
class ModelConfig:
    """Architectural hyperparameters.

    q_max counts [CLS] and the first [SEP]; p_max counts the final [SEP].
    k of the l blocks run on question and paragraph separately; the rest
    run on the concatenation. share_blocks ties one weight set across all
    l block slots, so depth never changes the parameter count.
    """

    l: int = 6
    k: int = 0
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 256
    q_max: int = 16
    p_max: int = 48
    share_blocks: bool = False
    seed: int = 0
    init_std: float = 0.02  # from-scratch toy training may need a wider init

    def __post_init__(self):
        if not (0 <= self.k <= self.l):
            raise ContractError(f"k={self.k} must lie in [0, l={self.l}]")
        if self.l < 1:
            raise ContractError("l must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ContractError("d_model must be divisible by n_heads")
        if self.q_max < 2 or self.p_max < 1:
            raise ContractError("q_max >= 2 and p_max >= 1 required")

    @property
    def n_s(self) -> int:
        return self.q_max + self.p_max

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_json(self) -> str:
        return json.dumps({f.name: getattr(self, f.name) for f in fields(self)}, sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "ModelConfig":
        return cls(**json.loads(s))


@dataclass
class BlockWeights:
    wq: Matrix
    bq: np.ndarray
    wk: Matrix
    bk: np.ndarray
    wv: Matrix
    bv: np.ndarray
    wo: Matrix
    bo: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    w1: Matrix
    b1: np.ndarray
    w2: Matrix
    b2: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray


@dataclass
class EncoderWeights:
    tok: Matrix  # V x d
    pos: Matrix  # n_s x d
    seg: Matrix  # 2 x d
    ln_emb_g: np.ndarray
    ln_emb_b: np.ndarray
    blocks: list[BlockWeights] = field(default_factory=list)
    qa_w: Matrix = None  # d x 2
    qa_b: np.ndarray = None


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """N(0, std) resampled until every draw lies within +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_weights(config: ModelConfig) -> EncoderWeights:
    """Deterministic truncated-normal(0, init_std) init; biases 0, layer-norm gamma 1."""
    rng = np.random.default_rng(config.seed)
    d, dff = config.d_model, config.d_ff

    def mat(*shape):
        return _truncated_normal(rng, shape, config.init_std)

    def make_block():
        return BlockWeights(
            wq=mat(d, d), bq=np.zeros(d),
            wk=mat(d, d), bk=np.zeros(d),
            wv=mat(d, d), bv=np.zeros(d),
            wo=mat(d, d), bo=np.zeros(d),
            ln1_g=np.ones(d), ln1_b=np.zeros(d),
            w1=mat(d, dff), b1=np.zeros(dff),
            w2=mat(dff, d), b2=np.zeros(d),
            ln2_g=np.ones(d), ln2_b=np.zeros(d),
        )

    w = EncoderWeights(
        tok=mat(config.vocab_size, d),
        pos=mat(config.n_s, d),
        seg=mat(2, d),
        ln_emb_g=np.ones(d),
        ln_emb_b=np.zeros(d),
        qa_w=mat(d, 2),
        qa_b=np.zeros(2),
    )
    if config.share_blocks:
        shared = make_block()
        w.blocks = [shared] * config.l
    else:
        w.blocks = [make_block() for _ in range(config.l)]
    return w


def distinct_blocks(weights: EncoderWeights) -> list[BlockWeights]:
    """Block parameter sets with shared slots deduplicated (identity-based)."""
    seen: list[BlockWeights] = []
    for b in weights.blocks:
        if not any(b is s for s in seen):
            seen.append(b)
    return seen


_BLOCK_FIELDS = [f.name for f in fields(BlockWeights)]


def iter_params(weights: EncoderWeights):
    """Yield (name, array) for every distinct parameter, in declaration order."""
    yield "tok", weights.tok
    yield "pos", weights.pos
    yield "seg", weights.seg
    yield "ln_emb_g", weights.ln_emb_g
    yield "ln_emb_b", weights.ln_emb_b
    for i, block in enumerate(distinct_blocks(weights)):
        for name in _BLOCK_FIELDS:
            yield f"block{i}.{name}", getattr(block, name)
    yield "qa_w", weights.qa_w
    yield "qa_b", weights.qa_b


def parameter_count(weights: EncoderWeights) -> int:
    return sum(arr.size for _, arr in iter_params(weights))


def weights_checksum(weights: EncoderWeights) -> str:
    h = hashlib.sha256()
    for name, arr in iter_params(weights):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def save_checkpoint(path, config: ModelConfig, weights: EncoderWeights) -> None:
    """Binary checkpoint: magic, version, JSON config, matrices as little-endian f64."""
    cfg = config.to_json().encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(cfg)))
        f.write(cfg)
        for _, arr in iter_params(weights):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, EncoderWeights]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", f.read(4))
        config = ModelConfig.from_json(f.read(cfg_len).decode("utf-8"))
        weights = init_weights(config)  # same shapes, then overwritten below

        def read_into(arr):
            buf = f.read(arr.size * 8)
            if len(buf) != arr.size * 8:
                raise ValueError(f"{path}: truncated checkpoint")
            arr[...] = np.frombuffer(buf, dtype="<f8").reshape(arr.shape)

        for _, arr in iter_params(weights):
            read_into(arr)
    return config, weights


# ---------------------------------------------------------------------------
# Attention masks
# ---------------------------------------------------------------------------

def full_mask(n: int, key_valid: np.ndarray | None = None) -> np.ndarray:
    """Everyone attends to every valid key. key_valid marks non-pad positions."""
    if key_valid is None:
        return np.ones((n, n), dtype=bool)
    if not key_valid.any():
        raise ContractError("mask must keep at least one key position")
    return np.broadcast_to(key_valid, (n, n)).copy()


def block_diagonal_mask(n_first: int, n_second: int,
                        key_valid: np.ndarray | None = None) -> np.ndarray:
    """Attention restricted to within-segment pairs: the split-phase oracle."""
    n = n_first + n_second
    mask = np.zeros((n, n), dtype=bool)
    mask[:n_first, :n_first] = True
    mask[n_first:, n_first:] = True
    if key_valid is not None:
        mask &= key_valid
    return mask


def validate_mask(mask: np.ndarray) -> None:
    if mask.ndim != 2 or mask.shape[0] != mask.shape[1]:
        raise ContractError(f"mask must be square, got {mask.shape}")
    if not mask.any(axis=1).all():
        raise ContractError("mask has a fully masked row")


# ---------------------------------------------------------------------------
# Forward ops
# ---------------------------------------------------------------------------

def embed(ids, positions, segments, weights: EncoderWeights) -> Matrix:
    """token + position + segment embedding rows, then layer-norm. 0 MACs."""
    ids = np.asarray(ids)
    positions = np.asarray(positions)
    segments = np.asarray(segments)
    if not (len(ids) == len(positions) == len(segments)):
        raise ContractError("ids/positions/segments must have equal length")
    if ids.min(initial=0) < 0 or (len(ids) and ids.max() >= weights.tok.shape[0]):
        raise ContractError("token id out of range")
    if len(ids) and positions.max() >= weights.pos.shape[0]:
        raise ContractError("position id out of range")
    if len(ids) and segments.max() >= weights.seg.shape[0]:
        raise ContractError("segment id out of range")
    h = weights.tok[ids] + weights.pos[positions] + weights.seg[segments]
    return layer_norm(h, weights.ln_emb_g, weights.ln_emb_b)


def multi_head_attention(h: Matrix, mask: np.ndarray, bw: BlockWeights,
                         n_heads: int, counter: MacCounter | None = None) -> Matrix:
    """Masked multi-head self-attention (projection output, before residual)."""
    n, d = h.shape
    d_head = d // n_heads
    q = matmul(h, bw.wq, counter) + bw.bq
    k = matmul(h, bw.wk, counter) + bw.bk
    v = matmul(h, bw.wv, counter) + bw.bv
    penalty = np.where(mask, 0.0, MASK_PENALTY)
    scale = 1.0 / np.sqrt(d_head)
    ctx = np.empty_like(h)
    for i in range(n_heads):
        sl = slice(i * d_head, (i + 1) * d_head)
        scores = matmul(q[:, sl], k[:, sl].T, counter) * scale + penalty
        probs = softmax_rows(scores, mask)
        ctx[:, sl] = matmul(probs, v[:, sl], counter)
    return matmul(ctx, bw.wo, counter) + bw.bo


def encoder_block(h: Matrix, mask: np.ndarray, bw: BlockWeights,
                  n_heads: int, counter: MacCounter | None = None) -> Matrix:
    """Post-layer-norm block: attention + residual + LN, FFN(GELU) + residual + LN.

    MACs per call: 4*n*d^2 + 2*n^2*d + 2*n*d*d_ff.
    """
    if h.shape[0] != mask.shape[0]:
        raise ContractError(f"hidden rows {h.shape[0]} != mask size {mask.shape[0]}")
    validate_mask(mask)
    attn = multi_head_attention(h, mask, bw, n_heads, counter)
    h1 = layer_norm(h + attn, bw.ln1_g, bw.ln1_b)
    ff = matmul(gelu(matmul(h1, bw.w1, counter) + bw.b1), bw.w2, counter) + bw.b2
    return layer_norm(h1 + ff, bw.ln2_g, bw.ln2_b)


def run_blocks(h: Matrix, mask: np.ndarray, weights: EncoderWeights, config: ModelConfig,
               from_block: int, to_block: int, counter: MacCounter | None = None) -> Matrix:
    """Apply blocks [from_block, to_block) in order; an empty range is the identity."""
    if not (0 <= from_block <= to_block <= config.l):
        raise ContractError(f"block range [{from_block}, {to_block}) outside [0, {config.l}]")
    for i in range(from_block, to_block):
        h = encoder_block(h, mask, weights.blocks[i], config.n_heads, counter)
    return h


def qa_head(h: Matrix, weights: EncoderWeights,
            counter: MacCounter | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-token start and end logits from the d x 2 projection."""
    logits = matmul(h, weights.qa_w, counter) + weights.qa_b
    return logits[:, 0], logits[:, 1]
