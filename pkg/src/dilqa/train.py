"""Analytic backpropagation, Adam, and toy-scale training on synthetic span tasks.

The synthetic task plants (key, value) pairs in the paragraph and asks for
the value behind the key named in the question. Keys are two-token
composites and decoys share one token with the asked key, so answering
requires composing both key tokens and genuinely reading the question:
with no interaction blocks (k = l) the task is unsolvable beyond chance.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .encoder import (
    BlockWeights,
    EncoderWeights,
    ModelConfig,
    MASK_PENALTY,
    block_diagonal_mask,
    full_mask,
    init_weights,
)
from .reader import SegmentedInput, decode_span, valid_span_positions
from .tensor import _GELU_C, ContractError, gelu_grad
from .text import CLS_ID, SEP_ID, Vocab

LN_EPS = 1e-12


@dataclass(frozen=True)
class SpanLoss:
    loss: float
    gold_start: int
    gold_end: int


def _masked_log_softmax(logits: np.ndarray, valid: np.ndarray) -> np.ndarray:
    z = np.where(valid, logits, -np.inf)
    z = z - z.max()
    log_z = np.log(np.exp(z).sum())
    return z - log_z


def span_loss(start_logits, end_logits, gold_start: int, gold_end: int,
              valid_mask: np.ndarray) -> SpanLoss:
    """Mean of start/end cross-entropies, normalized over valid positions only."""
    if not valid_mask[gold_start] or not valid_mask[gold_end]:
        raise ContractError("gold span index is masked invalid")
    ls = _masked_log_softmax(np.asarray(start_logits, dtype=float), valid_mask)
    le = _masked_log_softmax(np.asarray(end_logits, dtype=float), valid_mask)
    loss = -(ls[gold_start] + le[gold_end]) / 2.0
    return SpanLoss(loss=float(loss), gold_start=gold_start, gold_end=gold_end)


def _span_loss_grads(start_logits, end_logits, gold_start, gold_end, valid_mask):
    loss = span_loss(start_logits, end_logits, gold_start, gold_end, valid_mask)
    grads = []
    for logits, gold in ((start_logits, gold_start), (end_logits, gold_end)):
        p = np.exp(_masked_log_softmax(np.asarray(logits, dtype=float), valid_mask))
        p[~valid_mask] = 0.0
        p[gold] -= 1.0
        grads.append(p / 2.0)
    return loss, grads[0], grads[1]


# ---------------------------------------------------------------------------
# Forward with tape + backward
# ---------------------------------------------------------------------------

def _ln_fwd(x, g, b):
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mean) * inv
    return xhat * g + b, (xhat, inv)


def _ln_bwd(dy, cache, g):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
    return dx, dg, db


def _split_heads(x, n_heads):
    n, d = x.shape
    return x.reshape(n, n_heads, d // n_heads).transpose(1, 0, 2)  # (H, n, dh)


def _merge_heads(x):
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


def _block_fwd(h, mask, bw: BlockWeights, n_heads: int):
    q = h @ bw.wq + bw.bq
    k = h @ bw.wk + bw.bk
    v = h @ bw.wv + bw.bv
    qh, kh, vh = (_split_heads(x, n_heads) for x in (q, k, v))
    penalty = np.where(mask, 0.0, MASK_PENALTY)
    scale = 1.0 / np.sqrt(h.shape[1] // n_heads)
    s = qh @ kh.transpose(0, 2, 1) * scale + penalty
    s -= s.max(axis=2, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=2, keepdims=True)
    ctx = _merge_heads(p @ vh)
    attn = ctx @ bw.wo + bw.bo
    h1, ln1_cache = _ln_fwd(h + attn, bw.ln1_g, bw.ln1_b)
    z = h1 @ bw.w1 + bw.b1
    tanh_u = np.tanh(_GELU_C * (z + 0.044715 * (z * z * z)))
    g = 0.5 * z * (1.0 + tanh_u)
    ff = g @ bw.w2 + bw.b2
    out, ln2_cache = _ln_fwd(h1 + ff, bw.ln2_g, bw.ln2_b)
    cache = dict(h=h, qh=qh, kh=kh, vh=vh, probs=p, ctx=ctx, ln1=ln1_cache,
                 h1=h1, z=z, tanh_u=tanh_u, g=g, ln2=ln2_cache,
                 scale=scale, n_heads=n_heads)
    return out, cache


def _block_bwd(dout, cache, bw: BlockWeights, gb: BlockWeights):
    h, qh, kh, vh = cache["h"], cache["qh"], cache["kh"], cache["vh"]
    h1, z, g = cache["h1"], cache["z"], cache["g"]
    n_heads, scale = cache["n_heads"], cache["scale"]

    dsum2, dg2, db2 = _ln_bwd(dout, cache["ln2"], bw.ln2_g)
    gb.ln2_g += dg2
    gb.ln2_b += db2
    dh1 = dsum2.copy()
    dff = dsum2
    gb.w2 += g.T @ dff
    gb.b2 += dff.sum(axis=0)
    dgl = dff @ bw.w2.T
    dz = dgl * gelu_grad(z, cache["tanh_u"])
    gb.w1 += h1.T @ dz
    gb.b1 += dz.sum(axis=0)
    dh1 += dz @ bw.w1.T

    dsum1, dg1, db1 = _ln_bwd(dh1, cache["ln1"], bw.ln1_g)
    gb.ln1_g += dg1
    gb.ln1_b += db1
    dh = dsum1.copy()
    dattn = dsum1
    gb.wo += cache["ctx"].T @ dattn
    gb.bo += dattn.sum(axis=0)
    dctx = dattn @ bw.wo.T

    p = cache["probs"]
    dctxh = _split_heads(dctx, n_heads)
    dp = dctxh @ vh.transpose(0, 2, 1)
    dvh = p.transpose(0, 2, 1) @ dctxh
    ds = p * (dp - (dp * p).sum(axis=2, keepdims=True))
    dq = _merge_heads(ds @ kh * scale)
    dk = _merge_heads(ds.transpose(0, 2, 1) @ qh * scale)
    dv = _merge_heads(dvh)
    gb.wq += h.T @ dq
    gb.bq += dq.sum(axis=0)
    gb.wk += h.T @ dk
    gb.bk += dk.sum(axis=0)
    gb.wv += h.T @ dv
    gb.bv += dv.sum(axis=0)
    dh += dq @ bw.wq.T + dk @ bw.wk.T + dv @ bw.wv.T
    return dh


def _embed_fwd(ids, positions, segments, w: EncoderWeights):
    e = w.tok[ids] + w.pos[positions] + w.seg[segments]
    out, ln_cache = _ln_fwd(e, w.ln_emb_g, w.ln_emb_b)
    return out, (ids, positions, segments, ln_cache)


def _embed_bwd(dout, cache, w: EncoderWeights, gw: EncoderWeights):
    ids, positions, segments, ln_cache = cache
    de, dg, db = _ln_bwd(dout, ln_cache, w.ln_emb_g)
    gw.ln_emb_g += dg
    gw.ln_emb_b += db
    np.add.at(gw.tok, ids, de)
    np.add.at(gw.pos, positions, de)
    np.add.at(gw.seg, segments, de)


def zeros_like_weights(weights: EncoderWeights) -> EncoderWeights:
    """Zero gradient container mirroring the weight sharing structure."""
    def zero_block(b):
        return BlockWeights(**{f.name: np.zeros_like(getattr(b, f.name))
                               for f in fields(BlockWeights)})

    by_id: dict[int, BlockWeights] = {}
    blocks = []
    for b in weights.blocks:
        if id(b) not in by_id:
            by_id[id(b)] = zero_block(b)
        blocks.append(by_id[id(b)])
    return EncoderWeights(
        tok=np.zeros_like(weights.tok),
        pos=np.zeros_like(weights.pos),
        seg=np.zeros_like(weights.seg),
        ln_emb_g=np.zeros_like(weights.ln_emb_g),
        ln_emb_b=np.zeros_like(weights.ln_emb_b),
        blocks=blocks,
        qa_w=np.zeros_like(weights.qa_w),
        qa_b=np.zeros_like(weights.qa_b),
    )


def _tape_forward(seg: SegmentedInput, weights: EncoderWeights, config: ModelConfig,
                  mode: str):
    """Forward pass recording every intermediate needed for backprop."""
    tape = {"mode": mode, "blocks": []}
    # Embedding is row-wise, so one joint embedding pass is bitwise identical
    # to embedding the segments separately; it also keeps the k=0 training
    # trajectory bitwise equal between the split and unsplit modes.
    h, emb = _embed_fwd(seg.concat_ids(), seg.concat_positions(),
                        seg.concat_segments(), weights)
    tape["emb"] = emb
    if mode == "dil":
        hq, hp = h[: seg.n_q], h[seg.n_q :]
        mq, mp = full_mask(seg.n_q), full_mask(seg.n_p)
        for i in range(config.k):
            hq, cq = _block_fwd(hq, mq, weights.blocks[i], config.n_heads)
            hp, cp = _block_fwd(hp, mp, weights.blocks[i], config.n_heads)
            tape["blocks"].append(("split", i, cq, cp))
        h = np.concatenate([hq, hp], axis=0)
        mask = full_mask(seg.n_q + seg.n_p)
        for i in range(config.k, config.l):
            h, c = _block_fwd(h, mask, weights.blocks[i], config.n_heads)
            tape["blocks"].append(("joint", i, c, None))
    elif mode == "unsplit":
        mask = full_mask(seg.n_q + seg.n_p)
        for i in range(config.l):
            h, c = _block_fwd(h, mask, weights.blocks[i], config.n_heads)
            tape["blocks"].append(("joint", i, c, None))
    else:
        raise ValueError(f"unknown forward mode {mode!r}")
    tape["h_final"] = h
    logits = h @ weights.qa_w + weights.qa_b
    return logits[:, 0], logits[:, 1], tape


def training_loss(weights, config, seg, gold_start, gold_end, valid_mask,
                  mode: str = "dil") -> float:
    """Loss only; used by finite-difference checks."""
    s, e, _ = _tape_forward(seg, weights, config, mode)
    return span_loss(s, e, gold_start, gold_end, valid_mask).loss


def backward(weights: EncoderWeights, config: ModelConfig, seg: SegmentedInput,
             gold_start: int, gold_end: int, valid_mask: np.ndarray | None = None,
             mode: str = "dil",
             grads: EncoderWeights | None = None) -> tuple[SpanLoss, EncoderWeights]:
    """Forward + exact analytic gradients of the span loss for every parameter.

    gold indices are sequence coordinates. With shared blocks the single
    parameter set accumulates gradient across all l applications. Passing a
    grads container accumulates into it (minibatch use); otherwise a fresh
    zeroed one is returned.
    """
    if valid_mask is None:
        valid_mask = sequence_valid_mask(seg)
    start, end, tape = _tape_forward(seg, weights, config, mode)
    loss, d_start, d_end = _span_loss_grads(start, end, gold_start, gold_end, valid_mask)

    if grads is None:
        grads = zeros_like_weights(weights)
    dlogits = np.stack([d_start, d_end], axis=1)
    h_final = tape["h_final"]
    grads.qa_w += h_final.T @ dlogits
    grads.qa_b += dlogits.sum(axis=0)
    dh = dlogits @ weights.qa_w.T

    for kind, i, c1, c2 in reversed(tape["blocks"]):
        if kind == "joint":
            dh = _block_bwd(dh, c1, weights.blocks[i], grads.blocks[i])
        else:
            if isinstance(dh, tuple):
                dhq, dhp = dh
            else:  # gradient arriving from the first joint block: split it
                dhq, dhp = dh[: seg.n_q], dh[seg.n_q :]
            dhq = _block_bwd(dhq, c1, weights.blocks[i], grads.blocks[i])
            dhp = _block_bwd(dhp, c2, weights.blocks[i], grads.blocks[i])
            dh = (dhq, dhp)

    if isinstance(dh, tuple):
        dh = np.concatenate(dh, axis=0)
    _embed_bwd(dh, tape["emb"], weights, grads)
    return loss, grads


def sequence_valid_mask(seg: SegmentedInput) -> np.ndarray:
    """Positions eligible as gold/predicted span endpoints, over the full sequence."""
    mask = np.zeros(seg.n_q + seg.n_p, dtype=bool)
    mask[seg.n_q + valid_span_positions(seg)] = True
    return mask


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, weights: EncoderWeights, grads: EncoderWeights) -> None:
    from .encoder import iter_params

    state.step += 1
    t = state.step
    params = dict(iter_params(weights))
    for name, g in iter_params(grads):
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        mhat = m / (1 - state.beta1**t)
        vhat = v / (1 - state.beta2**t)
        p -= state.lr * mhat / (np.sqrt(vhat) + state.eps)


# ---------------------------------------------------------------------------
# Synthetic key-value span task
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynExample:
    seg: SegmentedInput
    gold_start: int  # paragraph coordinates
    gold_end: int
    gold_text: str
    paragraph_tokens: tuple[str, ...]


@dataclass(frozen=True)
class SyntheticTask:
    """Key-value lookup with planted decoy keys.

    key_tokens=2 uses composite keys; collide_prob is the fraction of
    examples whose decoys share one token with the asked key, which forces
    composing both tokens instead of matching either alone. The remaining
    examples are solvable by single-token matching and keep early training
    off the all-decoys-look-alike plateau.
    """

    seed: int = 0
    n_key_parts: int = 12
    n_values: int = 24
    n_pairs: int = 4
    key_tokens: int = 2
    collide_prob: float = 0.5
    n_train: int = 20000
    n_eval: int = 1000

    def make_vocab(self) -> Vocab:
        vocab = Vocab()
        for tok in [f"p{i:02d}" for i in range(self.n_key_parts)] + \
                   [f"v{i:02d}" for i in range(self.n_values)]:
            vocab.stoi[tok] = len(vocab.itos)
            vocab.itos.append(tok)
        return vocab

    def _sample_keys(self, rng):
        if self.key_tokens == 1:
            parts = rng.choice(self.n_key_parts, size=self.n_pairs, replace=False)
            return [(int(p),) for p in parts]
        collide = rng.random() < self.collide_prob
        while True:
            a, b = (int(x) for x in rng.integers(0, self.n_key_parts, size=2))
            keys = [(a, b)]
            if collide:
                keys.append((a, int(rng.integers(0, self.n_key_parts))))
                keys.append((int(rng.integers(0, self.n_key_parts)), b))
            while len(keys) < self.n_pairs:
                keys.append(tuple(int(x) for x in rng.integers(0, self.n_key_parts, size=2)))
            if len(set(keys)) == self.n_pairs:
                return keys

    def generate(self, count: int, vocab: Vocab, config: ModelConfig,
                 salt: int = 0) -> list[SynExample]:
        rng = np.random.default_rng((self.seed, salt))
        examples = []
        for _ in range(count):
            keys = self._sample_keys(rng)
            values = rng.choice(self.n_values, size=self.n_pairs, replace=False)
            order = rng.permutation(self.n_pairs)
            tokens: list[str] = []
            gold_start = -1
            for slot in order:
                if slot == 0:
                    gold_start = len(tokens) + self.key_tokens
                tokens += [f"p{p:02d}" for p in keys[slot]]
                tokens.append(f"v{values[slot]:02d}")
            gold_text = f"v{values[0]:02d}"
            text = " ".join(tokens)
            offsets = []
            pos = 0
            for t in tokens:
                offsets.append((pos, pos + len(t)))
                pos += len(t) + 1
            q_ids = [CLS_ID] + [vocab.stoi[f"p{p:02d}"] for p in keys[0]] + [SEP_ID]
            seg = SegmentedInput(
                q_ids=np.array(q_ids, dtype=int),
                p_ids=np.array(vocab.encode(tokens) + [SEP_ID], dtype=int),
                q_max=config.q_max,
                p_offsets=tuple(offsets) + (None,),
                paragraph_text=text,
            )
            examples.append(SynExample(seg=seg, gold_start=gold_start,
                                       gold_end=gold_start, gold_text=gold_text,
                                       paragraph_tokens=tuple(tokens)))
        return examples

    @property
    def chance_em(self) -> float:
        """Best question-blind exact match, in percent."""
        return 100.0 / self.n_pairs


@dataclass
class TrainResult:
    weights: EncoderWeights
    config: ModelConfig
    em: float
    f1: float
    losses: list[float]


def evaluate_examples(weights, config, examples, mode: str = "dil",
                      max_answer_tokens: int = 4) -> tuple[float, float]:
    """Held-out EM/F1 (percent) of greedy span decoding."""
    from .pipeline import compute_em_f1
    from .reader import forward as dil_forward_pass, baseline_forward

    em_sum = f1_sum = 0.0
    for ex in examples:
        if mode == "dil":
            s, e = dil_forward_pass(ex.seg, weights, config)
        else:
            s, e = baseline_forward(ex.seg, weights, config)
        span = decode_span(s, e, ex.seg, max_answer_tokens)
        em, f1 = compute_em_f1(span.answer_text, [ex.gold_text])
        em_sum += em
        f1_sum += f1
    n = max(1, len(examples))
    return 100.0 * em_sum / n, 100.0 * f1_sum / n


def scale_grads(grads: EncoderWeights, factor: float) -> None:
    from .encoder import iter_params

    for _, arr in iter_params(grads):
        arr *= factor


def accumulate_grads(total: EncoderWeights, part: EncoderWeights) -> None:
    from .encoder import iter_params

    arrs = dict(iter_params(total))
    for name, arr in iter_params(part):
        arrs[name] += arr


def train_toy(config: ModelConfig, task: SyntheticTask, epochs: int = 2,
              batch: int = 16, lr: float = 1e-3, mode: str = "dil",
              log_every: int = 0) -> TrainResult:
    """Train from scratch on the synthetic task; report held-out EM/F1."""
    vocab = task.make_vocab()
    if vocab.size > config.vocab_size:
        raise ContractError(f"config.vocab_size={config.vocab_size} too small "
                            f"for task vocabulary of {vocab.size}")
    train_set = task.generate(task.n_train, vocab, config, salt=1)
    eval_set = task.generate(task.n_eval, vocab, config, salt=2)
    weights = init_weights(config)
    adam = AdamState(lr=lr)
    rng = np.random.default_rng(config.seed + 17)
    losses: list[float] = []
    for epoch in range(epochs):
        order = rng.permutation(len(train_set))
        for lo in range(0, len(order), batch):
            idx = order[lo : lo + batch]
            grads = zeros_like_weights(weights)
            batch_loss = 0.0
            for j in idx:
                ex = train_set[j]
                valid = sequence_valid_mask(ex.seg)
                loss, _ = backward(weights, config, ex.seg,
                                   ex.seg.n_q + ex.gold_start,
                                   ex.seg.n_q + ex.gold_end,
                                   valid, mode=mode, grads=grads)
                if not np.isfinite(loss.loss):
                    raise RuntimeError(
                        f"training diverged: loss={loss.loss} at epoch {epoch}, "
                        f"step {len(losses)}")
                batch_loss += loss.loss
            scale_grads(grads, 1.0 / len(idx))
            adam_step(adam, weights, grads)
            losses.append(batch_loss / len(idx))
            if log_every and len(losses) % log_every == 0:
                print(f"epoch {epoch} step {len(losses)} loss {losses[-1]:.4f}")
    em, f1 = evaluate_examples(weights, config, eval_set, mode=mode)
    return TrainResult(weights=weights, config=config, em=em, f1=f1, losses=losses)


def k_sweep(config: ModelConfig, task: SyntheticTask, epochs: int = 2,
            batch: int = 16, lr: float = 1e-3) -> list[tuple[int, float, float]]:
    """One training run per k in 0..l with a fixed seed; returns (k, EM, F1) rows."""
    rows = []
    for k in range(config.l + 1):
        cfg_k = ModelConfig(**{**{f.name: getattr(config, f.name)
                                  for f in fields(config)}, "k": k})
        result = train_toy(cfg_k, task, epochs=epochs, batch=batch, lr=lr)
        rows.append((k, result.em, result.f1))
    return rows


def write_ksweep_table(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("k\tem\tf1\n")
        for k, em, f1 in rows:
            f.write(f"{k}\t{em:.2f}\t{f1:.2f}\n")
