"""End-to-end open-domain QA: retrieve top-p, read each candidate, aggregate, score."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, replace

from .cache import CacheFile
from .encoder import EncoderWeights, ModelConfig
from .reader import (
    SegmentedInput,
    decode_span,
    dil_forward,
    encode_paragraph,
    encode_question,
    paragraph_part,
    question_ids,
)
from .retriever import InvertedIndex, ParagraphStore, search
from .text import QaDataset, Vocab, normalize_answer, tokenize


@dataclass(frozen=True)
class AggregationPolicy:
    """reader_only ranks by s_r; fused by mu * s_r + (1 - mu) * s_bm25."""

    mode: str = "fused"
    mu: float = 0.5

    def __post_init__(self):
        if self.mode not in ("reader_only", "fused"):
            raise ValueError(f"unknown aggregation mode {self.mode!r}")
        if not (0.0 <= self.mu <= 1.0):
            raise ValueError("mu must lie in [0, 1]")

    def score(self, s_r: float, s_bm25: float) -> float:
        if self.mode == "reader_only":
            return s_r
        return self.mu * s_r + (1.0 - self.mu) * s_bm25


@dataclass(frozen=True)
class OdqaAnswer:
    qid: str
    answer_text: str
    paragraph_id: int
    s_r: float
    s_bm25: float
    fused_score: float


NO_ANSWER = OdqaAnswer(qid="", answer_text="", paragraph_id=-1,
                       s_r=float("-inf"), s_bm25=float("-inf"),
                       fused_score=float("-inf"))


@dataclass(frozen=True)
class Candidate:
    pid: int
    s_bm25: float
    s_r: float
    answer_text: str


def read_candidates(question: str, p: int, index: InvertedIndex, store: ParagraphStore,
                    weights: EncoderWeights, config: ModelConfig, vocab: Vocab,
                    cache: CacheFile | None = None,
                    max_answer_tokens: int = 30) -> list[Candidate]:
    """Retrieve top-p and read each paragraph once; policies re-score these."""
    results = search(question, index, p)
    if not results:
        return []
    q_ids = question_ids(question, vocab, config)
    q_states = encode_question(q_ids, weights, config)
    candidates = []
    for r in results:
        para = store[r.pid]
        tok = tokenize(para.text)
        if len(tok) == 0:
            continue
        p_ids, p_offsets = paragraph_part(tok, 0, len(tok), vocab, config)
        if cache is not None:
            p_states = cache.get(r.pid)
        else:
            p_states = encode_paragraph(p_ids, weights, config)
        seg = SegmentedInput(q_ids=q_ids, p_ids=p_ids, q_max=config.q_max,
                             p_offsets=p_offsets, paragraph_text=para.text)
        start, end = dil_forward(q_states, p_states, weights, config)
        span = decode_span(start, end, seg, max_answer_tokens)
        candidates.append(Candidate(pid=r.pid, s_bm25=r.s_bm25, s_r=span.s_r,
                                    answer_text=span.answer_text))
    return candidates


def pick_winner(candidates: list[Candidate], policy: AggregationPolicy) -> OdqaAnswer:
    if not candidates:
        return NO_ANSWER
    best = max(candidates, key=lambda c: (policy.score(c.s_r, c.s_bm25), -c.pid))
    return OdqaAnswer(qid="", answer_text=best.answer_text, paragraph_id=best.pid,
                      s_r=best.s_r, s_bm25=best.s_bm25,
                      fused_score=policy.score(best.s_r, best.s_bm25))


def ask(question: str, p: int, policy: AggregationPolicy, index: InvertedIndex,
        store: ParagraphStore, weights: EncoderWeights, config: ModelConfig,
        vocab: Vocab, cache: CacheFile | None = None) -> OdqaAnswer:
    """Answer one question against the indexed corpus."""
    candidates = read_candidates(question, p, index, store, weights, config, vocab, cache)
    return pick_winner(candidates, policy)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _answer_tokens(text: str) -> list[str]:
    return normalize_answer(text).split()


def compute_em_f1(prediction: str, golds) -> tuple[float, float]:
    """Exact match and token-level F1 on normalized strings, max over golds."""
    if not golds:
        raise ValueError("at least one gold answer required")
    pred_norm = normalize_answer(prediction)
    pred_tokens = Counter(pred_norm.split())
    best_em = best_f1 = 0.0
    for gold in golds:
        gold_norm = normalize_answer(gold)
        if pred_norm == gold_norm:
            best_em = 1.0
        gold_tokens = Counter(gold_norm.split())
        overlap = sum((pred_tokens & gold_tokens).values())
        if overlap:
            precision = overlap / sum(pred_tokens.values())
            recall = overlap / sum(gold_tokens.values())
            best_f1 = max(best_f1, 2 * precision * recall / (precision + recall))
    return best_em, best_f1


def compute_recall(retrieved_texts_per_question, golds_per_question) -> float:
    """Percent of questions whose normalized gold appears in a retrieved chunk."""
    if not golds_per_question:
        return 0.0
    covered = 0
    for texts, golds in zip(retrieved_texts_per_question, golds_per_question):
        normalized = [normalize_answer(t) for t in texts]
        if any(normalize_answer(g) in t for g in golds for t in normalized):
            covered += 1
    return 100.0 * covered / len(golds_per_question)


@dataclass(frozen=True)
class EvalReport:
    em: float  # percent
    f1: float
    recall: float


@dataclass
class EvalSummary:
    reader_only: EvalReport
    fused: EvalReport
    rows: list  # (qid, policy, prediction, em, f1, pid, s_r, s_bm25, fused)


def evaluate(dataset: QaDataset, store: ParagraphStore, index: InvertedIndex,
             weights: EncoderWeights, config: ModelConfig, vocab: Vocab,
             p: int = 29, mu: float = 0.5, cache: CacheFile | None = None,
             workers: int = 1) -> EvalSummary:
    """Per-question ask with both aggregation policies over one retrieval pass.

    Questions are independent; workers > 1 fans them out over threads.
    The report is ordered by dataset position either way.
    """
    policies = {"reader_only": AggregationPolicy(mode="reader_only", mu=mu),
                "fused": AggregationPolicy(mode="fused", mu=mu)}
    sums = {name: [0.0, 0.0] for name in policies}
    rows = []
    retrieved_texts = []
    golds_list = []

    def read_one(ex):
        return read_candidates(ex.question, p, index, store, weights,
                               config, vocab, cache)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_question = list(pool.map(read_one, dataset))
    else:
        per_question = [read_one(ex) for ex in dataset]

    for ex, candidates in zip(dataset, per_question):
        retrieved = search(ex.question, index, p)
        retrieved_texts.append([store[r.pid].text for r in retrieved])
        golds = list(ex.answers) if ex.answers else [""]
        golds_list.append(golds)
        for name, policy in policies.items():
            ans = replace(pick_winner(candidates, policy), qid=ex.qid)
            em, f1 = compute_em_f1(ans.answer_text, golds)
            sums[name][0] += em
            sums[name][1] += f1
            rows.append((ex.qid, name, ans.answer_text, em, f1,
                         ans.paragraph_id, ans.s_r, ans.s_bm25, ans.fused_score))
    recall = compute_recall(retrieved_texts, golds_list)
    n = max(1, len(dataset))
    reports = {name: EvalReport(em=100.0 * s[0] / n, f1=100.0 * s[1] / n, recall=recall)
               for name, s in sums.items()}
    return EvalSummary(reader_only=reports["reader_only"], fused=reports["fused"],
                       rows=rows)


def write_eval_report(summary: EvalSummary, path) -> None:
    """Per-question rows plus a summary line in w/o-and-w/ column order."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("qid\tpolicy\tprediction\tem\tf1\tparagraph_id\ts_r\ts_bm25\tfused\n")
        for qid, policy, pred, em, f1, pid, s_r, s_bm25, fused in summary.rows:
            f.write(f"{qid}\t{policy}\t{pred}\t{em:.0f}\t{f1:.4f}\t{pid}"
                    f"\t{s_r:.6f}\t{s_bm25:.6f}\t{fused:.6f}\n")
        ro, fu = summary.reader_only, summary.fused
        f.write(f"# summary\tEM_wo={ro.em:.2f}\tEM_w={fu.em:.2f}"
                f"\tF1_wo={ro.f1:.2f}\tF1_w={fu.f1:.2f}\tR={ro.recall:.2f}\n")


# ---------------------------------------------------------------------------
# mu cross-validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuestionRecord:
    """Frozen per-question candidates, so mu selection needs no re-reading."""

    golds: tuple
    candidates: tuple  # of Candidate

MU_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))


def cross_validate_mu(records, grid=MU_GRID, n_folds: int = 2) -> float:
    """Smallest mu on the grid maximizing mean fold EM of the fused policy."""
    if n_folds < 2:
        raise ValueError("need at least 2 folds")
    if len(records) < n_folds:
        raise ValueError("fewer records than folds")
    folds = [records[i::n_folds] for i in range(n_folds)]
    best_mu, best_score = None, None
    for mu in grid:
        policy = AggregationPolicy(mode="fused", mu=mu)
        fold_scores = []
        for fold in folds:
            em = 0.0
            for rec in fold:
                winner = pick_winner(list(rec.candidates), policy)
                em += compute_em_f1(winner.answer_text, list(rec.golds))[0]
            fold_scores.append(em / len(fold))
        score = sum(fold_scores) / len(fold_scores)
        if best_score is None or score > best_score:
            best_mu, best_score = mu, score
    return best_mu
