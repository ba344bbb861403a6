"""Command-line entry point wiring the library into indexing, training,
precomputation, question answering, evaluation, and benchmarking runs."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import __version__
from .encoder import ModelConfig, init_weights, load_checkpoint, save_checkpoint
from .tensor import ContractError
from .text import SchemaError, Vocab, load_squad_json

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _echo_config(command: str, resolved: dict) -> None:
    print(f"config[{command}]: {json.dumps(resolved, sort_keys=True, default=str)}")


def _write_manifest(outdir: Path, command: str, resolved: dict, outputs: list) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    entry = {"command": command, "version": __version__,
             "config": resolved, "outputs": [str(o) for o in outputs]}
    with open(outdir / "run_manifest.jsonl", "a", encoding="utf-8") as f:
        f.write(json.dumps(entry, sort_keys=True, default=str) + "\n")


def _load_config(args) -> ModelConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"missing config file: {path}")
        config = ModelConfig.from_json(path.read_text())
    else:
        config = ModelConfig()
    overrides = {}
    for name in ("k", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if overrides:
        config = dataclasses.replace(config, **overrides)
    return config


def _read_corpus(corpus_path: Path) -> list[tuple[str, str]]:
    """Directory of UTF-8 text files, or a one-JSON-per-line dump with id/text."""
    if corpus_path.is_dir():
        docs = []
        for path in sorted(corpus_path.iterdir()):
            if path.is_file():
                docs.append((path.name, path.read_text(encoding="utf-8")))
        return docs
    if corpus_path.is_file():
        docs = []
        with open(corpus_path, encoding="utf-8") as f:
            for i, line in enumerate(f):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as e:
                    raise UsageError(f"{corpus_path}:{i + 1}: bad JSON line: {e}")
                docs.append((str(obj.get("id", i)), obj["text"]))
        return docs
    raise UsageError(f"unreadable corpus: {corpus_path}")


def _require(path_str: str | None, what: str) -> Path:
    if not path_str:
        raise UsageError(f"missing required --{what}")
    path = Path(path_str)
    if not path.exists():
        raise UsageError(f"missing {what}: {path}")
    return path


def _load_model(args) -> tuple[ModelConfig, "object", Vocab]:
    weights_path = _require(args.weights, "weights")
    config, weights = load_checkpoint(weights_path)
    vocab_path = Path(args.vocab) if args.vocab else weights_path.parent / "vocab.txt"
    if not vocab_path.exists():
        raise UsageError(f"missing vocab: {vocab_path}")
    if args.k is not None and args.k != config.k:
        config = dataclasses.replace(config, k=args.k)
    return config, weights, Vocab.load(vocab_path)


def _open_index(args):
    from .retriever import load_index, load_store

    index_dir = _require(args.index, "index")
    index_path, store_path = index_dir / "index.dili", index_dir / "store.dils"
    for p in (index_path, store_path):
        if not p.exists():
            raise UsageError(f"missing index artifact: {p}")
    return load_index(index_path), load_store(store_path)


def cmd_index(args) -> int:
    from .retriever import ParagraphStore, build_index, save_index, save_store

    corpus = _read_corpus(_require(args.corpus, "corpus"))
    if not corpus:
        raise UsageError(f"empty corpus: {args.corpus}")
    store = ParagraphStore.from_documents(corpus, strategy=args.strategy)
    if len(store) == 0:
        raise UsageError(f"corpus produced no paragraphs under strategy {args.strategy!r}")
    index = build_index(store)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    save_store(store, outdir / "store.dils")
    save_index(index, outdir / "index.dili")
    print(f"indexed {len(store)} paragraphs from {len(corpus)} documents "
          f"(strategy={args.strategy})")
    _write_manifest(outdir, "index", vars(args),
                    [outdir / "store.dils", outdir / "index.dili"])
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import SyntheticTask, train_toy

    config = _load_config(args)
    task = SyntheticTask(seed=config.seed, n_train=args.train_size, n_eval=args.eval_size)
    result = train_toy(config, task, epochs=args.epochs, batch=args.batch, lr=args.lr,
                       log_every=args.log_every)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    weights_path = outdir / "weights.dilw"
    save_checkpoint(weights_path, config, result.weights)
    task.make_vocab().save(outdir / "vocab.txt")
    print(f"trained k={config.k}: EM={result.em:.2f} F1={result.f1:.2f} "
          f"final_loss={result.losses[-1]:.4f}")
    _write_manifest(outdir, "train", vars(args), [weights_path, outdir / "vocab.txt"])
    return EXIT_OK


def cmd_ksweep(args) -> int:
    from .plots import save_ksweep_figure
    from .train import SyntheticTask, k_sweep, write_ksweep_table

    config = _load_config(args)
    task = SyntheticTask(seed=config.seed, n_train=args.train_size, n_eval=args.eval_size)
    rows = k_sweep(config, task, epochs=args.epochs, batch=args.batch, lr=args.lr)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    table_path, fig_path = outdir / "ksweep.tsv", outdir / "ksweep.png"
    write_ksweep_table(rows, table_path)
    save_ksweep_figure(rows, fig_path)
    for k, em, f1 in rows:
        print(f"k={k}\tEM={em:.2f}\tF1={f1:.2f}")
    _write_manifest(outdir, "ksweep", vars(args), [table_path, fig_path])
    return EXIT_OK


def cmd_precompute(args) -> int:
    from .cache import precompute

    config, weights, vocab = _load_model(args)
    _, store = _open_index(args)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    cache = precompute(store, weights, config, vocab, out_path, workers=args.workers)
    print(f"precomputed {len(cache)} paragraphs, MACs={cache.build_macs}")
    cache.close()
    _write_manifest(out_path.parent, "precompute", vars(args), [out_path])
    return EXIT_OK


def _open_cache(args, config, weights):
    from .cache import CacheFile

    if not args.cache:
        return None
    cache_path = Path(args.cache)
    if not cache_path.exists():
        raise UsageError(f"missing cache: {cache_path}")
    return CacheFile(cache_path, config, weights)


def cmd_ask(args) -> int:
    from .pipeline import AggregationPolicy, ask

    config, weights, vocab = _load_model(args)
    index, store = _open_index(args)
    cache = _open_cache(args, config, weights)
    policy = AggregationPolicy(mode=args.policy, mu=args.mu)
    answer = ask(args.question, args.p, policy, index, store, weights, config,
                 vocab, cache)
    if cache:
        cache.close()
    if answer.paragraph_id < 0:
        print("no answer: retrieval returned no paragraphs")
    else:
        print(f"answer: {answer.answer_text}")
        print(f"paragraph: {answer.paragraph_id}")
        print(f"s_r={answer.s_r:.6f} s_bm25={answer.s_bm25:.6f} "
              f"fused={answer.fused_score:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .pipeline import evaluate, write_eval_report
    from .plots import save_eval_figure

    config, weights, vocab = _load_model(args)
    index, store = _open_index(args)
    cache = _open_cache(args, config, weights)
    dataset = load_squad_json(_require(args.dataset, "dataset"))
    summary = evaluate(dataset, store, index, weights, config, vocab,
                       p=args.p, mu=args.mu, cache=cache)
    if cache:
        cache.close()
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    report_path, fig_path = outdir / "eval.tsv", outdir / "eval.png"
    write_eval_report(summary, report_path)
    save_eval_figure(summary, fig_path)
    ro, fu = summary.reader_only, summary.fused
    print(f"EM w/o={ro.em:.2f} w/={fu.em:.2f}  F1 w/o={ro.f1:.2f} w/={fu.f1:.2f} "
          f"R={ro.recall:.2f}  (p={args.p}, mu={args.mu})")
    _write_manifest(outdir, "eval", vars(args), [report_path, fig_path])
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import compare, estimate, report, report_tsv
    from .plots import save_bench_figure

    config = _load_config(args)
    reports = compare(config, args.q, args.p, n_q=args.n_q, n_p=args.n_p,
                      seed=config.seed)
    est = estimate(config, args.q, args.p,
                   n_q=args.n_q or config.q_max, n_p=args.n_p or config.p_max)
    for r in reports:
        print(report(r, normalize=args.normalize))
        print()
    print(f"closed-form MAC ratio baseline/split: {est.mac_ratio:.3f} "
          f"(limit l/(l-k) = {config.l / (config.l - config.k) if config.k < config.l else float('inf'):.3f})")
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    tsv_path, fig_path = outdir / "bench.tsv", outdir / "bench.png"
    with open(tsv_path, "w", encoding="utf-8") as f:
        f.write(report_tsv(reports))
    save_bench_figure(reports, fig_path)
    _write_manifest(outdir, "bench", vars(args), [tsv_path, fig_path])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dilqa",
        description="Delayed-interaction reader + BM25 retriever toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_model_flags(p):
        p.add_argument("--weights", help="weights checkpoint (.dilw)")
        p.add_argument("--vocab", help="vocabulary file (default: alongside weights)")
        p.add_argument("--k", type=int, default=None,
                       help="override the checkpoint's split depth k")

    def add_config_flags(p):
        p.add_argument("--config", help="model config JSON file")
        p.add_argument("--k", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)

    def add_train_flags(p):
        p.add_argument("--epochs", type=int, default=2)
        p.add_argument("--batch", type=int, default=16)
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--train-size", type=int, default=20000)
        p.add_argument("--eval-size", type=int, default=1000)

    p = sub.add_parser("index", help="split and index a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--strategy", choices=["window", "newline"], default="window")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("train", help="train the reader on the synthetic task")
    add_config_flags(p)
    add_train_flags(p)
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ksweep", help="train once per k and tabulate EM/F1")
    add_config_flags(p)
    add_train_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ksweep)

    p = sub.add_parser("precompute", help="cache paragraph states after the k split blocks")
    p.add_argument("--index", required=True)
    add_model_flags(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_precompute)

    p = sub.add_parser("ask", help="answer a question against an indexed corpus")
    p.add_argument("--question", required=True)
    p.add_argument("--index", required=True)
    add_model_flags(p)
    p.add_argument("--cache")
    p.add_argument("--p", type=int, default=29)
    p.add_argument("--mu", type=float, default=0.5)
    p.add_argument("--policy", choices=["reader_only", "fused"], default="fused")
    p.set_defaults(func=cmd_ask)

    p = sub.add_parser("eval", help="evaluate EM/F1/R on a QA dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--index", required=True)
    add_model_flags(p)
    p.add_argument("--cache")
    p.add_argument("--p", type=int, default=29)
    p.add_argument("--mu", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="measure per-phase wall-clock and MACs")
    add_config_flags(p)
    p.add_argument("--q", type=int, default=16)
    p.add_argument("--p", type=int, default=16)
    p.add_argument("--n-q", type=int, default=None)
    p.add_argument("--n-p", type=int, default=None)
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _echo_config(args.command, {k: v for k, v in vars(args).items() if k != "func"})
    try:
        return args.func(args)
    except (UsageError, SchemaError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractError, ValueError, RuntimeError, KeyError) as e:
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
