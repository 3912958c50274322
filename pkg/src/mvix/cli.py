"""Command-line surface: synth, index, search, eval, adapt, explain, train.

Every command is deterministic given its flags and seed, and every emitted
artifact gets a sidecar ``<artifact>.manifest.json`` recording the exact
parameters, input digests, and tool version. All nondeterminism (wall clock,
timings) lives in the manifest's "timing" object; everything else is
byte-stable across reruns. TREC run files reference their manifest through
the run tag (a digest of the parameters).

Exit codes: 0 success, 2 usage/config, 3 I/O, 4 data corruption.
The ``MVIX_THREADS`` environment variable sets the search thread count.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .adaptation import adapt_alignment
from .alignment import AlignmentStrategy, compute_similarity, effective_topp_budget
from .engine import (
    RankedList,
    RetrievalConfig,
    gather_candidates,
    read_run,
    rescore_candidates,
    write_run,
)
from .errors import CorruptionError, ConfigError, FormatError, MvixError
from .evaluation import evaluate_run, read_qrels, write_qrels
from .index import build_index, read_index, write_index
from .salience import ceil_budget, load_head, raw_salience, save_head
from .store import DocumentRecord, read_store, write_store
from .synth import PlantSpec, synth_corpus
from .training import TrainConfig, train_salience, write_loss_trace

USAGE_EXIT = 2
IO_EXIT = 3
CORRUPT_EXIT = 4

_CORRUPT_ERRORS = (FormatError, CorruptionError)
_USAGE_ERRORS = (MvixError, ValueError, KeyError)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


_OUTPUT_KEYS = ("out", "out_dir", "plot_out", "loss_out", "tag")


def _params_tag(command: str, params: dict) -> str:
    # output paths don't change what was computed, so they don't change the tag
    salient = {k: v for k, v in params.items() if k not in _OUTPUT_KEYS}
    canon = json.dumps({"command": command, "params": salient}, sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def write_manifest(artifact, command: str, params: dict, inputs: list, started: float) -> str:
    """Emit <artifact>.manifest.json and return the parameter digest tag."""
    tag = _params_tag(command, params)
    manifest = {
        "tool": "mvix",
        "version": __version__,
        "command": command,
        "params": params,
        "seed": params.get("seed"),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "artifact": Path(artifact).name,
        "run_tag": f"mvix-{tag}",
        "timing": {
            "started": datetime.now(timezone.utc).isoformat(),
            "wall_seconds": round(time.perf_counter() - started, 6),
        },
    }
    Path(str(artifact) + ".manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return f"mvix-{tag}"


def _strategy_from_args(args) -> AlignmentStrategy:
    kind = args.strategy.replace("-", "_")
    if kind == "top_k":
        return AlignmentStrategy.top_k(args.k)
    if kind == "top_p":
        return AlignmentStrategy.top_p(args.p)
    if kind == "first_k":
        return AlignmentStrategy.first_k(args.k)
    if kind == "single_vector":
        return AlignmentStrategy.single_vector()
    if kind == "exact_match":
        return AlignmentStrategy.exact_match()
    if kind == "differentiable":
        eps = getattr(args, "strategy_epsilon", None)
        if eps is None:
            eps = args.epsilon
        return AlignmentStrategy.differentiable(args.k, eps)
    raise ConfigError(f"unknown strategy {args.strategy!r}")


def _load_heads(args):
    query_head = load_head(args.query_head) if getattr(args, "query_head", None) else None
    doc_head = load_head(args.doc_head) if getattr(args, "doc_head", None) else None
    if query_head is None and doc_head is None:
        return None
    return (query_head, doc_head)


def _thread_count() -> int:
    raw = os.environ.get("MVIX_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    started = time.perf_counter()
    spec = PlantSpec(
        num_queries=args.num_queries,
        query_tokens=args.query_tokens,
        evidence_per_token=args.evidence_per_token,
        noise=args.noise,
        traps_per_query=args.traps_per_query,
        trap_tokens=args.trap_tokens,
        trap_noise=args.trap_noise,
        signal_coef=args.signal_coef,
    )
    docs, queries, qrels = synth_corpus(
        args.seed, args.num_docs, args.tokens_per_doc, args.dim, spec
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_store(docs, out / "docs.mvix")
    write_store(queries, out / "queries.mvix")
    write_qrels(qrels, out / "qrels.txt")
    params = {k: getattr(args, k) for k in vars(args) if k not in ("func", "command")}
    write_manifest(out / "docs.mvix", "synth", params, [], started)
    print(
        f"wrote {len(docs)} docs x {args.tokens_per_doc} tokens (dim {args.dim}), "
        f"{len(queries)} queries, {sum(len(v) for v in qrels.values())} qrels to {out}"
    )
    return 0


def cmd_index(args) -> int:
    started = time.perf_counter()
    records = read_store(args.store)
    head = load_head(args.heads) if args.heads else None
    if args.beta_d < 1.0 and head is None:
        if not all(r.embeddings.salience is not None for r in records):
            raise ConfigError("--beta-d below 1 requires --heads (a document salience head)")
    index = build_index(
        records,
        head=head,
        beta_d=args.beta_d,
        kind=args.kind,
        nlist=args.nlist,
        seed=args.seed,
    )
    write_index(index, args.out)
    params = {k: getattr(args, k) for k in vars(args) if k not in ("func", "command")}
    write_manifest(args.out, "index", params, [args.store], started)

    total_tokens = sum(r.embeddings.num_tokens for r in records)
    kept = index.entry_count
    per_doc = kept / max(len(records), 1)
    print(
        f"indexed {kept} of {total_tokens} tokens from {len(records)} docs "
        f"({per_doc:.2f} tokens/doc at beta_d={args.beta_d})"
    )
    if index.kind == "ivf":
        index.build_postings()
        nonempty = sum(1 for p in index.postings if p.size)
        print(f"ivf: {index.nlist} cells, {nonempty} non-empty")
    return 0


def _search_one(index, records, query, heads, config) -> RankedList:
    candidates = gather_candidates(index, _kept_query_vectors(query, heads, config), config)
    return rescore_candidates(index, records, query, candidates, heads, config)


def _kept_query_vectors(query, heads, config):
    from .engine import _prepare_query  # shared slicing logic

    query_head = heads[0] if heads else None
    _, q_vectors, _, _ = _prepare_query(query, query_head, config)
    return q_vectors


def cmd_search(args) -> int:
    started = time.perf_counter()
    index = read_index(args.index)
    records = read_store(args.store)
    queries = read_store(args.queries)
    heads = _load_heads(args)
    strategy = _strategy_from_args(args)
    config = RetrievalConfig(
        strategy=strategy,
        neighbors_per_token=args.neighbors,
        final_top_n=args.top_n,
        beta_q=args.beta_q,
        nprobe=args.nprobe,
        normalize=not args.no_normalize,
        refine_full_store=args.refine_full_store,
    )

    if strategy.kind == "top_p":
        lengths = sorted({r.embeddings.num_tokens for r in records})
        shown = ", ".join(
            f"m={m} -> k_eff={effective_topp_budget(strategy.p, m)}" for m in lengths[:10]
        )
        print(f"top-p budgets (max(floor(p*m), 1)): {shown}")

    threads = _thread_count()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            ranked = list(
                pool.map(lambda q: _search_one(index, records, q, heads, config), queries)
            )
    else:
        ranked = [_search_one(index, records, q, heads, config) for q in queries]

    params = {k: getattr(args, k) for k in vars(args) if k not in ("func", "command")}
    tag = write_manifest(args.out, "search", params, [args.index, args.store, args.queries], started)
    write_run(args.out, ranked, tag=args.tag or tag)
    hits = sum(len(r.hits) for r in ranked)
    print(f"wrote {hits} hits for {len(ranked)} queries to {args.out}")
    return 0


def cmd_eval(args) -> int:
    started = time.perf_counter()
    ranked = read_run(args.run)
    qrels = read_qrels(args.qrels)
    if not ranked:
        print("warning: empty run file", file=sys.stderr)
        print(f"{args.metric} over 0 queries: 0.0000")
        return 0
    mean, per_query = evaluate_run(ranked, qrels, args.metric)
    print(f"{args.metric} over {len(per_query)} queries: {mean:.4f}")
    if args.plot_out:
        params = {k: getattr(args, k) for k in vars(args) if k not in ("func", "command")}
        tag = write_manifest(args.plot_out, "eval", params, [args.run, args.qrels], started)
        rows = [f"# manifest={tag}", "query_id\tvalue"]
        rows += [f"{qid}\t{value:.6f}" for qid, value in per_query.items()]
        Path(args.plot_out).write_text("\n".join(rows) + "\n")
    return 0


def cmd_adapt(args) -> int:
    started = time.perf_counter()
    index = read_index(args.index)
    records = read_store(args.store)
    queries = read_store(args.queries)
    qrels = read_qrels(args.qrels)
    heads = _load_heads(args)
    base = RetrievalConfig(
        neighbors_per_token=args.neighbors,
        final_top_n=args.top_n,
        beta_q=args.beta_q,
        nprobe=args.nprobe,
    )

    annotated = [(q, qrels[q.doc_id]) for q in queries if q.doc_id in qrels]
    grid = [AlignmentStrategy.top_k(k) for k in _int_list(args.grid_k)]
    grid += [AlignmentStrategy.top_p(p) for p in _float_list(args.grid_p)]

    # candidate sets are strategy-independent; trace them once per query
    cand_cache: dict[str, np.ndarray] = {}

    def retrieve_fn(strategy: AlignmentStrategy, query: DocumentRecord) -> RankedList:
        if query.doc_id not in cand_cache:
            cand_cache[query.doc_id] = gather_candidates(
                index, _kept_query_vectors(query, heads, base), base
            )
        from dataclasses import replace

        config = replace(base, strategy=strategy)
        return rescore_candidates(index, records, query, cand_cache[query.doc_id], heads, config)

    report = adapt_alignment(annotated, grid, retrieve_fn, fold_size=args.fold_size, seed=args.seed)
    params = {k: getattr(args, k) for k in vars(args) if k not in ("func", "command")}
    tag = write_manifest(args.out, "adapt", params, [args.index, args.store, args.queries, args.qrels], started)
    doc = report.to_json_dict()
    doc["manifest"] = tag
    Path(args.out).write_text(json.dumps(doc, indent=2) + "\n")
    print(
        f"adaptation over {len(report.folds)} folds of {args.fold_size}: "
        f"nDCG@10 {report.mean:.4f} ± {report.std:.4f}"
    )
    for i, fold in enumerate(report.folds):
        print(f"  fold {i}: chose {fold.chosen.label()} (held-out {fold.heldout_ndcg10:.4f})")
    if args.plot_out:
        rows = [f"# manifest={tag}", "fold\tchosen_strategy\theldout_ndcg10"]
        rows += [
            f"{i}\t{f.chosen.label()}\t{f.heldout_ndcg10:.6f}"
            for i, f in enumerate(report.folds)
        ]
        Path(args.plot_out).write_text("\n".join(rows) + "\n")
    return 0


def cmd_explain(args) -> int:
    records = read_store(args.store)
    queries = read_store(args.queries)
    query = _find(queries, args.query_id, "query")
    doc = _find(records, args.doc_id, "document")
    heads = _load_heads(args)
    vocab = json.loads(Path(args.vocab).read_text()) if args.vocab else {}

    def label(token_id: int) -> str:
        return vocab.get(str(token_id), f"#{token_id}")

    def salience_of(emb, head):
        if head is not None:
            return raw_salience(emb, head)
        if emb.salience is not None:
            return np.asarray(emb.salience, dtype=np.float64)
        return np.ones(emb.num_tokens)  # uniform fallback: order by position

    q_emb, d_emb = query.embeddings, doc.embeddings
    q_sal = salience_of(q_emb, heads[0] if heads else None)
    d_sal = salience_of(d_emb, heads[1] if heads else None)
    S = compute_similarity(q_emb.vectors, d_emb.vectors)

    n_show = ceil_budget(args.top_query_frac, q_emb.num_tokens)
    m_show = ceil_budget(args.top_doc_frac, d_emb.num_tokens)
    q_top = np.argsort(-q_sal, kind="stable")[:n_show]
    d_top = np.argsort(-d_sal, kind="stable")[:m_show]

    print(f"query {query.doc_id}: showing {n_show} of {q_emb.num_tokens} tokens by salience")
    for qi in sorted(q_top):
        dj = int(np.argmax(S[qi]))
        print(
            f"  q[{qi}] {label(int(q_emb.token_ids[qi]))} (salience {q_sal[qi]:.4f}) "
            f"-> d[{dj}] {label(int(d_emb.token_ids[dj]))} (sim {S[qi, dj]:.4f})"
        )
    print(f"doc {doc.doc_id}: top {m_show} of {d_emb.num_tokens} tokens by salience")
    for dj in sorted(d_top):
        print(f"  d[{dj}] {label(int(d_emb.token_ids[dj]))} (salience {d_sal[dj]:.4f})")
    return 0


def cmd_train(args) -> int:
    started = time.perf_counter()
    records = read_store(args.store)
    queries = read_store(args.queries)
    qrels = read_qrels(args.qrels)
    annotated = []
    for query in queries:
        for doc_id, rel in sorted(qrels.get(query.doc_id, {}).items()):
            if rel > 0:
                annotated.append((query, doc_id))
    config = TrainConfig(
        learning_rate=args.learning_rate,
        steps=args.steps,
        batch_queries=args.batch_queries,
        negatives_per_query=args.negatives,
        epsilon=args.epsilon,
        alpha_q=args.alpha_q,
        alpha_d=args.alpha_d,
        unroll_iters=args.unroll,
        seed=args.seed,
        temperature=args.temperature,
    )
    strategy = _strategy_from_args(args)
    query_head, doc_head, losses = train_salience(records, annotated, config, strategy)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_head(query_head, out / "query_head.json")
    save_head(doc_head, out / "doc_head.json")
    if args.loss_out:
        write_loss_trace(losses, args.loss_out)
    params = {k: getattr(args, k) for k in vars(args) if k not in ("func", "command")}
    write_manifest(out / "query_head.json", "train", params, [args.store, args.queries, args.qrels], started)
    last = f"{losses[-1]:.4f}" if len(losses) else "n/a"
    print(f"trained {config.steps} steps on {len(annotated)} pairs; final loss {last}")
    return 0


def _find(records, wanted_id: str, what: str) -> DocumentRecord:
    for rec in records:
        if rec.doc_id == wanted_id:
            return rec
    raise ConfigError(f"{what} id {wanted_id!r} not found")


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvix", description="multi-vector retrieval with sparse token alignment"
    )
    parser.add_argument("--version", action="version", version=f"mvix {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus with planted relevance")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-docs", type=int, default=1000)
    p.add_argument("--tokens-per-doc", type=int, default=64)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--num-queries", type=int, default=16)
    p.add_argument("--query-tokens", type=int, default=4)
    p.add_argument("--evidence-per-token", type=int, default=1)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--traps-per-query", type=int, default=0)
    p.add_argument("--trap-tokens", type=int, default=2)
    p.add_argument("--trap-noise", type=float, default=0.02)
    p.add_argument("--signal-coef", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("index", help="build and persist a token index")
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beta-d", type=float, default=1.0)
    p.add_argument("--kind", choices=("flat", "ivf"), default="flat")
    p.add_argument("--nlist", type=int, default=64)
    p.add_argument("--heads", help="document salience head JSON (needed when --beta-d < 1)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("search", help="retrieve and write a TREC run file")
    p.add_argument("--index", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--queries", required=True)
    _add_strategy_flags(p)
    p.add_argument("--neighbors", type=int, default=4000)
    p.add_argument("--top-n", type=int, default=1000)
    p.add_argument("--beta-q", type=float, default=1.0)
    p.add_argument("--nprobe", type=int, default=1)
    p.add_argument("--query-head")
    p.add_argument("--doc-head")
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--refine-full-store", action="store_true")
    p.add_argument("--tag", default=None, help="run tag (defaults to the manifest digest)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="score a run file against qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--metric", default="ndcg@10")
    p.add_argument("--plot-out", help="per-query TSV output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("adapt", help="few-shot alignment strategy selection")
    p.add_argument("--index", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--grid-k", default="1,2,4,6,8")
    p.add_argument("--grid-p", default="0.005,0.01,0.015,0.02")
    p.add_argument("--fold-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--neighbors", type=int, default=4000)
    p.add_argument("--top-n", type=int, default=1000)
    p.add_argument("--beta-q", type=float, default=1.0)
    p.add_argument("--nprobe", type=int, default=1)
    p.add_argument("--query-head")
    p.add_argument("--doc-head")
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--plot-out", help="per-fold TSV output")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("explain", help="show salient tokens and their alignments")
    p.add_argument("--store", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--query-id", required=True)
    p.add_argument("--doc-id", required=True)
    p.add_argument("--top-query-frac", type=float, default=0.5)
    p.add_argument("--top-doc-frac", type=float, default=0.2)
    p.add_argument("--query-head")
    p.add_argument("--doc-head")
    p.add_argument("--vocab", help="JSON mapping token id -> label")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("train", help="train the salience heads on annotated pairs")
    p.add_argument("--store", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--learning-rate", type=float, default=1e-2)
    p.add_argument("--batch-queries", type=int, default=8)
    p.add_argument("--negatives", type=int, default=4)
    p.add_argument("--epsilon", type=float, default=0.002)
    p.add_argument("--alpha-q", type=float, default=0.5)
    p.add_argument("--alpha-d", type=float, default=0.4)
    p.add_argument("--unroll", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=0.05)
    _add_strategy_flags(p, epsilon_flag="--strategy-epsilon")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--loss-out")
    p.set_defaults(func=cmd_train)

    return parser


def _add_strategy_flags(p: argparse.ArgumentParser, epsilon_flag: str = "--epsilon") -> None:
    p.add_argument(
        "--strategy",
        default="top-k",
        choices=("top-k", "top-p", "exact-match", "single-vector", "first-k", "differentiable"),
    )
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--p", type=float, default=0.01)
    p.add_argument(epsilon_flag, type=float, default=0.002, help="temperature of the relaxed strategy")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _CORRUPT_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return CORRUPT_EXIT
    except _USAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_EXIT
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return IO_EXIT


if __name__ == "__main__":
    sys.exit(main())
