"""Command-line entry point: ``drrg <command> --config <file> [...]``.

Exit codes: 0 success, 2 contract error (bad input or missing upstream
artifact), 3 environment error (I/O), 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from drrg import pipeline
from drrg.cam import load_pool
from drrg.config import PipelineConfig, load_config
from drrg.corpus.vocab import Vocabulary, build_vocab
from drrg.errors import ArtifactIOError, ContractError, DrrgError
from drrg.generator.decode import generate
from drrg.metrics import format_table
from drrg.retrieval import RetrievalIndex


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable))


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer, np.floating, np.bool_)):
        return o.item()
    if hasattr(o, "__dataclass_fields__"):
        return {k: getattr(o, k) for k in o.__dataclass_fields__}
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "run_name", None):
        cfg = cfg.replace(run_name=args.run_name)
    return cfg


def cmd_stage(args) -> None:
    _emit({"stage": args.command, "result": pipeline.run_stage(args.command, _config(args))})


def cmd_run(args) -> None:
    report = pipeline.run_pipeline(_config(args), reuse=not args.force)
    _emit(report.to_dict())


def cmd_retrieve(args) -> None:
    entries = load_pool(args.index)
    index = RetrievalIndex.from_pool(entries)
    ids = [sid for sid, _ in entries]
    if args.query_id not in ids:
        raise ContractError(f"query id {args.query_id!r} is not in {args.index}")
    res = index.query(index.vector(args.query_id), args.k, exclude_id=args.query_id, query_id=args.query_id)
    _emit({"query_id": res.query_id, "results": [{"id": sid, "score": score} for sid, score in res.hits]})


def cmd_show_prior(args) -> None:
    art = pipeline.Artifacts(_config(args))
    train = pipeline.load_split(art, "train")
    vpath = art.path("train-generator", "vocab.json")
    vocab = Vocabulary.from_json(vpath.read_text()) if vpath.exists() else build_vocab(train)
    index = pipeline.load_index(art)
    prior = pipeline.prior_for(art, args.query_id, index, {s.id: s.report for s in train}, vocab)
    _emit({
        "query_id": args.query_id,
        "empty": prior.empty,
        "sentences": [{"text": s.text, "source": s.source_id, "labels": s.labels.astype(int)} for s in prior.sentences],
        "tokens": prior.tokens,
        "decoded": [vocab.tokens[t] for t in prior.tokens],
    })


def cmd_generate(args) -> None:
    cfg = _config(args)
    art = pipeline.Artifacts(cfg)
    if args.sample_id is None and args.model is None:
        _emit({"stage": "generate", "result": pipeline.run_stage("generate", cfg)})
        return
    model, vocab = pipeline.load_generator(art, args.model)
    samples = pipeline.load_split(art, "test") + pipeline.load_split(art, "train")
    if args.sample_id is not None:
        samples = [s for s in samples if s.id == args.sample_id]
        if not samples:
            raise ContractError(f"unknown sample id {args.sample_id!r}")
    else:
        samples = pipeline.load_split(art, "test")
    reports = {s.id: s.report for s in pipeline.load_split(art, "train")}
    contexts = pipeline.contexts_for(art, samples, pipeline.load_index(art), reports, vocab)
    out = []
    for g, c in zip(generate(model, contexts, vocab, trace=args.trace), contexts):
        item = {"id": g.sample_id, "text": g.text, "prior_empty": c.prior.empty}
        if args.trace:
            item["trace"] = [
                {"step": t.step, "token": vocab.tokens[t.token], "gen_argmax": vocab.tokens[t.gen_argmax],
                 "copy_argmax": None if t.copy_argmax is None else vocab.tokens[t.copy_argmax],
                 "copy_mass": t.copy_mass}
                for t in g.trace
            ]
        out.append(item)
    _emit(out if len(out) != 1 else out[0])


def cmd_evaluate(args) -> None:
    cfg = _config(args)
    if args.pred is None and args.gold is None:
        _emit(pipeline.run_stage("evaluate", cfg))
        return
    if args.pred is None or args.gold is None:
        raise ContractError("--pred and --gold must be given together")
    report = pipeline.evaluate_files(Path(args.pred), Path(args.gold), pipeline.labeler_for(cfg))
    if args.table:
        Path(args.table).write_text(format_table([(Path(args.pred).stem, report)]))
    _emit(report.to_dict())


def cmd_ablation(args) -> None:
    res = pipeline.run_ablation(args.variant, _config(args))
    _emit({"variant": res.variant, "empty_priors": res.empty_priors, "n": res.n, "report": res.report.to_dict()})


def cmd_sweep(args) -> None:
    cfg = _config(args)
    results, table = pipeline.run_sweep(cfg)
    path = pipeline.Artifacts(cfg).root / "sweep.md"
    path.write_text(table)
    print(table, end="")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drrg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="pipeline config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--run-name", default=None, help="override the run directory name")
        p.set_defaults(func=func)
        return p

    for stage in ("gen-corpus", "train-classifier", "build-doms", "build-index", "train-generator"):
        add(stage, cmd_stage, f"run the {stage} stage")
    p = add("generate", cmd_generate, "generate reports for the test split, or one sample")
    p.add_argument("--model", default=None, help="checkpoint to load instead of the run's model")
    p.add_argument("--sample-id", default=None)
    p.add_argument("--trace", action="store_true", help="per-step y_gen/y_copy argmax and copy mass")
    p = add("evaluate", cmd_evaluate, "score predictions against gold reports")
    p.add_argument("--pred", default=None, help="line-aligned predicted reports")
    p.add_argument("--gold", default=None, help="line-aligned gold reports")
    p.add_argument("--table", default=None, help="also write a markdown table here")
    p = add("run", cmd_run, "run every stage, reusing current artifacts")
    p.add_argument("--force", action="store_true", help="rerun stages even when up to date")
    p = add("retrieve", cmd_retrieve, "top-k neighbours of one pool entry")
    p.add_argument("--index", required=True, help="DOM pool file")
    p.add_argument("--query-id", required=True)
    p.add_argument("--k", type=int, default=3)
    p = add("show-prior", cmd_show_prior, "print the prior knowledge assembled for one sample")
    p.add_argument("--query-id", required=True)
    p = add("ablation", cmd_ablation, "run one ablation variant")
    p.add_argument("--variant", required=True, help=f"one of {', '.join(pipeline.VARIANTS)} or k=<n>")
    add("sweep", cmd_sweep, "reference-count sweep k=1..5")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ArtifactIOError, OSError) as exc:
        print(f"environment error: {exc}", file=sys.stderr)
        return 3
    except DrrgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
