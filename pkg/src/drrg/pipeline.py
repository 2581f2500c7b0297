"""Stage runner and ablation harness.

Layout under ``config.workdir``::

    corpus/      train.jsonl test.jsonl                  (gen-corpus)
    classifier/  classifier.drrg                         (train-classifier)
    doms/        train.domp test.domp                    (build-doms)
    runs/<run_name>/
        index.json                                       (build-index)
        vocab.json model.drrg checkpoints/               (train-generator)
        predictions.jsonl predictions.txt gold.txt       (generate)
        eval.json table.md                               (evaluate)

Every stage writes ``<stage>.manifest.json`` next to its outputs holding the
full config and a sha256 of each file it produced. The binary formats have no
room for metadata, so the manifest is where the config travels.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from drrg.cam import ClassifierModel, TrainConfig, build_dom_pool, load_pool, train_classifier
from drrg.config import PipelineConfig
from drrg.corpus import CorpusConfig, Labeler, generate_corpus, load_corpus, load_grammar, save_corpus
from drrg.corpus.vocab import Vocabulary, build_vocab
from drrg.errors import ArtifactIOError, ContractError
from drrg.generator.decode import generate as greedy_generate
from drrg.generator.model import GeneratorConfig, GeneratorModel
from drrg.generator.train import GenerationContext, GenTrainConfig, train_generator
from drrg.metrics import ClinicalScores, EvalReport, evaluate as evaluate_reports, format_table
from drrg.numerics import load_tensors, save_tensors
from drrg.prior import PriorKnowledge, extract_prior
from drrg.retrieval import RetrievalIndex, disease_match_rate, downsample, pixel_index

log = logging.getLogger(__name__)

STAGES = ("gen-corpus", "train-classifier", "build-doms", "build-index", "train-generator", "generate", "evaluate")

# config fields each shared stage depends on; run-level stages depend on all of them
_CORPUS_KEYS = ("seed", "n_train", "n_test", "image_size", "n_classes", "prevalence", "grammar")
_CLASSIFIER_KEYS = _CORPUS_KEYS + ("cls_epochs", "cls_batch_size", "cls_lr", "cls_channels")
STAGE_KEYS = {
    "gen-corpus": _CORPUS_KEYS,
    "train-classifier": _CLASSIFIER_KEYS,
    "build-doms": _CLASSIFIER_KEYS,
}
_RUN_SPECIFIC = {"run_name", "workdir", "notes"}


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _relevant(config: PipelineConfig, stage: str) -> dict:
    data = json.loads(config.to_json())
    keys = STAGE_KEYS.get(stage)
    if keys is None:
        return {k: v for k, v in data.items() if k not in _RUN_SPECIFIC}
    return {k: data[k] for k in keys}


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc


def _read_text(path: Path, stage: str) -> str:
    if not path.exists():
        raise ContractError(f"missing {path}: run stage `{stage}` first")
    try:
        return path.read_text()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc


class Artifacts:
    def __init__(self, config: PipelineConfig):
        self.config = config
        self.root = Path(config.workdir)
        self.run = self.root / "runs" / config.run_name

    def dir(self, stage: str) -> Path:
        return {
            "gen-corpus": self.root / "corpus",
            "train-classifier": self.root / "classifier",
            "build-doms": self.root / "doms",
        }.get(stage, self.run)

    def manifest_path(self, stage: str) -> Path:
        return self.dir(stage) / f"{stage}.manifest.json"

    def path(self, stage: str, name: str) -> Path:
        return self.dir(stage) / name

    def write_manifest(self, stage: str, files: list[Path], extra: dict | None = None) -> None:
        body = {
            "stage": stage,
            "config": self.config.to_dict(),
            "files": {p.name: _digest(p) for p in files},
        }
        if extra:
            body.update(extra)
        _write_text(self.manifest_path(stage), json.dumps(body, indent=2, sort_keys=True) + "\n")

    def read_manifest(self, stage: str) -> dict:
        return json.loads(_read_text(self.manifest_path(stage), stage))

    def require(self, stage: str) -> dict:
        """Manifest of an upstream stage, checked against the current config."""
        manifest = self.read_manifest(stage)
        theirs = PipelineConfig.from_dict(manifest["config"])
        if _relevant(theirs, stage) != _relevant(self.config, stage):
            raise ContractError(f"artifacts of `{stage}` in {self.dir(stage)} were built with a different config; "
                                f"rerun stage `{stage}` first")
        for name, digest in manifest["files"].items():
            p = self.path(stage, name)
            if not p.exists() or _digest(p) != digest:
                raise ContractError(f"{p} is missing or modified: rerun stage `{stage}` first")
        return manifest

    def is_current(self, stage: str) -> bool:
        try:
            self.require(stage)
        except (ContractError, ArtifactIOError, KeyError, json.JSONDecodeError):
            return False
        return True


# ------------------------------------------------------------------ stages


def corpus_config(cfg: PipelineConfig) -> CorpusConfig:
    return CorpusConfig(image_size=cfg.image_size, n_classes=cfg.n_classes, prevalence=cfg.prevalence,
                        grammar=cfg.grammar)


def labeler_for(cfg: PipelineConfig) -> Labeler:
    return Labeler(load_grammar(cfg.grammar, k=cfg.n_classes))


def stage_gen_corpus(art: Artifacts) -> dict:
    cfg = art.config
    corpus = generate_corpus(cfg.seed, cfg.n_train + cfg.n_test, corpus_config(cfg))
    train, test = art.path("gen-corpus", "train.jsonl"), art.path("gen-corpus", "test.jsonl")
    train.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(train, corpus[: cfg.n_train])
    save_corpus(test, corpus[cfg.n_train :])
    art.write_manifest("gen-corpus", [train, test])
    return {"train": cfg.n_train, "test": cfg.n_test}


def load_split(art: Artifacts, split: str):
    art.require("gen-corpus")
    return load_corpus(art.path("gen-corpus", f"{split}.jsonl"))


def stage_train_classifier(art: Artifacts) -> dict:
    cfg = art.config
    train = load_split(art, "train")
    tc = TrainConfig(epochs=cfg.cls_epochs, batch_size=cfg.cls_batch_size, lr=cfg.cls_lr, seed=cfg.seed,
                     channels=tuple(cfg.cls_channels))
    model = train_classifier(train, tc)
    out = art.path("train-classifier", "classifier.drrg")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_tensors(out, model.state_dict())
    art.write_manifest("train-classifier", [out], {"curve": model.curve})
    return {"final_loss": model.curve[-1] if model.curve else None}


def load_classifier(art: Artifacts) -> ClassifierModel:
    art.require("train-classifier")
    return ClassifierModel.from_state(load_tensors(art.path("train-classifier", "classifier.drrg")))


def stage_build_doms(art: Artifacts) -> dict:
    model = load_classifier(art)
    files = []
    art.dir("build-doms").mkdir(parents=True, exist_ok=True)
    for split in ("train", "test"):
        path = art.path("build-doms", f"{split}.domp")
        build_dom_pool(model, load_split(art, split), path)
        files.append(path)
    art.write_manifest("build-doms", files)
    return {"pools": [p.name for p in files]}


def load_pools(art: Artifacts) -> dict[str, list]:
    art.require("build-doms")
    return {split: load_pool(art.path("build-doms", f"{split}.domp")) for split in ("train", "test")}


def _queries(cfg: PipelineConfig, pools, corpus, split: str, mode: str):
    if mode == "dom":
        return [(sid, np.asarray(arr, dtype=np.float64).ravel()) for sid, arr in pools[split]]
    return [(s.id, downsample(s.image, cfg.pixel_size).ravel()) for s in corpus[split]]


def stage_build_index(art: Artifacts) -> dict:
    """Top-k reference ids for every train and test sample, plus match statistics."""
    cfg = art.config
    pools = load_pools(art)
    corpus = {"train": load_split(art, "train"), "test": load_split(art, "test")}
    labels = {s.id: s.labels for split in corpus.values() for s in split}
    indices = {"dom": RetrievalIndex.from_pool(pools["train"]), "pixel": pixel_index(corpus["train"], cfg.pixel_size)}
    stats = {}
    for mode, index in indices.items():
        m = disease_match_rate(index, _queries(cfg, pools, corpus, "test", mode), labels)
        stats[mode] = {"jaccard": m.jaccard, "random_baseline": m.random_baseline, "n": m.n}
    results = {}
    for split in ("train", "test"):
        if cfg.retrieval == "none":
            results[split] = {s.id: [] for s in corpus[split]}
            continue
        index = indices[cfg.retrieval]
        results[split] = {
            qid: [[sid, score] for sid, score in index.query(vec, cfg.k_retrieval, exclude_id=qid).hits]
            for qid, vec in _queries(cfg, pools, corpus, split, cfg.retrieval)
        }
    body = {"mode": cfg.retrieval, "k": cfg.k_retrieval, "match": stats, "results": results}
    out = art.path("build-index", "index.json")
    _write_text(out, json.dumps(body, indent=1, sort_keys=True) + "\n")
    art.write_manifest("build-index", [out], {"match": stats})
    return {"match": stats}


def load_index(art: Artifacts) -> dict:
    art.require("build-index")
    return json.loads(art.path("build-index", "index.json").read_text())


def prior_for(art: Artifacts, query_id: str, index: dict, reports: dict, vocab: Vocabulary) -> PriorKnowledge:
    hits = index["results"]["train"].get(query_id)
    if hits is None:
        hits = index["results"]["test"].get(query_id)
    if hits is None:
        raise ContractError(f"sample id {query_id!r} is not in the retrieval index")
    return extract_prior([(sid, reports[sid]) for sid, _ in hits], vocab, labeler_for(art.config),
                         art.config.knowledge_cap)


def contexts_for(art: Artifacts, samples, index: dict, reports: dict, vocab: Vocabulary) -> list[GenerationContext]:
    return [GenerationContext(s.id, s.image, prior_for(art, s.id, index, reports, vocab), art.config.output_cap)
            for s in samples]


def generator_config(cfg: PipelineConfig, vocab_size: int) -> GeneratorConfig:
    return GeneratorConfig(vocab_size=vocab_size, image_size=cfg.image_size, patch=cfg.patch, d_model=cfg.d_model,
                           n_heads=cfg.n_heads, n_layers=cfg.n_layers, ff_mult=cfg.ff_mult, attn_dim=cfg.attn_dim,
                           max_output=cfg.output_cap, max_knowledge=cfg.knowledge_cap, use_copy=cfg.use_copy,
                           seed=cfg.seed)


def stage_train_generator(art: Artifacts) -> dict:
    cfg = art.config
    train = load_split(art, "train")
    index = load_index(art)
    vocab = build_vocab(train)
    reports = {s.id: s.report for s in train}
    contexts = contexts_for(art, train, index, reports, vocab)
    model = GeneratorModel(generator_config(cfg, len(vocab)))
    ckpt_dir = art.run / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    tc = GenTrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, betas=tuple(cfg.adam_betas),
                        eps=cfg.adam_eps, seed=cfg.seed, keep_checkpoints=cfg.keep_checkpoints)
    curve = train_generator(model, contexts, [s.report for s in train], vocab, tc, ckpt_dir)
    vpath, mpath = art.path("train-generator", "vocab.json"), art.path("train-generator", "model.drrg")
    _write_text(vpath, vocab.to_json() + "\n")
    save_tensors(mpath, model.state_dict())
    art.write_manifest("train-generator", [vpath, mpath],
                       {"epoch_loss": curve.epoch_loss, "empty_priors": sum(c.prior.empty for c in contexts)})
    return {"epoch_loss": curve.epoch_loss}


def load_generator(art: Artifacts, model_path=None) -> tuple[GeneratorModel, Vocabulary]:
    art.require("train-generator")
    vocab = Vocabulary.from_json(art.path("train-generator", "vocab.json").read_text())
    model = GeneratorModel(generator_config(art.config, len(vocab)))
    path = Path(model_path) if model_path else art.path("train-generator", "model.drrg")
    if not path.exists():
        raise ContractError(f"missing {path}: run stage `train-generator` first")
    model.load_state_dict(load_tensors(path))
    return model, vocab


def stage_generate(art: Artifacts) -> dict:
    model, vocab = load_generator(art)
    test = load_split(art, "test")
    reports = {s.id: s.report for s in load_split(art, "train")}
    contexts = contexts_for(art, test, load_index(art), reports, vocab)
    gens = greedy_generate(model, contexts, vocab)
    records = [
        json.dumps({"id": g.sample_id, "text": g.text, "prior_empty": c.prior.empty, "prior": c.prior.texts()},
                   sort_keys=True)
        for g, c in zip(gens, contexts)
    ]
    files = [art.path("generate", "predictions.jsonl"), art.path("generate", "predictions.txt"),
             art.path("generate", "gold.txt")]
    _write_text(files[0], "\n".join(records) + "\n")
    _write_text(files[1], "\n".join(g.text for g in gens) + "\n")
    _write_text(files[2], "\n".join(s.report for s in test) + "\n")
    empty = sum(c.prior.empty for c in contexts)
    art.write_manifest("generate", files, {"empty_priors": empty})
    return {"n": len(gens), "empty_priors": empty}


def read_lines(path: Path, stage: str) -> list[str]:
    return _read_text(path, stage).rstrip("\n").split("\n")


def evaluate_files(pred: Path, gold: Path, labeler: Labeler) -> EvalReport:
    cands, refs = read_lines(pred, "generate"), read_lines(gold, "generate")
    return evaluate_reports(cands, refs, labeler)


def stage_evaluate(art: Artifacts) -> dict:
    art.require("generate")
    report = evaluate_files(art.path("generate", "predictions.txt"), art.path("generate", "gold.txt"),
                            labeler_for(art.config))
    out, table = art.path("evaluate", "eval.json"), art.path("evaluate", "table.md")
    _write_text(out, report.to_json() + "\n")
    _write_text(table, format_table([(art.config.run_name, report)]))
    art.write_manifest("evaluate", [out, table])
    return report.to_dict()


RUNNERS = {
    "gen-corpus": stage_gen_corpus,
    "train-classifier": stage_train_classifier,
    "build-doms": stage_build_doms,
    "build-index": stage_build_index,
    "train-generator": stage_train_generator,
    "generate": stage_generate,
    "evaluate": stage_evaluate,
}


def run_stage(stage: str, config: PipelineConfig) -> dict:
    if stage not in RUNNERS:
        raise ContractError(f"unknown stage {stage!r}; stages are {', '.join(STAGES)}")
    log.info("stage %s (%s)", stage, config.run_name)
    return RUNNERS[stage](Artifacts(config))


def run_pipeline(config: PipelineConfig, stages=STAGES, reuse: bool = True) -> EvalReport | None:
    """Run ``stages`` in order.

    With ``reuse``, a stage whose manifest matches the config and whose files
    are intact is skipped, until some stage actually reruns; everything after
    that reruns too.
    """
    art = Artifacts(config)
    dirty = False
    for stage in stages:
        if reuse and not dirty and art.is_current(stage):
            log.info("stage %s is up to date", stage)
            continue
        run_stage(stage, config)
        dirty = True
    if "evaluate" in stages:
        return load_eval(art)
    return None


def load_eval(art: Artifacts) -> EvalReport:
    data = json.loads(_read_text(art.path("evaluate", "eval.json"), "evaluate"))
    data["clinical"] = ClinicalScores(**data["clinical"])
    return EvalReport(**data)


# --------------------------------------------------------------- ablations

VARIANTS = {
    "full": {},
    "general-retrieval": {"retrieval": "pixel"},
    "no-retrieval": {"retrieval": "none"},
    "no-copy": {"use_copy": False},
}


@dataclass
class AblationResult:
    variant: str
    report: EvalReport
    empty_priors: int
    n: int


def variant_config(variant: str, config: PipelineConfig) -> PipelineConfig:
    if variant in VARIANTS:
        return config.replace(run_name=variant, **VARIANTS[variant])
    if variant.startswith("k=") and variant[2:].isdigit():
        k = int(variant[2:])
        if k == config.k_retrieval:
            return config.replace(run_name="full")
        return config.replace(run_name=f"k{k}", k_retrieval=k)
    raise ContractError(f"unknown variant {variant!r}; variants are {', '.join(VARIANTS)}, k=<n>")


def run_ablation(variant: str, config: PipelineConfig) -> AblationResult:
    cfg = variant_config(variant, config)
    report = run_pipeline(cfg)
    manifest = Artifacts(cfg).read_manifest("generate")
    return AblationResult(variant, report, manifest["empty_priors"], config.n_test)


def run_sweep(config: PipelineConfig, ks=(1, 2, 3, 4, 5)) -> tuple[list[AblationResult], str]:
    """Reference-count sweep; returns the results and a table with one row per k."""
    results = [run_ablation(f"k={k}", config) for k in ks]
    table = format_table([(f"k={k}", r.report) for k, r in zip(ks, results)], label="Number")
    return results, table
