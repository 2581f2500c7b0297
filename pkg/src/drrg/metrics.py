"""Language and clinical-efficacy metrics for generated reports.

Every metric tokenises with :func:`drrg.text.tokenize`, so punctuation marks
count as tokens. One reference per candidate throughout.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from drrg.errors import ContractError
from drrg.numerics._kernels import lcs_length
from drrg.text import tokenize


def _prepare(candidates, references) -> tuple[list[list[str]], list[list[str]]]:
    if len(candidates) != len(references):
        raise ContractError(f"{len(candidates)} candidates for {len(references)} references")
    if not candidates:
        raise ContractError("metric over an empty corpus")
    tok = lambda s: s if isinstance(s, list) else tokenize(s)  # noqa: E731
    return [tok(c) for c in candidates], [tok(r) for r in references]


def ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# -------------------------------------------------------------------- BLEU


def bleu(candidates, references, n: int = 4) -> float:
    """Corpus BLEU-n: uniform weights, shared brevity penalty, no smoothing."""
    cands, refs = _prepare(candidates, references)
    if n < 1:
        raise ContractError("BLEU order must be >= 1")
    log_p = 0.0
    for order in range(1, n + 1):
        match = total = 0
        for c, r in zip(cands, refs):
            cg, rg = ngrams(c, order), ngrams(r, order)
            match += sum(min(cnt, rg[g]) for g, cnt in cg.items())
            total += sum(cg.values())
        if match == 0:
            return 0.0
        log_p += math.log(match / total) / n
    c_len = sum(len(c) for c in cands)
    r_len = sum(len(r) for r in refs)
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_p)


# ----------------------------------------------------------------- ROUGE-L


def _encode_pair(a: list[str], b: list[str]) -> tuple[np.ndarray, np.ndarray]:
    ids: dict[str, int] = {}
    ea = np.array([ids.setdefault(t, len(ids)) for t in a], dtype=np.int64)
    eb = np.array([ids.setdefault(t, len(ids)) for t in b], dtype=np.int64)
    return ea, eb


def rouge_l_pair(cand: list[str], ref: list[str], beta: float = 1.2) -> float:
    if not cand and not ref:
        return 1.0
    if not cand or not ref:
        return 0.0
    lcs = lcs_length(*_encode_pair(cand, ref))
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return (1 + beta**2) * p * r / (r + beta**2 * p)


def rouge_l(candidates, references, beta: float = 1.2) -> float:
    cands, refs = _prepare(candidates, references)
    return float(np.mean([rouge_l_pair(c, r, beta) for c, r in zip(cands, refs)]))


# ------------------------------------------------------------ METEOR-simple


def align(cand: list[str], ref: list[str]) -> list[tuple[int, int]]:
    """Exact-match unigram alignment, sorted by candidate position.

    Repeatedly links the longest run of identical consecutive tokens among
    still-unaligned positions (earliest run on ties), which keeps the chunk
    count low the way METEOR's minimal-crossing alignment does.
    """
    free_c = [True] * len(cand)
    free_r = [True] * len(ref)
    pairs: list[tuple[int, int]] = []
    while True:
        best = (0, 0, 0)
        for i in range(len(cand)):
            if not free_c[i]:
                continue
            for j in range(len(ref)):
                length = 0
                while (i + length < len(cand) and j + length < len(ref) and free_c[i + length]
                       and free_r[j + length] and cand[i + length] == ref[j + length]):
                    length += 1
                if length > best[2]:
                    best = (i, j, length)
        i, j, length = best
        if length == 0:
            break
        for t in range(length):
            free_c[i + t] = free_r[j + t] = False
            pairs.append((i + t, j + t))
    return sorted(pairs)


def meteor_pair(cand: list[str], ref: list[str]) -> float:
    pairs = align(cand, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, r = m / len(cand), m / len(ref)
    fmean = 10 * p * r / (r + 9 * p)
    chunks = 1 + sum(1 for a, b in zip(pairs, pairs[1:]) if not (b[0] == a[0] + 1 and b[1] == a[1] + 1))
    return fmean * (1.0 - 0.5 * (chunks / m) ** 3)


def meteor_simple(candidates, references) -> float:
    """METEOR with exact matches only (no stemming or synonyms), averaged per pair."""
    cands, refs = _prepare(candidates, references)
    return float(np.mean([meteor_pair(c, r) for c, r in zip(cands, refs)]))


# -------------------------------------------------------------------- CIDEr


def cider(candidates, references, corpus=None, max_n: int = 4) -> float:
    """10 x mean over n of the mean tf-idf cosine between candidate and reference.

    Document frequencies come from ``corpus`` (defaults to the references),
    with idf = log(N / max(1, df)). A one-document corpus has idf 0 for every
    n-gram and therefore scores 0.
    """
    cands, refs = _prepare(candidates, references)
    docs = refs if corpus is None else [tokenize(d) if isinstance(d, str) else d for d in corpus]
    if not docs:
        raise ContractError("CIDEr needs a non-empty document corpus")
    n_docs = len(docs)
    total = 0.0
    for n in range(1, max_n + 1):
        df = Counter()
        for d in docs:
            df.update(set(ngrams(d, n)))

        def vec(tokens):
            g = ngrams(tokens, n)
            size = max(1, sum(g.values()))
            return {k: (v / size) * math.log(n_docs / max(1, df[k])) for k, v in g.items()}

        sims = []
        for c, r in zip(cands, refs):
            vc, vr = vec(c), vec(r)
            dot = sum(w * vr.get(k, 0.0) for k, w in vc.items())
            nc = math.sqrt(sum(w * w for w in vc.values()))
            nr = math.sqrt(sum(w * w for w in vr.values()))
            sims.append(dot / (nc * nr) if nc > 0 and nr > 0 else 0.0)
        total += float(np.mean(sims))
    return 10.0 * total / max_n


# ---------------------------------------------------------------- clinical


@dataclass
class ClinicalScores:
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]  # classes positive in candidate or reference
    macro_precision: float
    macro_recall: float
    macro_f1: float


def clinical_efficacy(candidates, references, labeler) -> ClinicalScores:
    """Per-class P/R/F1 of labels extracted from candidate vs reference reports.

    Classes absent from both sides are left out of the macro average; with no
    class present anywhere the macro scores are 1.
    """
    if len(candidates) != len(references):
        raise ContractError(f"{len(candidates)} candidates for {len(references)} references")
    if not candidates:
        raise ContractError("metric over an empty corpus")
    pred = np.stack([np.asarray(labeler(c), dtype=bool) for c in candidates])
    gold = np.stack([np.asarray(labeler(r), dtype=bool) for r in references])
    tp = (pred & gold).sum(axis=0)
    fp = (pred & ~gold).sum(axis=0)
    fn = (~pred & gold).sum(axis=0)
    prec = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 0.0)
    rec = np.where(tp + fn > 0, tp / np.maximum(tp + fn, 1), 0.0)
    f1 = np.where(2 * tp + fp + fn > 0, 2 * tp / np.maximum(2 * tp + fp + fn, 1), 0.0)
    present = (tp + fp + fn) > 0
    if present.any():
        macro = (float(prec[present].mean()), float(rec[present].mean()), float(f1[present].mean()))
    else:
        macro = (1.0, 1.0, 1.0)
    return ClinicalScores(prec.tolist(), rec.tolist(), f1.tolist(), (tp + fp + fn).astype(int).tolist(), *macro)


# ------------------------------------------------------------------ report


@dataclass
class EvalReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    meteor_simple: float
    cider: float
    clinical: ClinicalScores

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def row(self) -> list[float]:
        c = self.clinical
        return [self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.meteor_simple, self.rouge_l, self.cider,
                c.macro_precision, c.macro_recall, c.macro_f1]


TABLE_HEADER = ["BL-1", "BL-2", "BL-3", "BL-4", "MTR", "RG-L", "CIDEr", "P", "R", "F1"]


def format_table(rows: list[tuple[str, EvalReport]], label: str = "Method") -> str:
    """Markdown table: language metrics then clinical macro P/R/F1."""
    lines = ["| " + " | ".join([label] + TABLE_HEADER) + " |", "|" + "---|" * (len(TABLE_HEADER) + 1)]
    for name, rep in rows:
        lines.append("| " + " | ".join([name] + [f"{v:.3f}" for v in rep.row()]) + " |")
    return "\n".join(lines) + "\n"


def evaluate(candidates, references, labeler, corpus=None) -> EvalReport:
    return EvalReport(
        bleu(candidates, references, 1),
        bleu(candidates, references, 2),
        bleu(candidates, references, 3),
        bleu(candidates, references, 4),
        rouge_l(candidates, references),
        meteor_simple(candidates, references),
        cider(candidates, references, corpus),
        clinical_efficacy(candidates, references, labeler),
    )
