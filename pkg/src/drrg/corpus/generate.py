"""Synthetic chest-film-like images with rendered lesions and matching reports."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from drrg.corpus.grammar import DiseaseGrammar, blob_box, blob_mask, load_grammar
from drrg.errors import ContractError
from drrg.text import tokenize


@dataclass(frozen=True)
class CorpusConfig:
    image_size: int = 64
    n_classes: int = 6
    prevalence: float = 0.25
    grammar: str = "grammar6"
    noise: float = 0.06
    max_diseases: int = 3
    min_normal: int = 2
    max_normal: int = 4
    max_report_tokens: int = 58

    def load_grammar(self) -> DiseaseGrammar:
        return load_grammar(self.grammar, k=self.n_classes)


@dataclass
class Lesion:
    label: int
    cy: float
    cx: float
    radius: float

    def box(self, size: int) -> tuple[int, int, int, int]:
        return blob_box(size, self.cy, self.cx, self.radius)


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (1, H, W), values in [0, 1]
    report: str
    labels: np.ndarray  # (K,) bool
    lesions: list[Lesion] = field(default_factory=list)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    gain = rng.uniform(0.8, 1.2)
    img = 0.55 * gain + 0.1 * rng.uniform(-1, 1) * (yy - 0.5)
    for side in (0.3, 0.7):
        cy = 0.5 + rng.uniform(-0.05, 0.05)
        cx = side + rng.uniform(-0.04, 0.04)
        ry = rng.uniform(0.3, 0.4)
        rx = rng.uniform(0.13, 0.18)
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        img = np.where(inside, 0.25 * gain, img)
    return img


def _draw_count(rng: np.random.Generator, k: int, prevalence: float, cap: int) -> int:
    # Binomial(cap, k*p/cap) keeps every class's marginal prevalence exactly p
    mean = k * prevalence
    if mean > cap or cap > k:
        raise ContractError(f"cannot draw mean {mean:.2f} diseases with at most {cap} of {k}")
    return int(rng.binomial(cap, mean / cap))


def render_sample(rng: np.random.Generator, sid: str, grammar: DiseaseGrammar, config: CorpusConfig) -> Sample:
    size = config.image_size
    scale = size / 64.0
    k = grammar.n_classes
    n_dis = _draw_count(rng, k, config.prevalence, min(config.max_diseases, k))
    chosen = np.sort(rng.choice(k, size=n_dis, replace=False)) if n_dis else np.array([], dtype=int)

    img = _background(rng, size)
    lesions = []
    for c in chosen:
        d = grammar.diseases[c]
        r = rng.uniform(*d.radius) * scale
        r0, r1, c0, c1 = d.region
        lo_y, hi_y = r0 * size + r, r1 * size - r
        lo_x, hi_x = c0 * size + r, c1 * size - r
        cy = rng.uniform(lo_y, max(lo_y, hi_y))
        cx = rng.uniform(lo_x, max(lo_x, hi_x))
        img = img + rng.uniform(*d.amplitude) * blob_mask(d.kind, size, cy, cx, r)
        lesions.append(Lesion(int(c), float(cy), float(cx), float(r)))
    img = img + rng.normal(0.0, config.noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32).astype(np.float64)

    abnormal = [grammar.diseases[c].templates[rng.integers(len(grammar.diseases[c].templates))] for c in chosen]
    n_norm = int(rng.integers(config.min_normal, config.max_normal + 1))
    normal = list(rng.choice(len(grammar.normal_sentences), size=n_norm, replace=False))
    sentences = abnormal + [grammar.normal_sentences[i] for i in normal]
    order = rng.permutation(len(sentences))
    sentences = [sentences[i] for i in order]

    def n_tokens(sents):
        return sum(len(tokenize(s)) + 1 for s in sents)

    normal_set = set(grammar.normal_sentences)
    while n_tokens(sentences) > config.max_report_tokens and sum(s in normal_set for s in sentences) > config.min_normal:
        drop = max(i for i, s in enumerate(sentences) if s in normal_set)
        sentences.pop(drop)
    report = " ".join(s[0].upper() + s[1:] + "." for s in sentences)
    labels = np.zeros(k, dtype=bool)
    labels[chosen] = True
    return Sample(sid, img[None], report, labels, lesions)


def generate_corpus(seed: int, n: int, config: CorpusConfig | None = None) -> list[Sample]:
    """``n`` samples, each from its own RNG stream keyed by (seed, index)."""
    if n < 1:
        raise ContractError("corpus size must be at least 1")
    config = config or CorpusConfig()
    grammar = config.load_grammar()
    return [render_sample(np.random.default_rng([seed, i]), f"s{i:05d}", grammar, config) for i in range(n)]
