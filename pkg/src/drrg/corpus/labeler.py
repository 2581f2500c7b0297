"""Rule-based disease labeler over the closed synthetic grammar."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from drrg.corpus.grammar import DiseaseGrammar, load_grammar
from drrg.text import split_sentences, tokenize


def _words(text: str) -> list[str]:
    return [t for t in tokenize(text) if t[0].isalnum()]


def _phrase_in(phrase, words, prefix: bool = True) -> bool:
    n = len(phrase)
    for i in range(len(words) - n + 1):
        if prefix:
            ok = all(words[i + j].startswith(phrase[j]) for j in range(n))
        else:
            ok = all(words[i + j] == phrase[j] for j in range(n))
        if ok:
            return True
    return False


class Labeler:
    """Maps sentences and reports to K-bit disease vectors.

    A disease is positive in a sentence when one of its keyword phrases
    occurs (word-prefix match) and no negation cue occurs in that sentence.
    """

    def __init__(self, grammar: DiseaseGrammar):
        self.grammar = grammar

    @property
    def n_classes(self) -> int:
        return self.grammar.n_classes

    def label_sentence(self, sentence: str) -> np.ndarray:
        words = _words(sentence)
        bits = np.zeros(self.n_classes, dtype=bool)
        if any(_phrase_in(cue, words, prefix=False) for cue in self.grammar.negation_cues):
            return bits
        for c, d in enumerate(self.grammar.diseases):
            bits[c] = any(_phrase_in(k, words) for k in d.keywords)
        return bits

    def extract_labels(self, report: str) -> np.ndarray:
        bits = np.zeros(self.n_classes, dtype=bool)
        for s in split_sentences(report):
            bits |= self.label_sentence(s)
        return bits

    __call__ = extract_labels


@lru_cache(maxsize=None)
def default_labeler(k: int = 6) -> Labeler:
    return Labeler(load_grammar("grammar6" if k <= 6 else "grammar14", k=k))


def label_sentence(sentence: str, labeler: Labeler | None = None) -> np.ndarray:
    return (labeler or default_labeler()).label_sentence(sentence)


def extract_labels(report: str, labeler: Labeler | None = None) -> np.ndarray:
    return (labeler or default_labeler()).extract_labels(report)
